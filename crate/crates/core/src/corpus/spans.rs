use serde::{Deserialize, Serialize};

/// Token range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start < end);
        Self { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    /// Index of the last token inside the span.
    pub fn last(&self) -> usize {
        self.end - 1
    }
}

/// Every span of length `1..=min(max_len, n)`, ordered by `(start, end)`.
pub fn enumerate_spans(n: usize, max_len: usize) -> Vec<Span> {
    let mut out = Vec::with_capacity(span_count(n, max_len));
    for start in 0..n {
        for end in start + 1..=(start + max_len).min(n) {
            out.push(Span { start, end });
        }
    }
    out
}

/// Closed form for `enumerate_spans(n, max_len).len()`.
pub fn span_count(n: usize, max_len: usize) -> usize {
    (1..=max_len.min(n)).map(|l| n - l + 1).sum()
}
