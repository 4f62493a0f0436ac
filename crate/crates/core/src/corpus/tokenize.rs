use serde::{Deserialize, Serialize};

/// A token with its character offsets (end-exclusive) in the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub start: usize,
    pub end: usize,
}

/// Splits on whitespace, then peels leading and trailing ASCII punctuation
/// off each chunk as single-character tokens.
///
/// ```
/// let toks: Vec<_> = keci::corpus::tokenize("FK506 binds FKBP12.")
///     .into_iter()
///     .map(|t| t.text)
///     .collect();
/// assert_eq!(toks, ["FK506", "binds", "FKBP12", "."]);
/// ```
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        split_chunk(&chars, start, i, &mut tokens);
    }
    tokens
}

fn split_chunk(chars: &[char], start: usize, end: usize, out: &mut Vec<Token>) {
    let punct = |c: char| c.is_ascii_punctuation();
    let mut lead = start;
    while lead < end && punct(chars[lead]) {
        lead += 1;
    }
    let mut trail = end;
    while trail > lead && punct(chars[trail - 1]) {
        trail -= 1;
    }
    let mut push = |a: usize, b: usize| {
        out.push(Token {
            text: chars[a..b].iter().collect(),
            start: a,
            end: b,
        })
    };
    for p in start..lead {
        push(p, p + 1);
    }
    if lead < trail {
        push(lead, trail);
    }
    for p in trail..end {
        push(p, p + 1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(s: &str) -> Vec<String> {
        tokenize(s).into_iter().map(|t| t.text).collect()
    }

    #[test]
    fn detaches_edge_punctuation() {
        assert_eq!(
            texts("FK506 binds FKBP12."),
            ["FK506", "binds", "FKBP12", "."]
        );
        assert_eq!(texts("(IL-2)."), ["(", "IL-2", ")", "."]);
        assert_eq!(texts("..."), [".", ".", "."]);
    }

    #[test]
    fn empty_text() {
        assert!(tokenize("").is_empty());
        assert!(tokenize("  \n\t").is_empty());
    }

    #[test]
    fn offsets_count_chars() {
        let t = tokenize("αβ  γ.");
        assert_eq!((t[0].start, t[0].end), (0, 2));
        assert_eq!((t[1].start, t[1].end), (4, 5));
        assert_eq!((t[2].start, t[2].end), (5, 6));
    }
}
