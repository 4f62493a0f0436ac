//! Sentinel attention between span states and candidate entity states.

use keci_autodiff::{ParameterStore, Real, Tape, Var};

use crate::nn::{mask_value, matrix, Ffnn, Linear, ParamSpec};
use crate::{KeciError, Result};

/// Attention mass one span puts on its sentinel and on each candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanAttention {
    pub sentinel: f64,
    /// `(graph node, weight)` in candidate order.
    pub candidates: Vec<(usize, f64)>,
}

impl SpanAttention {
    pub fn total(&self) -> f64 {
        self.sentinel + self.candidates.iter().map(|(_, w)| w).sum::<f64>()
    }
}

pub struct FusionOutput<'t, F: Real> {
    /// Knowledge-aware span states `[k × d]`.
    pub fused: Var<'t, F>,
    pub attention: Vec<SpanAttention>,
}

/// Softmax over each span's own columns of a stacked score vector.
///
/// `scores` is `[c × 1]`, `values` is `[c × d]` and `owners[col]` names the
/// span (row of the output) each column competes for. Returns the weighted
/// sums `[k × d]` and the weights `[k × c]`, zero outside a span's columns.
pub fn sentinel_attention<'t, F: Real>(
    tape: &'t Tape<F>,
    scores: Var<'t, F>,
    values: Var<'t, F>,
    owners: &[usize],
    k: usize,
) -> Result<(Var<'t, F>, Var<'t, F>)> {
    let c = owners.len();
    if scores.numel() != c || values.shape()[0] != c {
        return Err(KeciError::Contract(format!(
            "{} owners for {} scores and {} value rows",
            c,
            scores.numel(),
            values.shape()[0]
        )));
    }
    if let Some(o) = owners.iter().find(|o| **o >= k) {
        return Err(KeciError::Contract(format!("owner {o} out of {k} spans")));
    }
    let mut index = Vec::with_capacity(k * c);
    let mut mask = Vec::with_capacity(k * c);
    for i in 0..k {
        for (col, owner) in owners.iter().enumerate() {
            let mine = *owner == i;
            index.push(mine.then_some(col));
            mask.push(if mine { F::zero() } else { mask_value() });
        }
    }
    let weights = scores
        .gather(index, vec![k, c])?
        .add(matrix(tape, k, c, mask)?)?
        .softmax(1)?;
    Ok((weights.matmul(values)?, weights))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    /// Scores a `[span, candidate]` or `[span, sentinel]` pair.
    pub scorer: Ffnn,
    /// Maps a span state to its sentinel vector.
    pub sentinel: Linear,
}

impl Fusion {
    pub fn new(d: usize) -> Self {
        Self {
            scorer: Ffnn::new("fusion.ffnn_c", 2 * d, d, 1),
            sentinel: Linear::new("fusion.ffnn_s", d, d),
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = self.scorer.specs();
        s.extend(self.sentinel.specs());
        s
    }

    /// `h` is `[k × d]`; `nodes` holds the projected graph states and
    /// `candidates[i]` lists node rows for span `i`.
    pub fn forward<'t, F: Real>(
        &self,
        tape: &'t Tape<F>,
        store: &ParameterStore<F>,
        h: Var<'t, F>,
        nodes: Option<Var<'t, F>>,
        candidates: &[Vec<usize>],
    ) -> Result<FusionOutput<'t, F>> {
        let k = h.shape()[0];
        if candidates.len() != k {
            return Err(KeciError::Contract(format!(
                "{} candidate lists for {k} spans",
                candidates.len()
            )));
        }
        let sentinels = self.sentinel.forward(tape, store, h)?;
        let mut owners: Vec<usize> = (0..k).collect();
        let mut cand_nodes = Vec::new();
        for (i, c) in candidates.iter().enumerate() {
            owners.extend(std::iter::repeat_n(i, c.len()));
            cand_nodes.extend_from_slice(c);
        }
        let mut pairs = vec![tape.concat(&[h, sentinels], 1)?];
        let mut values = vec![sentinels];
        if !cand_nodes.is_empty() {
            let nodes = nodes.ok_or_else(|| {
                KeciError::Contract("candidates given without graph states".into())
            })?;
            let n = nodes.select_rows(&cand_nodes)?;
            pairs.push(tape.concat(&[h.select_rows(&owners[k..])?, n], 1)?);
            values.push(n);
        }
        let scores = self.scorer.forward(tape, store, tape.concat(&pairs, 0)?)?;
        let (fused, weights) =
            sentinel_attention(tape, scores, tape.concat(&values, 0)?, &owners, k)?;

        let w = weights.value();
        let mut attention: Vec<SpanAttention> = (0..k)
            .map(|i| SpanAttention {
                sentinel: w.at(i, i).to_f64_lossy(),
                candidates: Vec::with_capacity(candidates[i].len()),
            })
            .collect();
        for (col, (&owner, &node)) in owners[k..].iter().zip(&cand_nodes).enumerate() {
            attention[owner]
                .candidates
                .push((node, w.at(owner, k + col).to_f64_lossy()));
        }
        Ok(FusionOutput { fused, attention })
    }
}
