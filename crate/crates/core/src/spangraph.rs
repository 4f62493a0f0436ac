//! Initial span graph: entity scoring, pruning, pairwise relation scoring
//! and the bidirectional GCN over predicted relations.

use keci_autodiff::{ParameterStore, Real, Tape, Var};

use crate::corpus::Span;
use crate::nn::{zeros, Ffnn, Init, Linear, ParamSpec};
use crate::Result;

/// Softmax over entity types from span (or fused) representations.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityClassifier {
    pub linear: Linear,
}

impl EntityClassifier {
    pub fn new(prefix: &str, d: usize, num_types: usize) -> Self {
        Self {
            linear: Linear::new(prefix, d, num_types),
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.linear.specs()
    }

    /// `[m × |E|]` distributions.
    pub fn forward<'t, F: Real>(
        &self,
        tape: &'t Tape<F>,
        store: &ParameterStore<F>,
        reps: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        Ok(self.linear.forward(tape, store, reps)?.softmax(1)?)
    }
}

/// Number of spans kept for an `n`-token sentence.
pub fn prune_budget(ratio: f64, n_tokens: usize) -> usize {
    // the epsilon keeps e.g. 0.3 * 10 from rounding up to 4
    (ratio * n_tokens as f64 - 1e-9).ceil().max(0.0) as usize
}

/// Keeps the `ceil(ratio·n)` spans least likely to be non-entities. Ties
/// fall back to span order. Returned indices are ascending.
pub fn prune_spans(non_entity: &[f64], spans: &[Span], ratio: f64, n_tokens: usize) -> Vec<usize> {
    debug_assert_eq!(non_entity.len(), spans.len());
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by(|a, b| {
        non_entity[*a]
            .total_cmp(&non_entity[*b])
            .then_with(|| spans[*a].cmp(&spans[*b]))
    });
    order.truncate(prune_budget(ratio, n_tokens).min(spans.len()));
    order.sort_unstable();
    order
}

/// Ordered pairs `(i, j)`, `i ≠ j`, of `k` nodes; `i` major.
pub fn ordered_pairs(k: usize) -> Vec<(usize, usize)> {
    (0..k)
        .flat_map(|i| (0..k).filter(move |j| *j != i).map(move |j| (i, j)))
        .collect()
}

/// Row of `(i, j)` in [`ordered_pairs`].
pub fn pair_index(i: usize, j: usize, k: usize) -> usize {
    debug_assert!(i != j && i < k && j < k);
    i * (k - 1) + if j < i { j } else { j - 1 }
}

/// Scores every ordered pair of nodes from `[h_i, h_j, h_i ∘ h_j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationClassifier {
    pub ffnn: Ffnn,
}

impl RelationClassifier {
    pub fn new(prefix: &str, d: usize, num_types: usize) -> Self {
        Self {
            ffnn: Ffnn::new(prefix, 3 * d, d, num_types),
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        self.ffnn.specs()
    }

    /// Logits `[k(k-1) × |R|]` in [`ordered_pairs`] order; `None` when
    /// there are fewer than two nodes.
    pub fn logits<'t, F: Real>(
        &self,
        tape: &'t Tape<F>,
        store: &ParameterStore<F>,
        reps: Var<'t, F>,
    ) -> Result<Option<Var<'t, F>>> {
        let k = reps.shape()[0];
        if k < 2 {
            return Ok(None);
        }
        let (heads, tails): (Vec<usize>, Vec<usize>) = ordered_pairs(k).into_iter().unzip();
        let hi = reps.select_rows(&heads)?;
        let hj = reps.select_rows(&tails)?;
        let input = tape.concat(&[hi, hj, hi.mul(hj)?], 1)?;
        Ok(Some(self.ffnn.forward(tape, store, input)?))
    }
}

/// `[k × k]` matrix of `r_ij[rel]` (or `r_ji[rel]` when `reverse`) with a
/// zero diagonal.
pub fn relation_adjacency<'t, F: Real>(
    probs: Var<'t, F>,
    k: usize,
    rel: usize,
    reverse: bool,
) -> Result<Var<'t, F>> {
    let num_rel = probs.shape()[1];
    let mut index = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            index.push((i != j).then(|| {
                let p = if reverse {
                    pair_index(j, i, k)
                } else {
                    pair_index(i, j, k)
                };
                p * num_rel + rel
            }));
        }
    }
    Ok(probs.gather(index, vec![k, k])?)
}

/// Residual bidirectional GCN whose edge weights are relation
/// probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct BiGcn {
    pub d: usize,
    pub num_relations: usize,
    pub num_layers: usize,
    pub num_bases: Option<usize>,
}

const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

impl BiGcn {
    pub fn new(
        d: usize,
        num_relations: usize,
        num_layers: usize,
        num_bases: Option<usize>,
    ) -> Self {
        Self {
            d,
            num_relations,
            num_layers,
            num_bases,
        }
    }

    fn combine(&self, layer: usize) -> Linear {
        Linear::new(&format!("bigcn.layer{layer}.ffnn_a"), 2 * self.d, self.d)
    }

    fn prefix(layer: usize, dir: &str) -> String {
        format!("bigcn.layer{layer}.{dir}")
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let d = self.d;
        let mut s = Vec::new();
        for l in 0..self.num_layers {
            for dir in DIRECTIONS {
                let p = Self::prefix(l, dir);
                match self.num_bases {
                    None => {
                        for k in 0..self.num_relations {
                            s.extend(Linear::new(&format!("{p}.rel{k}"), d, d).specs());
                        }
                    }
                    Some(b) => {
                        for i in 0..b {
                            s.push(ParamSpec::new(
                                format!("{p}.basis{i}"),
                                vec![d, d],
                                Init::Glorot,
                            ));
                        }
                        s.push(ParamSpec::new(
                            format!("{p}.coeff"),
                            vec![self.num_relations, b],
                            Init::Glorot,
                        ));
                        for k in 0..self.num_relations {
                            s.push(ParamSpec::new(
                                format!("{p}.rel{k}.bias"),
                                vec![d],
                                Init::Zeros,
                            ));
                        }
                    }
                }
            }
            s.extend(self.combine(l).specs());
        }
        s
    }

    fn relation_weight<'t, F: Real>(
        &self,
        tape: &'t Tape<F>,
        store: &ParameterStore<F>,
        prefix: &str,
        rel: usize,
    ) -> Result<Var<'t, F>> {
        let Some(b) = self.num_bases else {
            return Ok(tape.param(store, &format!("{prefix}.rel{rel}.weight"))?);
        };
        let coeff = tape.param(store, &format!("{prefix}.coeff"))?;
        let mut w: Option<Var<'t, F>> = None;
        for i in 0..b {
            let c = coeff.gather(vec![Some(rel * b + i)], vec![1])?;
            let term = tape.param(store, &format!("{prefix}.basis{i}"))?.mul(c)?;
            w = Some(match w {
                Some(acc) => acc.add(term)?,
                None => term,
            });
        }
        Ok(w.expect("at least one basis"))
    }

    /// Runs every layer. `probs` are the `[k(k-1) × |R|]` relation
    /// distributions, `None` for a single node (all messages are empty).
    pub fn forward<'t, F: Real>(
        &self,
        tape: &'t Tape<F>,
        store: &ParameterStore<F>,
        h0: Var<'t, F>,
        probs: Option<Var<'t, F>>,
    ) -> Result<Var<'t, F>> {
        let k = h0.shape()[0];
        let adjacency = match probs {
            Some(p) => Some(
                (0..self.num_relations)
                    .map(|r| {
                        Ok((
                            relation_adjacency(p, k, r, false)?,
                            relation_adjacency(p, k, r, true)?,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let mut h = h0;
        for l in 0..self.num_layers {
            let mut messages = Vec::with_capacity(2);
            for (d_i, dir) in DIRECTIONS.iter().enumerate() {
                let Some(adj) = &adjacency else {
                    messages.push(zeros(tape, k, self.d)?);
                    continue;
                };
                let p = Self::prefix(l, dir);
                let mut total: Option<Var<'t, F>> = None;
                for (r, pair) in adj.iter().enumerate() {
                    let a = if d_i == 0 { pair.0 } else { pair.1 };
                    let w = self.relation_weight(tape, store, &p, r)?;
                    let b = tape.param(store, &format!("{p}.rel{r}.bias"))?;
                    let msg = a.matmul(h.matmul(w)?.add_row(b)?)?;
                    total = Some(match total {
                        Some(t) => t.add(msg)?,
                        None => msg,
                    });
                }
                messages.push(total.expect("at least one relation type"));
            }
            let joined = tape.concat(&messages, 1)?.relu();
            h = h.add(self.combine(l).forward(tape, store, joined)?)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_store;
    use keci_autodiff::Tensor;

    #[test]
    fn budget_examples() {
        assert_eq!(prune_budget(0.5, 10), 5);
        assert_eq!(prune_budget(0.5, 5), 3);
        assert_eq!(prune_budget(0.3, 10), 3);
        assert_eq!(prune_budget(1.0, 0), 0);
    }

    #[test]
    fn prune_keeps_lowest_scores() {
        let spans = crate::corpus::enumerate_spans(10, 3);
        assert_eq!(spans.len(), 27);
        let scores: Vec<f64> = (0..27).map(|i| ((i * 7) % 27) as f64 / 27.0).collect();
        let kept = prune_spans(&scores, &spans, 0.5, 10);
        assert_eq!(kept.len(), 5);
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        let mut got: Vec<f64> = kept.iter().map(|i| scores[*i]).collect();
        got.sort_by(f64::total_cmp);
        assert_eq!(got, sorted[..5]);
    }

    #[test]
    fn prune_ties_follow_span_order() {
        let spans = crate::corpus::enumerate_spans(4, 4);
        let kept = prune_spans(&vec![0.5; spans.len()], &spans, 0.5, 4);
        assert_eq!(kept, vec![0, 1]);
        let all = prune_spans(&[0.1, 0.2], &spans[..2], 1.0, 10);
        assert_eq!(all, vec![0, 1]);
    }

    #[test]
    fn pairs_and_indices_agree() {
        let pairs = ordered_pairs(3);
        assert_eq!(pairs.len(), 6);
        for (p, (i, j)) in pairs.iter().enumerate() {
            assert_eq!(pair_index(*i, *j, 3), p);
        }
    }

    #[test]
    fn zero_weights_give_uniform_entities() {
        let clf = EntityClassifier::new("e", 3, 4);
        let mut store = init_store::<f64>(&clf.specs(), 0).unwrap();
        store.get_mut("e.weight").unwrap().values_mut().fill(0.0);
        let tape = Tape::new();
        let s = tape.constant(Tensor::full(vec![2, 3], 0.7).unwrap());
        assert!(clf
            .forward(&tape, &store, s)
            .unwrap()
            .to_vec()
            .iter()
            .all(|v| *v == 0.25));
    }

    #[test]
    fn relation_scores_are_directed() {
        let clf = RelationClassifier::new("r", 2, 3);
        let store = init_store::<f64>(&clf.specs(), 4).unwrap();
        let tape = Tape::new();
        let h =
            tape.constant(Tensor::new(vec![3, 2], vec![0.1, 0.9, -0.4, 0.3, 1.2, -0.8]).unwrap());
        let logits = clf.logits(&tape, &store, h).unwrap().unwrap();
        assert_eq!(logits.shape(), vec![6, 3]);
        let p = logits.softmax(1).unwrap().value();
        assert_ne!(p.row(pair_index(0, 1, 3)), p.row(pair_index(1, 0, 3)));
        let one = tape.constant(Tensor::new(vec![1, 2], vec![0.1, 0.2]).unwrap());
        assert!(clf.logits(&tape, &store, one).unwrap().is_none());
    }

    #[test]
    fn zero_layers_is_identity_and_single_node_has_empty_messages() {
        let gcn = BiGcn::new(2, 2, 0, None);
        let store = init_store::<f64>(&gcn.specs(), 0).unwrap();
        let tape = Tape::new();
        let h = tape.constant(Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap());
        assert_eq!(
            gcn.forward(&tape, &store, h, None).unwrap().to_vec(),
            vec![0.3, -0.2]
        );

        let gcn = BiGcn::new(2, 2, 1, None);
        let store = init_store::<f64>(&gcn.specs(), 0).unwrap();
        let tape = Tape::new();
        let h = tape.constant(Tensor::new(vec![1, 2], vec![0.3, -0.2]).unwrap());
        let out = gcn.forward(&tape, &store, h, None).unwrap().to_vec();
        // FFNN_a(ReLU(0)) is its bias, zero at init
        assert_eq!(out, vec![0.3, -0.2]);
    }
}
