use std::collections::BTreeMap;

use serde::Serialize;

use super::Prediction;
use crate::kb::KnowledgeBase;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct TypeAttention {
    pub mean: f64,
    pub count: usize,
}

/// Mean attention weight received by candidates of each semantic type.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttentionReport {
    pub per_type: BTreeMap<String, TypeAttention>,
    /// Mean sentinel weight over kept spans, 1 when there are none.
    pub sentinel_mean: f64,
    pub spans: usize,
}

impl AttentionReport {
    /// Mean over the listed types' weights, pooled by count.
    pub fn pooled_mean<'a>(&self, types: impl IntoIterator<Item = &'a str>) -> Option<f64> {
        let (sum, n) = types
            .into_iter()
            .filter_map(|t| self.per_type.get(t))
            .fold((0.0, 0), |(s, n), a| {
                (s + a.mean * a.count as f64, n + a.count)
            });
        (n > 0).then(|| sum / n as f64)
    }
}

/// Buckets every span-candidate weight by the candidate's semantic types;
/// a candidate with several types counts toward each.
pub fn attention_report(predictions: &[Prediction], kb: &KnowledgeBase) -> AttentionReport {
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    let (mut sentinel, mut spans) = (0.0, 0);
    for span in predictions.iter().flat_map(|p| &p.attention) {
        sentinel += span.sentinel;
        spans += 1;
        for (entity, w) in &span.candidates {
            for t in kb.entity_type_indices(*entity) {
                let e = sums.entry(*t).or_default();
                e.0 += w;
                e.1 += 1;
            }
        }
    }
    AttentionReport {
        per_type: sums
            .into_iter()
            .map(|(t, (s, n))| {
                (
                    kb.semantic_types()[t].clone(),
                    TypeAttention {
                        mean: s / n as f64,
                        count: n,
                    },
                )
            })
            .collect(),
        sentinel_mean: if spans == 0 {
            1.0
        } else {
            sentinel / spans as f64
        },
        spans,
    }
}
