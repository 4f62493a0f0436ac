use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use super::decode::PredictedGraph;
use crate::corpus::{Span, TaskSchema};

/// Precision, recall and F1 with the counts they came from. Macro scores
/// carry the summed counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct MicroMacro {
    pub micro: Prf,
    #[serde(rename = "macro")]
    pub macro_: Prf,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Metrics {
    pub entity: MicroMacro,
    pub relation: MicroMacro,
}

impl Metrics {
    pub fn compute(pred: &[PredictedGraph], gold: &[PredictedGraph]) -> Self {
        Self {
            entity: score_entities(pred, gold),
            relation: score_relations(pred, gold),
        }
    }

    /// Mean of entity and relation micro F1, used for model selection.
    pub fn selection_score(&self) -> f64 {
        (self.entity.micro.f1 + self.relation.micro.f1) / 2.0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("plain numbers")
    }

    /// Table with one row per task and averaging mode.
    pub fn table(&self) -> MetricsTable<'_> {
        MetricsTable(self)
    }
}

pub struct MetricsTable<'a>(&'a Metrics);

impl fmt::Display for MetricsTable<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<10} {:<6} {:>7} {:>7} {:>7}",
            "task", "avg", "P", "R", "F1"
        )?;
        for (task, mm) in [("entity", &self.0.entity), ("relation", &self.0.relation)] {
            for (avg, p) in [("micro", &mm.micro), ("macro", &mm.macro_)] {
                writeln!(
                    f,
                    "{:<10} {:<6} {:>7.4} {:>7.4} {:>7.4}",
                    task, avg, p.precision, p.recall, p.f1
                )?;
            }
        }
        Ok(())
    }
}

/// Micro and macro scores of typed items under multiset matching. Each
/// item is `(key, type)`; the key must already include the type.
pub fn score_items<K: Ord + Clone>(pred: &[(K, usize)], gold: &[(K, usize)]) -> MicroMacro {
    let count = |items: &[(K, usize)]| {
        let mut m: BTreeMap<(usize, K), usize> = BTreeMap::new();
        for (k, t) in items {
            *m.entry((*t, k.clone())).or_default() += 1;
        }
        m
    };
    let (p, g) = (count(pred), count(gold));
    let mut per_type: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for ((t, k), n) in &p {
        let matched = g.get(&(*t, k.clone())).copied().unwrap_or(0).min(*n);
        let e = per_type.entry(*t).or_default();
        e.0 += matched;
        e.1 += n - matched;
    }
    for ((t, k), n) in &g {
        let matched = p.get(&(*t, k.clone())).copied().unwrap_or(0).min(*n);
        per_type.entry(*t).or_default().2 += n - matched;
    }
    let (tp, fp, fn_) = per_type
        .values()
        .fold((0, 0, 0), |a, c| (a.0 + c.0, a.1 + c.1, a.2 + c.2));
    let gold_types: BTreeSet<usize> = gold.iter().map(|(_, t)| *t).collect();
    let mut macro_ = Prf {
        tp,
        fp,
        fn_,
        ..Prf::default()
    };
    if !gold_types.is_empty() {
        let scores: Vec<Prf> = gold_types
            .iter()
            .map(|t| {
                let (tp, fp, fn_) = per_type[t];
                Prf::from_counts(tp, fp, fn_)
            })
            .collect();
        let mean = |f: fn(&Prf) -> f64| scores.iter().map(f).sum::<f64>() / scores.len() as f64;
        macro_ = Prf {
            precision: mean(|p| p.precision),
            recall: mean(|p| p.recall),
            f1: mean(|p| p.f1),
            tp,
            fp,
            fn_,
        };
    }
    MicroMacro {
        micro: Prf::from_counts(tp, fp, fn_),
        macro_,
    }
}

type EntityKey = (usize, Span, usize);
type RelationKey = (usize, Span, usize, Span, usize, usize);

fn entity_items(graphs: &[PredictedGraph]) -> Vec<(EntityKey, usize)> {
    graphs
        .iter()
        .enumerate()
        .flat_map(|(d, g)| {
            g.entities
                .iter()
                .map(move |e| ((d, e.span, e.label), e.label))
        })
        .collect()
}

fn relation_items(graphs: &[PredictedGraph]) -> Vec<(RelationKey, usize)> {
    graphs
        .iter()
        .enumerate()
        .flat_map(|(d, g)| {
            g.relations.iter().map(move |r| {
                let (h, t) = (g.entities[r.head], g.entities[r.tail]);
                ((d, h.span, h.label, t.span, t.label, r.label), r.label)
            })
        })
        .collect()
}

/// Exact span and type matches, documents aligned by position.
pub fn score_entities(pred: &[PredictedGraph], gold: &[PredictedGraph]) -> MicroMacro {
    debug_assert_eq!(pred.len(), gold.len());
    score_items(&entity_items(pred), &entity_items(gold))
}

/// Directed matches of head span and type, tail span and type, and
/// relation type.
pub fn score_relations(pred: &[PredictedGraph], gold: &[PredictedGraph]) -> MicroMacro {
    debug_assert_eq!(pred.len(), gold.len());
    score_items(&relation_items(pred), &relation_items(gold))
}

/// Per-type F1 for display, keyed by type name.
pub fn per_type_f1(
    pred: &[PredictedGraph],
    gold: &[PredictedGraph],
    schema: &TaskSchema,
) -> BTreeMap<String, f64> {
    let (p, g) = (entity_items(pred), entity_items(gold));
    schema
        .entity_types()
        .iter()
        .enumerate()
        .skip(1)
        .map(|(t, name)| {
            let only = |items: &[(EntityKey, usize)]| {
                items
                    .iter()
                    .filter(|(_, l)| *l == t)
                    .cloned()
                    .collect::<Vec<_>>()
            };
            (name.clone(), score_items(&only(&p), &only(&g)).micro.f1)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn formula_example() {
        let p = Prf::from_counts(2, 1, 1);
        assert!((p.precision - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.recall - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(Prf::from_counts(0, 0, 3).f1, 0.0);
    }

    #[test]
    fn wrong_relation_type_is_fp_and_fn() {
        let pred = [((0, 1), 1)];
        let gold = [((0, 1), 2)];
        let m = score_items(&pred, &gold);
        assert_eq!((m.micro.tp, m.micro.fp, m.micro.fn_), (0, 1, 1));
    }

    #[test]
    fn duplicates_count_as_multiset() {
        let pred = [(7, 1), (7, 1)];
        let gold = [(7, 1)];
        let m = score_items(&pred, &gold);
        assert_eq!((m.micro.tp, m.micro.fp, m.micro.fn_), (1, 1, 0));
    }

    #[test]
    fn macro_ignores_types_absent_from_gold() {
        let pred = [(1, 1), (2, 2)];
        let gold = [(1, 1)];
        let m = score_items(&pred, &gold);
        assert_eq!(m.macro_.f1, 1.0);
        assert!(m.micro.f1 < 1.0);
    }

    #[test]
    fn json_shape() {
        let j: serde_json::Value = serde_json::from_str(&Metrics::default().to_json()).unwrap();
        assert!(j["entity"]["micro"]["f1"].is_number());
        assert!(j["relation"]["macro"]["fn"].is_number());
    }
}
