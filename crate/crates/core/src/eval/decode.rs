use serde::Serialize;

use crate::config::RelationLossMode;
use crate::corpus::{Document, GoldEntity, GoldRelation, Span};
use crate::model::SpanGraphScores;
use crate::spangraph::pair_index;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct PredictedEntity {
    pub span: Span,
    pub label: usize,
}

/// Directed relation between two entries of the entity list.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct PredictedRelation {
    pub head: usize,
    pub tail: usize,
    pub label: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PredictedGraph {
    pub entities: Vec<PredictedEntity>,
    pub relations: Vec<PredictedRelation>,
}

impl PredictedGraph {
    /// The gold graph of an annotated document.
    pub fn from_gold(doc: &Document) -> Self {
        Self {
            entities: doc
                .entities
                .iter()
                .map(|e| PredictedEntity {
                    span: e.span,
                    label: e.label,
                })
                .collect(),
            relations: doc
                .relations
                .iter()
                .map(|r| PredictedRelation {
                    head: r.head,
                    tail: r.tail,
                    label: r.label,
                })
                .collect(),
        }
    }

    /// A copy of `doc` annotated with this graph instead of its gold.
    pub fn annotate(&self, doc: &Document) -> Document {
        Document {
            entities: self
                .entities
                .iter()
                .map(|e| GoldEntity {
                    span: e.span,
                    label: e.label,
                })
                .collect(),
            relations: self
                .relations
                .iter()
                .map(|r| GoldRelation {
                    head: r.head,
                    tail: r.tail,
                    label: r.label,
                })
                .collect(),
            ..doc.clone()
        }
    }
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Turns kept-span distributions into a span graph. `spans` are all
/// enumerated spans of the document; `scores.kept` indexes into them.
pub fn decode_graph(
    scores: &SpanGraphScores,
    spans: &[Span],
    mode: RelationLossMode,
) -> PredictedGraph {
    let k = scores.kept.len();
    let mut graph = PredictedGraph::default();
    // kept position of each predicted entity
    let mut position = Vec::new();
    for (i, dist) in scores.entities.iter().enumerate() {
        let label = argmax(dist);
        if label != 0 {
            graph.entities.push(PredictedEntity {
                span: spans[scores.kept[i]],
                label,
            });
            position.push(i);
        }
    }
    if scores.relations.is_empty() {
        return graph;
    }
    for (a, &i) in position.iter().enumerate() {
        for (b, &j) in position.iter().enumerate() {
            if i == j {
                continue;
            }
            let dist = &scores.relations[pair_index(i, j, k)];
            match mode {
                RelationLossMode::SoftmaxCe => {
                    let label = argmax(dist);
                    if label != 0 {
                        graph.relations.push(PredictedRelation {
                            head: a,
                            tail: b,
                            label,
                        });
                    }
                }
                RelationLossMode::SigmoidBce => {
                    for (label, p) in dist.iter().enumerate().skip(1) {
                        if *p > 0.5 {
                            graph.relations.push(PredictedRelation {
                                head: a,
                                tail: b,
                                label,
                            });
                        }
                    }
                }
            }
        }
    }
    graph
}
