//! Decoding, scoring, attention analysis and the ablation harness.

mod ablation;
mod attention;
mod decode;
mod metrics;

use keci_autodiff::{Real, Tape};
use rayon::prelude::*;
use serde::Serialize;

pub use ablation::{cross_validate, run_ablation, AblationRow};
pub use attention::{attention_report, AttentionReport, TypeAttention};
pub use decode::{argmax, decode_graph, PredictedEntity, PredictedGraph, PredictedRelation};
pub use metrics::{
    per_type_f1, score_entities, score_items, score_relations, Metrics, MicroMacro, Prf,
};

use crate::corpus::{Document, Span};
use crate::kb::{KgNode, KnowledgeBase};
use crate::model::Model;
use crate::Result;

/// Attention of one kept span over its sentinel and KB candidates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpanWeights {
    pub span: Span,
    pub sentinel: f64,
    /// `(KB entity index, weight)`.
    pub candidates: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Prediction {
    pub graph: PredictedGraph,
    pub attention: Vec<SpanWeights>,
}

/// Runs the model over each document in parallel. Documents without
/// tokens get an empty graph.
pub fn predict<F: Real>(
    model: &Model<F>,
    docs: &[Document],
    kb: Option<&KnowledgeBase>,
) -> Result<Vec<Prediction>> {
    model.check_kb(kb)?;
    let arch = model.architecture();
    docs.par_iter()
        .map(|doc| {
            let prepared = model.prepare(doc, kb)?;
            let tape = Tape::new();
            let Some(out) = arch.forward(&tape, &model.store, &prepared)? else {
                return Ok(Prediction::default());
            };
            let scores = out.scores(model.config.relation_loss_mode)?;
            let graph = decode_graph(&scores, &prepared.spans, model.config.relation_loss_mode);
            let attention = match &prepared.kg {
                Some(kg) => scores
                    .kept
                    .iter()
                    .zip(&scores.attention)
                    .map(|(i, a)| SpanWeights {
                        span: prepared.spans[*i],
                        sentinel: a.sentinel,
                        candidates: a
                            .candidates
                            .iter()
                            .map(|(node, w)| match kg.graph.nodes[*node] {
                                KgNode::Entity(e) => (e, *w),
                                KgNode::Type(_) => unreachable!("candidates are entity nodes"),
                            })
                            .collect(),
                    })
                    .collect(),
                None => Vec::new(),
            };
            Ok(Prediction { graph, attention })
        })
        .collect()
}

pub fn evaluate<F: Real>(
    model: &Model<F>,
    docs: &[Document],
    kb: Option<&KnowledgeBase>,
) -> Result<Metrics> {
    let pred: Vec<PredictedGraph> = predict(model, docs, kb)?
        .into_iter()
        .map(|p| p.graph)
        .collect();
    let gold: Vec<PredictedGraph> = docs.iter().map(PredictedGraph::from_gold).collect();
    Ok(Metrics::compute(&pred, &gold))
}
