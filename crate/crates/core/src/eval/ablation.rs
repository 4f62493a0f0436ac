use serde::Serialize;

use super::{predict, Metrics, PredictedGraph};
use crate::config::{ModelConfig, Variant};
use crate::corpus::{kfold_split, Document, TaskSchema};
use crate::kb::KnowledgeBase;
use crate::train::fit;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub metrics: Metrics,
    pub num_parameters: usize,
}

/// Trains every variant with the same config and seed on `train`
/// (selecting on `dev`) and scores it on `test`.
pub fn run_ablation(
    variants: &[Variant],
    config: &ModelConfig,
    schema: &TaskSchema,
    train: &[Document],
    dev: &[Document],
    test: &[Document],
    kb: Option<&KnowledgeBase>,
) -> Result<Vec<AblationRow>> {
    variants
        .iter()
        .map(|&variant| {
            let result = fit(config, variant, schema, train, dev, kb)?;
            let kb = kb.filter(|_| variant.uses_kg());
            Ok(AblationRow {
                variant,
                metrics: super::evaluate(&result.model, test, kb)?,
                num_parameters: result.model.store.num_scalars(),
            })
        })
        .collect()
}

/// k-fold cross-validation of each variant. Predictions from all held-out
/// folds are pooled before scoring. Folds train without dev selection.
pub fn cross_validate(
    variants: &[Variant],
    config: &ModelConfig,
    schema: &TaskSchema,
    docs: &[Document],
    kb: Option<&KnowledgeBase>,
    folds: usize,
) -> Result<Vec<AblationRow>> {
    let splits = kfold_split(docs.len(), folds, config.seed)?;
    variants
        .iter()
        .map(|&variant| {
            let mut pred = Vec::with_capacity(docs.len());
            let mut gold = Vec::with_capacity(docs.len());
            let mut num_parameters = 0;
            for fold in &splits {
                let train: Vec<Document> = fold.train.iter().map(|i| docs[*i].clone()).collect();
                let test: Vec<Document> = fold.test.iter().map(|i| docs[*i].clone()).collect();
                let result = fit(config, variant, schema, &train, &[], kb)?;
                num_parameters = result.model.store.num_scalars();
                let kb = kb.filter(|_| variant.uses_kg());
                pred.extend(
                    predict(&result.model, &test, kb)?
                        .into_iter()
                        .map(|p| p.graph),
                );
                gold.extend(test.iter().map(PredictedGraph::from_gold));
            }
            Ok(AblationRow {
                variant,
                metrics: Metrics::compute(&pred, &gold),
                num_parameters,
            })
        })
        .collect()
}
