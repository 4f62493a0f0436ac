use keci_autodiff::{Gradients, Tape};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::adam::{clip_grad_norm, Adam, AdamSettings};
use super::loss::{compute_loss, LossReport};
use crate::config::{ModelConfig, Variant};
use crate::corpus::{Document, TaskSchema};
use crate::eval::{evaluate, Metrics};
use crate::kb::KnowledgeBase;
use crate::model::{Architecture, Model, PreparedDoc};
use crate::{KeciError, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss over the epoch's documents, before each update.
    pub loss: LossReport,
    pub dev: Option<Metrics>,
    /// Parameter updates skipped for lack of a gradient this epoch.
    pub skipped: usize,
}

pub struct FitResult {
    /// Parameters from the best dev epoch, or the last epoch without dev
    /// data.
    pub model: Model<f32>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

fn mean_report(reports: &[LossReport], weight: f64) -> LossReport {
    let n = reports.len().max(1) as f64;
    let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    LossReport::compose(
        avg(|r| r.l1e),
        avg(|r| r.l1r),
        avg(|r| r.l2e),
        avg(|r| r.l2r),
        weight,
    )
}

/// Owns a model and its optimiser state and applies mini-batch updates.
pub struct Trainer {
    pub model: Model<f32>,
    pub adam: Adam,
    arch: Architecture,
}

impl Trainer {
    pub fn new(model: Model<f32>) -> Self {
        let arch = model.architecture();
        let adam = Adam::new(AdamSettings::new(
            model.config.lr_lower,
            model.config.lr_upper,
        ));
        Self { model, adam, arch }
    }

    fn gradients(
        &self,
        doc: &PreparedDoc,
        scale: f32,
    ) -> Result<Option<(Gradients<f32>, LossReport)>> {
        let tape = Tape::new();
        let Some(out) = self.arch.forward(&tape, &self.model.store, doc)? else {
            return Ok(None);
        };
        let terms = compute_loss(&out, doc, self.model.config.relation_loss_mode)?;
        let weight = self.model.config.final_loss_weight;
        let report = terms.report(weight);
        let total = terms.total(&tape, weight)?.scale(scale);
        Ok(Some((tape.backward(total)?, report)))
    }

    /// Loss of one document under the current parameters.
    pub fn loss(&self, doc: &PreparedDoc) -> Result<Option<LossReport>> {
        let tape = Tape::new();
        let Some(out) = self.arch.forward(&tape, &self.model.store, doc)? else {
            return Ok(None);
        };
        let terms = compute_loss(&out, doc, self.model.config.relation_loss_mode)?;
        Ok(Some(terms.report(self.model.config.final_loss_weight)))
    }

    /// One optimiser step on the mean loss of `batch`. Per-document
    /// gradients are computed in parallel and summed in batch order.
    pub fn step(&mut self, batch: &[&PreparedDoc]) -> Result<Vec<LossReport>> {
        let scale = 1.0 / batch.len().max(1) as f32;
        let results = batch
            .par_iter()
            .map(|doc| self.gradients(doc, scale))
            .collect::<Result<Vec<_>>>()?;
        self.model.store.zero_grad();
        let mut reports = Vec::with_capacity(batch.len());
        for (grads, report) in results.into_iter().flatten() {
            self.model.store.accumulate(&grads);
            reports.push(report);
        }
        if reports.is_empty() {
            return Ok(reports);
        }
        if let Some(max) = self.model.config.grad_clip {
            clip_grad_norm(&mut self.model.store, max);
        }
        self.adam.step(&mut self.model.store);
        Ok(reports)
    }

    /// One pass over `docs` in an order drawn from `rng`.
    pub fn epoch(
        &mut self,
        docs: &[PreparedDoc],
        rng: &mut ChaCha8Rng,
    ) -> Result<(LossReport, usize)> {
        let mut order: Vec<usize> = (0..docs.len()).collect();
        order.shuffle(rng);
        let skipped_before = self.adam.skipped;
        let mut reports = Vec::with_capacity(docs.len());
        for chunk in order.chunks(self.model.config.batch_size) {
            let batch: Vec<&PreparedDoc> = chunk.iter().map(|i| &docs[*i]).collect();
            reports.extend(self.step(&batch)?);
        }
        let mean = mean_report(&reports, self.model.config.final_loss_weight);
        if !mean.total.is_finite() {
            return Err(KeciError::Contract(format!(
                "training loss diverged: {}",
                mean.total
            )));
        }
        Ok((mean, self.adam.skipped - skipped_before))
    }
}

pub fn fit(
    config: &ModelConfig,
    variant: Variant,
    schema: &TaskSchema,
    train: &[Document],
    dev: &[Document],
    kb: Option<&KnowledgeBase>,
) -> Result<FitResult> {
    fit_with_callback(config, variant, schema, train, dev, kb, |_| {})
}

/// Trains for `config.epochs` epochs, calling `on_epoch` after each, and
/// keeps the parameters with the best dev selection score.
pub fn fit_with_callback(
    config: &ModelConfig,
    variant: Variant,
    schema: &TaskSchema,
    train: &[Document],
    dev: &[Document],
    kb: Option<&KnowledgeBase>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    if train.is_empty() {
        return Err(KeciError::Argument("training set is empty".into()));
    }
    let model = Model::new(config.clone(), variant, schema.clone(), train, kb)?;
    let kb = kb.filter(|_| variant.uses_kg());
    let prepared = train
        .iter()
        .map(|d| model.prepare(d, kb))
        .collect::<Result<Vec<_>>>()?;
    let mut trainer = Trainer::new(model);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, keci_autodiff::ParameterStore<f32>)> = None;
    for epoch in 1..=config.epochs {
        let (loss, skipped) = trainer.epoch(&prepared, &mut rng)?;
        let dev_metrics = if dev.is_empty() {
            None
        } else {
            Some(evaluate(&trainer.model, dev, kb)?)
        };
        if let Some(m) = &dev_metrics {
            let score = m.selection_score();
            if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
                best = Some((score, epoch, trainer.model.store.clone()));
            }
        }
        let record = EpochRecord {
            epoch,
            loss,
            dev: dev_metrics,
            skipped,
        };
        log::info!(
            "epoch {epoch}: loss {:.5} dev {}",
            record.loss.total,
            record
                .dev
                .map_or("-".to_string(), |m| format!("{:.4}", m.selection_score()))
        );
        on_epoch(&record);
        history.push(record);
    }
    let mut model = trainer.model;
    let best_epoch = match best {
        Some((_, epoch, store)) => {
            model.store = store;
            epoch
        }
        None => config.epochs,
    };
    model.store.zero_grad();
    Ok(FitResult {
        model,
        history,
        best_epoch,
    })
}
