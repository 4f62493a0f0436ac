use keci_autodiff::{
    finite_difference_check, GradCheckReport, ParameterStore, Tape, Var, DEFAULT_EPS,
};

use super::loss::compute_loss;
use crate::config::{ModelConfig, Variant};
use crate::corpus::toy::{generate_toy, ToySpec};
use crate::kb::KnowledgeBase;
use crate::model::{Model, PreparedDoc};
use crate::{KeciError, Result};

/// Largest relative error a passing gradient check may show.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

/// Finite-difference check of the full pipeline and joint loss at `f64`
/// on a two-sentence toy batch with a knowledge base.
pub fn pipeline_gradcheck(
    config: &ModelConfig,
    variant: Variant,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut spec = ToySpec::simple(2, 0, 0.5);
    spec.kb_dim = config.d_kb;
    spec.unambiguous_kb_coverage = 1.0;
    let data = generate_toy(&spec, seed)?;
    let kb = KnowledgeBase::from_file(data.kb)?;
    let config = ModelConfig {
        seed,
        min_token_count: 1,
        ..config.clone()
    };
    let model = Model::<f64>::new(config, variant, data.schema, &data.train, Some(&kb))?;
    let docs = data
        .train
        .iter()
        .map(|d| model.prepare(d, Some(&kb)))
        .collect::<Result<Vec<PreparedDoc>>>()?;
    let arch = model.architecture();
    let mode = model.config.relation_loss_mode;
    let weight = model.config.final_loss_weight;
    let mut store = model.store.clone();
    finite_difference_check(
        &mut store,
        DEFAULT_EPS,
        |tape: &Tape<f64>, store: &ParameterStore<f64>| {
            let mut total: Option<Var<'_, f64>> = None;
            for doc in &docs {
                let out = arch
                    .forward(tape, store, doc)?
                    .ok_or_else(|| KeciError::Contract("toy document without spans".into()))?;
                let l = compute_loss(&out, doc, mode)?.total(tape, weight)?;
                total = Some(match total {
                    Some(t) => t.add(l)?,
                    None => l,
                });
            }
            Ok::<_, KeciError>(total.expect("two documents").scale(0.5))
        },
    )
}
