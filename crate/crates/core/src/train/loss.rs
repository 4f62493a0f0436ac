use keci_autodiff::{Real, Tape, Var};
use serde::Serialize;

use crate::config::RelationLossMode;
use crate::model::{ForwardOutput, PreparedDoc};
use crate::spangraph::ordered_pairs;
use crate::Result;

/// Loss components of one document as recorded on the tape. Absent
/// components count as zero.
pub struct LossTerms<'t, F: Real> {
    /// Initial entity loss over all enumerated spans.
    pub initial_entity: Var<'t, F>,
    pub initial_relation: Option<Var<'t, F>>,
    pub final_entity: Option<Var<'t, F>>,
    pub final_relation: Option<Var<'t, F>>,
}

/// Plain values of the loss components and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub l1e: f64,
    pub l1r: f64,
    pub l2e: f64,
    pub l2r: f64,
    pub total: f64,
}

impl LossReport {
    /// `(l1e + l1r) + weight · (l2e + l2r)`.
    pub fn compose(l1e: f64, l1r: f64, l2e: f64, l2r: f64, weight: f64) -> Self {
        Self {
            l1e,
            l1r,
            l2e,
            l2r,
            total: (l1e + l1r) + weight * (l2e + l2r),
        }
    }
}

impl<'t, F: Real> LossTerms<'t, F> {
    /// Weighted total as a differentiable scalar.
    pub fn total(&self, tape: &'t Tape<F>, weight: f64) -> Result<Var<'t, F>> {
        let or_zero = |v: Option<Var<'t, F>>| v.unwrap_or_else(|| tape.scalar(F::zero()));
        let initial = self.initial_entity.add(or_zero(self.initial_relation))?;
        let last = or_zero(self.final_entity).add(or_zero(self.final_relation))?;
        Ok(initial.add(last.scale(F::lit(weight)))?)
    }

    pub fn report(&self, weight: f64) -> LossReport {
        let v = |x: Option<Var<'t, F>>| x.map_or(0.0, |x| x.item().to_f64_lossy());
        LossReport::compose(
            self.initial_entity.item().to_f64_lossy(),
            v(self.initial_relation),
            v(self.final_entity),
            v(self.final_relation),
            weight,
        )
    }
}

fn relation_loss<'t, F: Real>(
    logits: Option<Var<'t, F>>,
    probs: Option<Var<'t, F>>,
    doc: &PreparedDoc,
    kept: &[usize],
    num_relations: usize,
    mode: RelationLossMode,
) -> Result<Option<Var<'t, F>>> {
    let (Some(logits), Some(probs)) = (logits, probs) else {
        return Ok(None);
    };
    let pairs = ordered_pairs(kept.len());
    let loss = match mode {
        RelationLossMode::SoftmaxCe => {
            let targets: Vec<usize> = pairs
                .iter()
                .map(|(i, j)| {
                    doc.relations_between(kept, *i, *j)
                        .first()
                        .copied()
                        .unwrap_or(0)
                })
                .collect();
            probs.cross_entropy_rows(&targets)?
        }
        RelationLossMode::SigmoidBce => {
            let mut targets = vec![F::zero(); pairs.len() * num_relations];
            for (p, (i, j)) in pairs.iter().enumerate() {
                let gold = doc.relations_between(kept, *i, *j);
                let row = &mut targets[p * num_relations..(p + 1) * num_relations];
                if gold.is_empty() {
                    row[0] = F::one();
                }
                for g in gold {
                    row[*g] = F::one();
                }
            }
            logits.sigmoid().binary_cross_entropy(&targets)?
        }
    };
    Ok(Some(loss))
}

/// Loss components for one forward pass. Entity losses use the gold type
/// of each span (0 for none); relation losses cover kept ordered pairs.
pub fn compute_loss<'t, F: Real>(
    out: &ForwardOutput<'t, F>,
    doc: &PreparedDoc,
    mode: RelationLossMode,
) -> Result<LossTerms<'t, F>> {
    let initial_entity = out.entity_probs.cross_entropy_rows(&doc.entity_targets)?;
    let num_relations = out.relation_logits.map_or(0, |l| l.shape()[1]);
    let kept_targets: Vec<usize> = out.kept.iter().map(|i| doc.entity_targets[*i]).collect();
    let final_entity = out
        .final_entity
        .map(|e| e.cross_entropy_rows(&kept_targets))
        .transpose()?;
    Ok(LossTerms {
        initial_entity,
        initial_relation: relation_loss(
            out.relation_logits,
            out.relation_probs,
            doc,
            &out.kept,
            num_relations,
            mode,
        )?,
        final_entity,
        final_relation: relation_loss(
            out.final_relation_logits,
            out.final_relation_probs,
            doc,
            &out.kept,
            num_relations,
            mode,
        )?,
    })
}
