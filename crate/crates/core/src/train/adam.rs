use std::collections::BTreeMap;

use keci_autodiff::{ParameterStore, Real};

/// Parameters in the lower learning-rate group: every embedding table.
pub fn is_lower_group(name: &str) -> bool {
    name.ends_with("_embedding")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamSettings {
    pub lr_lower: f64,
    pub lr_upper: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamSettings {
    pub fn new(lr_lower: f64, lr_upper: f64) -> Self {
        Self {
            lr_lower,
            lr_upper,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with one learning rate for embedding tables and another for
/// everything else. Moments are kept in `f64`.
#[derive(Debug, Clone)]
pub struct Adam {
    pub settings: AdamSettings,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    /// Trainable parameters that had no gradient at some step.
    pub skipped: usize,
}

impl Adam {
    pub fn new(settings: AdamSettings) -> Self {
        Self {
            settings,
            step: 0,
            moments: BTreeMap::new(),
            skipped: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients stored on each parameter.
    /// Returns the number of trainable parameters skipped for lack of a
    /// gradient.
    pub fn step<F: Real>(&mut self, store: &mut ParameterStore<F>) -> usize {
        self.step += 1;
        let AdamSettings {
            beta1,
            beta2,
            eps,
            lr_lower,
            lr_upper,
        } = self.settings;
        let t = self.step as i32;
        let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
        let mut skipped = 0;
        for (name, tensor) in store.iter_mut() {
            if !tensor.requires_grad() {
                continue;
            }
            let Some(grad) = tensor.grad().map(<[F]>::to_vec) else {
                skipped += 1;
                continue;
            };
            let lr = if is_lower_group(name) {
                lr_lower
            } else {
                lr_upper
            };
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for (i, (w, g)) in tensor.values_mut().iter_mut().zip(grad).enumerate() {
                let g = g.to_f64_lossy();
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                *w = F::lit(w.to_f64_lossy() - update);
            }
        }
        if skipped > 0 {
            log::debug!(
                "adam step {}: {skipped} parameters without gradient",
                self.step
            );
        }
        self.skipped += skipped;
        skipped
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(store: &mut ParameterStore<F>, max_norm: f64) -> f64 {
    let norm = store
        .iter()
        .filter_map(|(_, t)| t.grad())
        .flatten()
        .map(|g| g.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = F::lit(max_norm / norm);
        for (_, t) in store.iter_mut() {
            if let Some(g) = t.grad_mut() {
                g.iter_mut().for_each(|x| *x = *x * scale);
            }
        }
    }
    norm
}
