//! Parameter declarations and the small layers every module is built from.

use keci_autodiff::{ParameterStore, Real, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform in `±sqrt(6 / (rows + cols))`.
    Glorot,
    Zeros,
    /// Uniform in `±scale`.
    Uniform(f64),
}

/// Declaration of one named parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
            trainable: true,
        }
    }
}

/// FNV-1a over the seed and the parameter name, so every parameter draws
/// from its own stream regardless of which other parameters exist.
fn param_seed(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(name.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn init_tensor<F: Real>(spec: &ParamSpec, seed: u64) -> Result<Tensor<F>> {
    let n: usize = spec.shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(param_seed(seed, &spec.name));
    let values = match spec.init {
        Init::Zeros => vec![F::zero(); n],
        Init::Glorot | Init::Uniform(_) => {
            let scale = match spec.init {
                Init::Uniform(s) => s,
                _ => {
                    let fan_in = spec.shape[0];
                    let fan_out = spec.shape.get(1).copied().unwrap_or(1);
                    (6.0 / (fan_in + fan_out) as f64).sqrt()
                }
            };
            (0..n)
                .map(|_| F::lit(rng.gen_range(-scale..scale)))
                .collect()
        }
    };
    Ok(Tensor::new(spec.shape.clone(), values)?.with_requires_grad(spec.trainable))
}

pub fn init_store<F: Real>(specs: &[ParamSpec], seed: u64) -> Result<ParameterStore<F>> {
    let mut store = ParameterStore::new();
    for s in specs {
        store.insert(s.name.clone(), init_tensor(s, seed)?)?;
    }
    Ok(store)
}

/// `x · W + b` with `W: [input × output]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: String,
    pub bias: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(prefix: &str, input: usize, output: usize) -> Self {
        Self {
            weight: format!("{prefix}.weight"),
            bias: format!("{prefix}.bias"),
            input,
            output,
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec::new(&self.weight, vec![self.input, self.output], Init::Glorot),
            ParamSpec::new(&self.bias, vec![self.output], Init::Zeros),
        ]
    }

    pub fn forward<'t, F: Real>(
        &self,
        tape: &'t Tape<F>,
        store: &ParameterStore<F>,
        x: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let w = tape.param(store, &self.weight)?;
        let b = tape.param(store, &self.bias)?;
        Ok(x.matmul(w)?.add_row(b)?)
    }
}

/// Linear, ReLU, Linear.
#[derive(Debug, Clone, PartialEq)]
pub struct Ffnn {
    pub hidden: Linear,
    pub output: Linear,
}

impl Ffnn {
    pub fn new(prefix: &str, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            hidden: Linear::new(&format!("{prefix}.hidden"), input, hidden),
            output: Linear::new(&format!("{prefix}.output"), hidden, output),
        }
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        let mut s = self.hidden.specs();
        s.extend(self.output.specs());
        s
    }

    pub fn forward<'t, F: Real>(
        &self,
        tape: &'t Tape<F>,
        store: &ParameterStore<F>,
        x: Var<'t, F>,
    ) -> Result<Var<'t, F>> {
        let h = self.hidden.forward(tape, store, x)?.relu();
        self.output.forward(tape, store, h)
    }
}

/// A `[rows × cols]` constant of zeros.
pub fn zeros<F: Real>(tape: &Tape<F>, rows: usize, cols: usize) -> Result<Var<'_, F>> {
    Ok(tape.constant(Tensor::zeros(vec![rows, cols])?))
}

/// A `[rows × cols]` constant from row-major values.
pub fn matrix<F: Real>(
    tape: &Tape<F>,
    rows: usize,
    cols: usize,
    values: Vec<F>,
) -> Result<Var<'_, F>> {
    Ok(tape.constant(Tensor::new(vec![rows, cols], values)?))
}

/// Large negative additive mask that zeroes a softmax entry.
pub fn mask_value<F: Real>() -> F {
    F::lit(-1e30)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_per_name() {
        let a = ParamSpec::new("a", vec![3, 4], Init::Glorot);
        let b = ParamSpec::new("b", vec![3, 4], Init::Glorot);
        let ta: Tensor<f32> = init_tensor(&a, 1).unwrap();
        assert_eq!(ta, init_tensor(&a, 1).unwrap());
        assert_ne!(ta.values(), init_tensor::<f32>(&b, 1).unwrap().values());
        assert_ne!(ta.values(), init_tensor::<f32>(&a, 2).unwrap().values());
        let bound = (6.0f32 / 7.0).sqrt();
        assert!(ta.values().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn linear_applies_bias_per_row() {
        let lin = Linear::new("l", 2, 1);
        let mut store = init_store::<f64>(&lin.specs(), 0).unwrap();
        store
            .get_mut("l.weight")
            .unwrap()
            .values_mut()
            .copy_from_slice(&[1.0, 2.0]);
        store.get_mut("l.bias").unwrap().values_mut()[0] = 0.5;
        let tape = Tape::new();
        let x = matrix(&tape, 2, 2, vec![1.0, 1.0, 0.0, 2.0]).unwrap();
        assert_eq!(
            lin.forward(&tape, &store, x).unwrap().to_vec(),
            vec![3.5, 4.5]
        );
    }
}
