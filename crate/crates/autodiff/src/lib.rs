//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! Operations are recorded eagerly on a [`Tape`] as they execute. Calling
//! [`Tape::backward`] on a scalar walks the recorded nodes once in reverse
//! order and returns the gradients of every leaf that asked for one;
//! [`ParameterStore::accumulate`] folds parameter gradients into the store.
//!
//! ```
//! use keci_autodiff::{ParameterStore, Tape, Tensor};
//!
//! let mut store = ParameterStore::<f64>::new();
//! store.insert("w", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap().with_requires_grad(true)).unwrap();
//!
//! let tape = Tape::new();
//! let w = tape.param(&store, "w").unwrap();
//! let x = tape.constant(Tensor::new(vec![2, 1], vec![3.0, 4.0]).unwrap());
//! let y = w.matmul(x).unwrap().sum();
//! assert_eq!(y.item(), 11.0);
//!
//! let grads = tape.backward(y).unwrap();
//! store.accumulate(&grads);
//! assert_eq!(store.get("w").unwrap().grad().unwrap(), &[3.0, 4.0]);
//! ```

mod error;
pub mod gradcheck;
mod params;
mod real;
mod tape;
mod tensor;

pub use error::AutodiffError;
pub use gradcheck::{finite_difference_check, GradCheckReport, DEFAULT_EPS};
pub use params::ParameterStore;
pub use real::Real;
pub use tape::{Gradients, Tape, Var, PROB_CLAMP};
pub use tensor::Tensor;

pub type Result<T, E = AutodiffError> = std::result::Result<T, E>;
