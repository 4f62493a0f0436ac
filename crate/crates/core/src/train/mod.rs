//! Joint loss, optimisation, the training loop and checkpoints.

mod adam;
mod checkpoint;
mod fit;
mod gradcheck;
mod loss;

pub use adam::{clip_grad_norm, is_lower_group, Adam, AdamSettings};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_VERSION,
};
pub use fit::{fit, fit_with_callback, EpochRecord, FitResult, Trainer};
pub use gradcheck::{pipeline_gradcheck, GRADCHECK_TOLERANCE};
pub use loss::{compute_loss, LossReport, LossTerms};
