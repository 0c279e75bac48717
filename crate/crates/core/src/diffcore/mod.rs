//! Dense numeric core: kernels, a reverse-mode tape, parameters, the
//! optimizer and a finite-difference gradient checker.

pub mod dense;
pub mod gradcheck;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tape;

pub use dense::Dense;
pub use gradcheck::{grad_check, GradCheckEntry, GradCheckReport};
pub use ops::{affine, cosine_sim, cross_attention, kl_divergence, log_softmax, self_attention, softmax};
pub use optim::{clip_grad_norm, optimizer_step, LrSchedule, OptimizerState, StepStats};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{Tape, Var};
