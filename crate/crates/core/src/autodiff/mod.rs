//! Reverse-mode differentiation, parameter storage, optimizers and
//! initialization.

mod check;
mod checkpoint;
mod init;
mod optim;
mod params;
mod tape;
mod train;

pub use check::{grad_check, GradCheckConfig, GradCheckReport, Objective, TapeObjective};
pub use checkpoint::{load_checkpoint, read_manifest, save_checkpoint, Manifest, MANIFEST};
pub use init::xavier_init;
pub use optim::{adagrad_step, sgd_momentum_step, Optimizer, ADAGRAD_EPSILON};
pub use params::ParamStore;
pub use tape::{Gradients, Tape, Var};
pub use train::minibatch_step;
