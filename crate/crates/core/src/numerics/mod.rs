//! Dense `f64` arrays, a reverse-mode autodiff graph, parameter storage and
//! the optimizer used to train the toy models.

mod array;
mod graph;
mod optim;
mod params;

pub use array::{argmax, log_softmax_slice, log_sum_exp, stable_log_softmax, DenseArray};
pub use graph::{gradients, Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, GradAccumulator, NoamSchedule};
pub use params::{Init, ParamId, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
