//! Differentiable numeric core: dense matrices, a reverse-mode tape,
//! feed-forward networks, Gaussian reparameterization and RMSprop.

mod gaussian;
mod graph;
mod matrix;
mod mlp;
mod optim;
mod params;

pub use gaussian::{reparam_sample, DiagGaussian, GaussianVars};
pub use graph::{rk4_combine_scalar, sigmoid, Graph, Var};
pub use matrix::Matrix;
pub use mlp::{sigma_from_preactivation, sigma_head, Activation, BoundMlp, Mlp, SIGMA_FLOOR};
pub use optim::{rmsprop_step, OptState, RmsPropConfig};
pub use params::{Checkpoint, Grads, ParamEntry, ParamId, ParamStore};
