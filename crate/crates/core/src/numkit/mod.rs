//! Dense `f64` autodiff, MLPs, Gaussian helpers, Adam, and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gaussian;
pub mod graph;
pub mod mlp;
pub mod rng;
pub mod tensor;

pub use adam::{cosine_lr, AdamState};
pub use checkpoint::Checkpoint;
pub use gaussian::{gaussian_logpdf, kl_diag_gaussians, reparam_sample};
pub use graph::{Gradients, Graph, Var};
pub use mlp::{Activation, Init, Mlp};
pub use rng::{Rng, SeedTree, Stage};
pub use tensor::Tensor2;

/// Log-variance clamp applied by every model before exponentiation.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
