//! Flow-based Bayesian filtering: normalizing flows map a nonlinear
//! state-space model into a latent space with linear-Gaussian structure,
//! where filtering is closed-form.

pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod filtering;
pub mod flows;
pub mod latent_ssm;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod rng;
pub mod systems;
pub mod training;

pub use autodiff::{Gradients, Graph, ParameterStore, Tensor, Var};
pub use error::{Error, Result};
pub use filtering::{FilterOptions, FilterRun, GaussianBelief};
pub use flows::{FlowConfig, FlowInit, FlowTransform};
pub use model::{FilterModel, ModelConfig, TrainedFilter, Variant};
pub use systems::{Dataset, SystemConfig, Trajectory};
pub use training::{LossRecord, TrainConfig};
