//! The full filter bundle: state flow T, measurement flow V and a latent
//! model, plus the initial latent belief once trained.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::ParameterStore;
use crate::error::{Error, Result};
use crate::flows::{FlowConfig, FlowInit, FlowTransform};
use crate::latent_ssm::{ConditionerConfig, FbfLatentModel, FbfPrimeLatentModel, LatentModel};
use crate::rng;
use crate::training::{LossRecord, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Measurement-conditioned latent transition.
    #[default]
    Fbf,
    /// Classical linear latent SSM.
    FbfPrime,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Variant::Fbf => f.write_str("fbf"),
            Variant::FbfPrime => f.write_str("fbf_prime"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub meas_dim: usize,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub state_flow: FlowConfig,
    #[serde(default)]
    pub meas_flow: FlowConfig,
    #[serde(default)]
    pub conditioner: ConditionerConfig,
}

impl ModelConfig {
    pub fn new(state_dim: usize, meas_dim: usize) -> Self {
        ModelConfig {
            state_dim,
            meas_dim,
            variant: Variant::Fbf,
            state_flow: FlowConfig::default(),
            meas_flow: FlowConfig::default(),
            conditioner: ConditionerConfig::default(),
        }
    }
}

/// Network structure derived from a [`ModelConfig`]. Parameter values are
/// held separately in a [`ParameterStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct FilterModel {
    config: ModelConfig,
    state_flow: FlowTransform,
    meas_flow: FlowTransform,
    latent: LatentModel,
}

impl FilterModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let (m, n) = (config.state_dim, config.meas_dim);
        if m < 2 || n < 2 {
            return Err(Error::invalid(format!(
                "state and measurement dimensions must be >= 2 (got m = {m}, n = {n})"
            )));
        }
        let state_flow = FlowTransform::new("T", m, &config.state_flow)?;
        let meas_flow = FlowTransform::new("V", n, &config.meas_flow)?;
        let latent = match config.variant {
            Variant::Fbf => LatentModel::Fbf(FbfLatentModel::new(m, n, &config.conditioner)?),
            Variant::FbfPrime => LatentModel::FbfPrime(FbfPrimeLatentModel::new(m, n)),
        };
        Ok(FilterModel {
            config,
            state_flow,
            meas_flow,
            latent,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn state_flow(&self) -> &FlowTransform {
        &self.state_flow
    }

    pub fn meas_flow(&self) -> &FlowTransform {
        &self.meas_flow
    }

    pub fn latent(&self) -> &LatentModel {
        &self.latent
    }

    pub fn state_dim(&self) -> usize {
        self.config.state_dim
    }

    pub fn meas_dim(&self) -> usize {
        self.config.meas_dim
    }

    pub fn init_params(&self, seed: u64) -> Result<ParameterStore> {
        self.init_params_with(seed, FlowInit::Identity)
    }

    pub fn init_params_with(&self, seed: u64, flow_init: FlowInit) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        let mut r = rng::stream(seed, "init", 0);
        self.state_flow.register(&mut store, &mut r, flow_init)?;
        self.meas_flow.register(&mut store, &mut r, flow_init)?;
        match &self.latent {
            LatentModel::Fbf(l) => l.register(&mut store, &mut r)?,
            LatentModel::FbfPrime(l) => l.register(&mut store)?,
        }
        Ok(store)
    }
}

/// A filter ready for online use. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedFilter {
    pub model: FilterModel,
    pub params: ParameterStore,
    pub mu0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    pub train_config: TrainConfig,
    pub history: Vec<LossRecord>,
}

impl TrainedFilter {
    pub fn variant(&self) -> Variant {
        self.model.config().variant
    }
}
