//! Maximum-likelihood training of the flows and latent model by minibatch
//! stochastic gradient ascent, and initial-belief estimation.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Gradients, Graph, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::flows::FlowTransform;
use crate::latent_ssm::{diag_gaussian_log_pdf, LatentModel};
use crate::model::{FilterModel, ModelConfig, TrainedFilter};
use crate::nn::{clip_global_norm, Adam};
use crate::rng;
use crate::systems::Dataset;

/// Ridge added to the sample covariance of the latent initial states.
pub const SIGMA0_RIDGE: f64 = 1e-4;

pub const INIT_MU0: &str = "init.mu0";
pub const INIT_SIGMA0: &str = "init.sigma0";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub objective: f64,
    pub lr: f64,
}

fn default_epochs() -> usize {
    500
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    5e-4
}
fn default_decay() -> f64 {
    0.1
}
fn one() -> f64 {
    1.0
}
fn default_clip() -> f64 {
    10.0
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of minibatch updates.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "one")]
    pub alpha: f64,
    #[serde(default = "one")]
    pub beta: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub initial_distribution_loss: bool,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    /// Fit the fixed standardization layers of T and V to the training data
    /// before the first update.
    #[serde(default = "yes")]
    pub standardize: bool,
    /// Keep the coupling networks fixed and train only the latent model.
    #[serde(default)]
    pub freeze_flows: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            decay: default_decay(),
            alpha: 1.0,
            beta: 1.0,
            seed: 0,
            initial_distribution_loss: false,
            clip_norm: default_clip(),
            standardize: true,
            freeze_flows: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid(msg.to_string()));
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return bad("alpha and beta must be positive");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return bad("decay must lie in (0, 1]");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip norm must be positive");
        }
        Ok(())
    }
}

/// `eta_0 * d^(tau / E)`. With `E = 0` the rate stays at `eta_0`.
pub fn lr_schedule(tau: usize, eta0: f64, decay: f64, epochs: usize) -> f64 {
    if epochs == 0 {
        return eta0;
    }
    eta0 * decay.powf(tau as f64 / epochs as f64)
}

/// A minibatch of `(x_{k-1}, x_k, y_k)` triples as row-stacked tensors, with
/// optional initial states for the initial-distribution term.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x_prev: Tensor,
    pub x: Tensor,
    pub y: Tensor,
    pub x0: Option<Tensor>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean of `ln N(T(x0) | mu0, Sigma0) + ln|det dT/dx0|` over the rows of
/// `x0`. Sigma0 is diagonal with softplus entries from [`INIT_SIGMA0`].
pub fn initial_distribution_loss(g: &mut Graph<'_>, t: &FlowTransform, x0: Var) -> Result<Var> {
    let rows = g.value(x0).rows();
    let m = t.dim();
    let (chi, ld) = t.forward(g, x0)?;
    let mu = g.param(INIT_MU0)?;
    let raw = g.param(INIT_SIGMA0)?;
    let var = g.softplus(raw)?;
    let zeros = g.constant(Tensor::zeros(&[rows, m]))?;
    let mean = g.add_row(zeros, mu)?;
    let var = g.add_row(zeros, var)?;
    let lp = diag_gaussian_log_pdf(g, chi, mean, var)?;
    let total = g.add(lp, ld)?;
    g.mean(total)
}

/// Builds `L = alpha * mean f_s + beta * mean f_o` (or the FBF' analogue) on
/// the graph, plus the initial-distribution term when `batch.x0` is present.
pub fn objective_graph(
    g: &mut Graph<'_>,
    model: &FilterModel,
    batch: &Batch,
    alpha: f64,
    beta: f64,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty minibatch"));
    }
    let t = model.state_flow();
    let v = model.meas_flow();
    let x_prev = g.constant(batch.x_prev.clone())?;
    let x = g.constant(batch.x.clone())?;
    let y = g.constant(batch.y.clone())?;
    let (chi_prev, _) = t.forward(g, x_prev)?;
    let (chi, ld_x) = t.forward(g, x)?;
    let (gamma, ld_y) = v.forward(g, y)?;
    let (fs, fo) = match model.latent() {
        LatentModel::Fbf(l) => {
            let ts = l.transition_log_pdf(g, chi_prev, chi, gamma)?;
            let os = l.observation_log_pdf(g, chi_prev, gamma)?;
            (ts, os)
        }
        LatentModel::FbfPrime(l) => {
            let ts = l.transition_log_pdf(g, chi_prev, chi)?;
            let os = l.observation_log_pdf(g, chi, gamma)?;
            (ts, os)
        }
    };
    let fs = g.add(fs, ld_x)?;
    let fo = g.add(fo, ld_y)?;
    let fs = g.mean(fs)?;
    let fo = g.mean(fo)?;
    let fs = g.scale(fs, alpha)?;
    let fo = g.scale(fo, beta)?;
    let mut total = g.add(fs, fo)?;
    if let Some(x0) = &batch.x0 {
        let x0 = g.constant(x0.clone())?;
        let init = initial_distribution_loss(g, t, x0)?;
        total = g.add(total, init)?;
    }
    Ok(total)
}

/// Returns `L` and the gradients of `-L`, ready for a descent step.
pub fn minibatch_objective(
    model: &FilterModel,
    store: &ParameterStore,
    batch: &Batch,
    alpha: f64,
    beta: f64,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new(store);
    let obj = objective_graph(&mut g, model, batch, alpha, beta)?;
    let value = g.value(obj).item();
    let neg = g.scale(obj, -1.0)?;
    let grads = g.backward(neg, Tensor::scalar(1.0))?;
    Ok((value, grads))
}

/// Latent mean and covariance of `T(x0)`: unbiased sample covariance plus
/// `SIGMA0_RIDGE * I`. A single sample gives the bare ridge.
pub fn estimate_initial_belief(
    t: &FlowTransform,
    store: &ParameterStore,
    x0: &Tensor,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n0 = x0.rows();
    if n0 == 0 {
        return Err(Error::invalid("initial belief needs at least one sample"));
    }
    let (z, _) = t.forward_batch(store, x0)?;
    let m = z.cols();
    let mut mu = DVector::zeros(m);
    for r in 0..n0 {
        mu += DVector::from_column_slice(z.row(r));
    }
    mu /= n0 as f64;
    let mut cov = DMatrix::zeros(m, m);
    if n0 > 1 {
        for r in 0..n0 {
            let d = DVector::from_column_slice(z.row(r)) - &mu;
            cov += &d * d.transpose();
        }
        cov /= (n0 - 1) as f64;
    }
    for i in 0..m {
        cov[(i, i)] += SIGMA0_RIDGE;
    }
    Ok((mu, crate::filtering::symmetrize(&cov)))
}

fn column_moments(rows: impl Iterator<Item = Vec<f64>>, dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut n = 0usize;
    let mut sum = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    for r in rows {
        n += 1;
        for j in 0..dim {
            sum[j] += r[j];
            sq[j] += r[j] * r[j];
        }
    }
    let nf = n.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / nf).collect();
    let sd = sq
        .iter()
        .zip(&mean)
        .map(|(s, m)| (s / nf - m * m).max(0.0).sqrt())
        .collect();
    (mean, sd)
}

/// Sets the standardization layers of T and V from the per-coordinate mean
/// and standard deviation of all states and measurements in the dataset.
pub fn fit_standardization(model: &FilterModel, store: &mut ParameterStore, data: &Dataset) -> Result<()> {
    let m = model.state_dim();
    let n = model.meas_dim();
    let states = data
        .trajectories
        .iter()
        .flat_map(|tr| (0..=tr.k()).map(move |k| tr.state(k).to_vec()));
    let (loc, scale) = column_moments(states, m);
    model.state_flow().set_standardization(store, &loc, &scale)?;
    let meas = data
        .trajectories
        .iter()
        .flat_map(|tr| (1..=tr.k()).map(move |k| tr.measurement(k).to_vec()));
    let (loc, scale) = column_moments(meas, n);
    model.meas_flow().set_standardization(store, &loc, &scale)
}

fn check_dataset(model: &FilterModel, data: &Dataset) -> Result<()> {
    if data.trajectories.is_empty() {
        return Err(Error::invalid("dataset has no trajectories"));
    }
    for tr in &data.trajectories {
        if tr.m() != model.state_dim() || tr.n() != model.meas_dim() {
            return Err(Error::shape(
                "train",
                format!(
                    "dataset dims (m = {}, n = {}) differ from model (m = {}, n = {})",
                    tr.m(),
                    tr.n(),
                    model.state_dim(),
                    model.meas_dim()
                ),
            ));
        }
        if tr.k() == 0 {
            return Err(Error::invalid("every trajectory needs at least one transition"));
        }
    }
    Ok(())
}

fn initial_states(data: &Dataset) -> Tensor {
    let rows: Vec<&[f64]> = data.trajectories.iter().map(|tr| tr.state(0)).collect();
    Tensor::from_rows(&rows).expect("non-empty dataset")
}

fn sample_batch(data: &Dataset, size: usize, with_x0: bool, rng: &mut rng::Rng) -> Batch {
    let m = data.trajectories[0].m();
    let n = data.trajectories[0].n();
    let total: usize = data.trajectories.iter().map(|t| t.k()).sum();
    let mut xp = Vec::with_capacity(size * m);
    let mut x = Vec::with_capacity(size * m);
    let mut y = Vec::with_capacity(size * n);
    for _ in 0..size {
        // uniform over all (trajectory, k) pairs
        let mut idx = rng.random_range(0..total);
        let mut tr = &data.trajectories[0];
        for t in &data.trajectories {
            if idx < t.k() {
                tr = t;
                break;
            }
            idx -= t.k();
        }
        let k = idx + 1;
        xp.extend_from_slice(tr.state(k - 1));
        x.extend_from_slice(tr.state(k));
        y.extend_from_slice(tr.measurement(k));
    }
    let x0 = with_x0.then(|| {
        let mut v = Vec::with_capacity(size * m);
        for _ in 0..size {
            let i = rng.random_range(0..data.trajectories.len());
            v.extend_from_slice(data.trajectories[i].state(0));
        }
        Tensor::matrix(size, m, v).expect("positive extents")
    });
    Batch {
        x_prev: Tensor::matrix(size, m, xp).expect("positive extents"),
        x: Tensor::matrix(size, m, x).expect("positive extents"),
        y: Tensor::matrix(size, n, y).expect("positive extents"),
        x0,
    }
}

/// Runs `cfg.epochs` minibatch updates starting from `params`, then
/// estimates the initial latent belief.
pub fn train(
    model: &FilterModel,
    mut params: ParameterStore,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainedFilter> {
    cfg.validate()?;
    check_dataset(model, data)?;
    if cfg.standardize {
        fit_standardization(model, &mut params, data)?;
    }
    if cfg.freeze_flows {
        params.set_trainable(&format!("{}.", model.state_flow().prefix()), false);
        params.set_trainable(&format!("{}.", model.meas_flow().prefix()), false);
    }
    let x0_all = initial_states(data);
    if cfg.initial_distribution_loss && params.get(INIT_MU0).is_none() {
        let m = model.state_dim();
        params.insert(INIT_MU0, Tensor::zeros(&[m]), true)?;
        params.insert(INIT_SIGMA0, Tensor::full(&[m], (1f64.exp() - 1.0).ln()), true)?;
    }

    let mut opt = Adam::new(&params);
    let mut rng = rng::stream(cfg.seed, "train.batch", 0);
    let mut history = Vec::with_capacity(cfg.epochs);
    for tau in 0..cfg.epochs {
        let lr = lr_schedule(tau, cfg.lr, cfg.decay, cfg.epochs);
        let batch = sample_batch(data, cfg.batch_size, cfg.initial_distribution_loss, &mut rng);
        let diverged = |reason: String, history: Vec<LossRecord>| Error::Divergence {
            iteration: tau,
            reason,
            history,
        };
        let (value, mut grads) = match minibatch_objective(model, &params, &batch, cfg.alpha, cfg.beta) {
            Ok(r) => r,
            Err(e) if e.is_numeric() => return Err(diverged(e.to_string(), history)),
            Err(e) => return Err(e),
        };
        if !value.is_finite() || !grads.is_finite() {
            return Err(diverged(format!("objective {value}"), history));
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        opt.step(&mut params, &grads, lr);
        history.push(LossRecord {
            iteration: tau,
            objective: value,
            lr,
        });
    }

    let (mu0, sigma0) = if cfg.initial_distribution_loss {
        let mu = DVector::from_column_slice(params.value(INIT_MU0)?.data());
        let var = DVector::from_iterator(
            model.state_dim(),
            params.value(INIT_SIGMA0)?.data().iter().map(|&v| softplus(v)),
        );
        (mu, DMatrix::from_diagonal(&var))
    } else {
        estimate_initial_belief(model.state_flow(), &params, &x0_all)?
    };
    Ok(TrainedFilter {
        model: model.clone(),
        params,
        mu0,
        sigma0,
        train_config: cfg.clone(),
        history,
    })
}

/// Builds the model, initializes parameters from `cfg.seed` and trains.
pub fn fit(model_config: &ModelConfig, data: &Dataset, cfg: &TrainConfig) -> Result<TrainedFilter> {
    let model = FilterModel::new(model_config.clone())?;
    let params = model.init_params(cfg.seed)?;
    train(&model, params, data, cfg)
}

/// Moving average of the objective with the given window, one value per
/// iteration (shorter windows at the start).
pub fn smoothed_objective(history: &[LossRecord], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(history.len());
    let mut acc = 0.0;
    for (i, r) in history.iter().enumerate() {
        acc += r.objective;
        if i >= w {
            acc -= history[i - w].objective;
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}
