//! Ground-truth simulators: the 2-d sinusoidal map, stochastic Lorenz-96 and
//! a stochastic advection-diffusion equation, plus trajectory datasets.

use std::f64::consts::PI;

use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::StateSpaceModel;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

fn gaussian_log_terms(y: &[f64], mean: impl Iterator<Item = f64>, var: f64) -> f64 {
    let c = (2.0 * PI * var).ln();
    y.iter()
        .zip(mean)
        .map(|(yi, mi)| -0.5 * (c + (yi - mi) * (yi - mi) / var))
        .sum()
}

fn add_noise(rng: &mut Rng, out: &mut [f64], sd: f64) {
    for v in out {
        let z: f64 = StandardNormal.sample(rng);
        *v += sd * z;
    }
}

/// `x_k = 0.9 sin(1.1 x_{k-1} + 0.1 pi) + 0.01 + e_k`,
/// `y_k = arctan(x_{k,2} / x_{k,1}) 1 + v_k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sinusoidal {
    #[serde(default = "Sinusoidal::default_q2")]
    pub q2: f64,
    pub r2: f64,
}

impl Sinusoidal {
    fn default_q2() -> f64 {
        0.1
    }

    pub fn new(q2: f64, r2: f64) -> Self {
        Sinusoidal { q2, r2 }
    }

    pub fn drift(x: f64) -> f64 {
        0.9 * (1.1 * x + 0.1 * PI).sin() + 0.01
    }

    /// Single-argument arctan of the ratio; `x1 = 0` maps to `±pi/2` (or 0
    /// when both are zero).
    pub fn angle(x: &[f64]) -> f64 {
        if x[0] == 0.0 {
            if x[1] == 0.0 {
                0.0
            } else {
                x[1].signum() * PI / 2.0
            }
        } else {
            (x[1] / x[0]).atan()
        }
    }
}

impl StateSpaceModel for Sinusoidal {
    fn state_dim(&self) -> usize {
        2
    }

    fn obs_dim(&self) -> usize {
        2
    }

    fn sample_initial(&self, rng: &mut Rng, out: &mut [f64]) {
        out.fill(1.0);
        add_noise(rng, out, 0.1f64.sqrt());
    }

    fn sample_transition(&self, x_prev: &[f64], rng: &mut Rng, out: &mut [f64]) {
        for (o, x) in out.iter_mut().zip(x_prev) {
            *o = Self::drift(*x);
        }
        add_noise(rng, out, self.q2.sqrt());
    }

    fn sample_observation(&self, x: &[f64], rng: &mut Rng, out: &mut [f64]) {
        out.fill(Self::angle(x));
        add_noise(rng, out, self.r2.sqrt());
    }

    fn log_likelihood(&self, y: &[f64], x: &[f64]) -> f64 {
        let a = Self::angle(x);
        gaussian_log_terms(y, std::iter::repeat(a), self.r2)
    }
}

/// Stochastic Lorenz-96 with cubic observations `y = x^3 + v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Lorenz96 {
    pub dim: usize,
    #[serde(default = "Lorenz96::default_forcing")]
    pub forcing: f64,
    #[serde(default = "Lorenz96::default_dt")]
    pub dt: f64,
    #[serde(default = "Lorenz96::default_obs_var")]
    pub obs_var: f64,
}

impl Lorenz96 {
    fn default_forcing() -> f64 {
        8.0
    }
    fn default_dt() -> f64 {
        0.01
    }
    fn default_obs_var() -> f64 {
        1.0
    }

    pub fn new(dim: usize) -> Self {
        Lorenz96 {
            dim,
            forcing: 8.0,
            dt: 0.01,
            obs_var: 1.0,
        }
    }

    /// `dx_j/dt = x_{j-1}(x_{j+1} - x_{j-2}) - x_j + F`, cyclic.
    pub fn drift(x: &[f64], forcing: f64, out: &mut [f64]) {
        let m = x.len();
        for j in 0..m {
            let xm1 = x[(j + m - 1) % m];
            let xm2 = x[(j + m - 2) % m];
            let xp1 = x[(j + 1) % m];
            out[j] = xm1 * (xp1 - xm2) - x[j] + forcing;
        }
    }

    /// One classical RK4 step of the drift.
    pub fn rk4_step(x: &[f64], forcing: f64, dt: f64, out: &mut [f64]) {
        let m = x.len();
        let mut k1 = vec![0.0; m];
        let mut k2 = vec![0.0; m];
        let mut k3 = vec![0.0; m];
        let mut k4 = vec![0.0; m];
        let mut tmp = vec![0.0; m];
        Self::drift(x, forcing, &mut k1);
        for j in 0..m {
            tmp[j] = x[j] + 0.5 * dt * k1[j];
        }
        Self::drift(&tmp, forcing, &mut k2);
        for j in 0..m {
            tmp[j] = x[j] + 0.5 * dt * k2[j];
        }
        Self::drift(&tmp, forcing, &mut k3);
        for j in 0..m {
            tmp[j] = x[j] + dt * k3[j];
        }
        Self::drift(&tmp, forcing, &mut k4);
        for j in 0..m {
            out[j] = x[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
    }

    /// `x_{0,j} = sin(2 pi j / m)` for `j = 1..m`.
    pub fn initial_state(dim: usize) -> Vec<f64> {
        (1..=dim).map(|j| (2.0 * PI * j as f64 / dim as f64).sin()).collect()
    }
}

/// Deterministic Lorenz-96 integration by `steps` RK4 steps of size `dt`.
pub fn lorenz96_integrate(x0: &[f64], forcing: f64, dt: f64, steps: usize) -> Vec<f64> {
    let mut x = x0.to_vec();
    let mut next = vec![0.0; x.len()];
    for _ in 0..steps {
        Lorenz96::rk4_step(&x, forcing, dt, &mut next);
        std::mem::swap(&mut x, &mut next);
    }
    x
}

impl StateSpaceModel for Lorenz96 {
    fn state_dim(&self) -> usize {
        self.dim
    }

    fn obs_dim(&self) -> usize {
        self.dim
    }

    fn sample_initial(&self, _: &mut Rng, out: &mut [f64]) {
        out.copy_from_slice(&Self::initial_state(self.dim));
    }

    fn sample_transition(&self, x_prev: &[f64], rng: &mut Rng, out: &mut [f64]) {
        Self::rk4_step(x_prev, self.forcing, self.dt, out);
        add_noise(rng, out, self.dt.sqrt());
    }

    fn sample_observation(&self, x: &[f64], rng: &mut Rng, out: &mut [f64]) {
        for (o, v) in out.iter_mut().zip(x) {
            *o = v * v * v;
        }
        add_noise(rng, out, self.obs_var.sqrt());
    }

    fn log_likelihood(&self, y: &[f64], x: &[f64]) -> f64 {
        gaussian_log_terms(y, x.iter().map(|v| v * v * v), self.obs_var)
    }
}

/// Thomas-algorithm factorization of a tridiagonal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TridiagonalLu {
    lower: Vec<f64>,
    c_prime: Vec<f64>,
    denom: Vec<f64>,
}

impl TridiagonalLu {
    /// `lower[i]` multiplies `u_{i-1}` in row `i` (`lower[0]` unused),
    /// `upper[i]` multiplies `u_{i+1}` (`upper[n-1]` unused).
    pub fn new(lower: &[f64], diag: &[f64], upper: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut c_prime = vec![0.0; n];
        let mut denom = vec![0.0; n];
        for i in 0..n {
            let d = diag[i] - if i > 0 { lower[i] * c_prime[i - 1] } else { 0.0 };
            if d.abs() < 1e-300 {
                return Err(Error::Singular(format!("tridiagonal pivot {i} vanished")));
            }
            denom[i] = d;
            c_prime[i] = if i + 1 < n { upper[i] / d } else { 0.0 };
        }
        Ok(TridiagonalLu {
            lower: lower.to_vec(),
            c_prime,
            denom,
        })
    }

    pub fn solve(&self, rhs: &[f64], out: &mut [f64]) {
        let n = rhs.len();
        for i in 0..n {
            let prev = if i > 0 { self.lower[i] * out[i - 1] } else { 0.0 };
            out[i] = (rhs[i] - prev) / self.denom[i];
        }
        for i in (0..n.saturating_sub(1)).rev() {
            out[i] -= self.c_prime[i] * out[i + 1];
        }
    }
}

/// `du + (kappa u_s - D u_ss + g(s)) dt = sigma dW` on `[-1, 1]` with zero
/// Dirichlet boundaries, `g(s) = 5(s^2 - 1)`, `u(0, s) = -sin(pi s)`, and
/// observations `exp(-u - 1) + v` at equally spaced sensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdvectionDiffusionConfig {
    #[serde(default = "AdvectionDiffusionConfig::default_kappa")]
    pub kappa: f64,
    #[serde(default = "AdvectionDiffusionConfig::default_diffusion")]
    pub diffusion: f64,
    #[serde(default = "AdvectionDiffusionConfig::default_sigma")]
    pub sigma: f64,
    pub r2: f64,
    #[serde(default = "AdvectionDiffusionConfig::default_sensors")]
    pub sensors: usize,
    #[serde(default = "AdvectionDiffusionConfig::default_grid")]
    pub grid: usize,
    #[serde(default = "AdvectionDiffusionConfig::default_dt")]
    pub dt: f64,
    /// Include the source term `g`.
    #[serde(default = "AdvectionDiffusionConfig::yes")]
    pub source: bool,
}

impl AdvectionDiffusionConfig {
    fn default_kappa() -> f64 {
        0.5
    }
    fn default_diffusion() -> f64 {
        0.01
    }
    fn default_sigma() -> f64 {
        10.0
    }
    fn default_sensors() -> usize {
        25
    }
    fn default_grid() -> usize {
        100
    }
    fn default_dt() -> f64 {
        0.005
    }
    fn yes() -> bool {
        true
    }

    pub fn new(r2: f64, sensors: usize) -> Self {
        AdvectionDiffusionConfig {
            kappa: 0.5,
            diffusion: 0.01,
            sigma: 10.0,
            r2,
            sensors,
            grid: 100,
            dt: 0.005,
            source: true,
        }
    }
}

/// Assembled operator and sensor layout for an [`AdvectionDiffusionConfig`].
#[derive(Debug, Clone, PartialEq)]
pub struct AdvectionDiffusion {
    pub config: AdvectionDiffusionConfig,
    grid: Vec<f64>,
    source: Vec<f64>,
    sensors: Vec<usize>,
    lu: TridiagonalLu,
}

/// `n` equally spaced indices into a grid of `points`: the midpoints of `n`
/// equal bins, `floor((2i + 1) points / 2n)`.
pub fn sensor_layout(points: usize, n: usize) -> Result<Vec<usize>> {
    if n == 0 || n >= points {
        return Err(Error::invalid(format!("need 0 < sensors < grid points (got {n} of {points})")));
    }
    Ok((0..n).map(|i| (2 * i + 1) * points / (2 * n)).collect())
}

impl AdvectionDiffusion {
    pub fn new(config: AdvectionDiffusionConfig) -> Result<Self> {
        let p = config.grid;
        if p < 3 || !(config.dt > 0.0) || config.diffusion < 0.0 || !(config.r2 > 0.0) {
            return Err(Error::invalid("advection-diffusion needs grid >= 3, dt > 0, D >= 0, r2 > 0"));
        }
        let h = 2.0 / (p + 1) as f64;
        let grid: Vec<f64> = (1..=p).map(|i| -1.0 + i as f64 * h).collect();
        let source = grid
            .iter()
            .map(|s| if config.source { 5.0 * (s * s - 1.0) } else { 0.0 })
            .collect();
        let sensors = sensor_layout(p, config.sensors)?;
        let lu = Self::factor(&config, p, h)?;
        Ok(AdvectionDiffusion {
            config,
            grid,
            source,
            sensors,
            lu,
        })
    }

    /// `I + dt L` with first-order upwind advection and central diffusion.
    fn factor(c: &AdvectionDiffusionConfig, p: usize, h: f64) -> Result<TridiagonalLu> {
        let (k, d, dt) = (c.kappa, c.diffusion, c.dt);
        let diff = d / (h * h);
        let (adv_lo, adv_diag, adv_up) = if k >= 0.0 {
            (-k / h, k / h, 0.0)
        } else {
            (0.0, -k / h, k / h)
        };
        let lower = vec![dt * (adv_lo - diff); p];
        let diag = vec![1.0 + dt * (adv_diag + 2.0 * diff); p];
        let upper = vec![dt * (adv_up - diff); p];
        TridiagonalLu::new(&lower, &diag, &upper)
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn sensors(&self) -> &[usize] {
        &self.sensors
    }

    pub fn initial_state(&self) -> Vec<f64> {
        self.grid.iter().map(|s| -(PI * s).sin()).collect()
    }

    /// One backward-Euler step with the given noise increments (already
    /// scaled), `(I + dt L) u_k = u_{k-1} - dt g + noise`.
    pub fn step(&self, u_prev: &[f64], noise: Option<&[f64]>, out: &mut [f64]) {
        let dt = self.config.dt;
        let rhs: Vec<f64> = u_prev
            .iter()
            .zip(&self.source)
            .enumerate()
            .map(|(i, (u, g))| u - dt * g + noise.map_or(0.0, |n| n[i]))
            .collect();
        self.lu.solve(&rhs, out);
    }

    /// Noise-free integration over `steps` steps.
    pub fn integrate_deterministic(&self, steps: usize) -> Vec<f64> {
        let mut u = self.initial_state();
        let mut next = vec![0.0; u.len()];
        for _ in 0..steps {
            self.step(&u, None, &mut next);
            std::mem::swap(&mut u, &mut next);
        }
        u
    }

    /// The full field including the zero boundary values.
    pub fn with_boundaries(u: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(u.len() + 2);
        out.push(0.0);
        out.extend_from_slice(u);
        out.push(0.0);
        out
    }
}

impl StateSpaceModel for AdvectionDiffusion {
    fn state_dim(&self) -> usize {
        self.config.grid
    }

    fn obs_dim(&self) -> usize {
        self.sensors.len()
    }

    fn sample_initial(&self, _: &mut Rng, out: &mut [f64]) {
        out.copy_from_slice(&self.initial_state());
    }

    fn sample_transition(&self, x_prev: &[f64], rng: &mut Rng, out: &mut [f64]) {
        let sd = self.config.sigma * self.config.dt.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let noise: Vec<f64> = (0..x_prev.len()).map(|_| sd * normal.sample(rng)).collect();
        self.step(x_prev, Some(&noise), out);
    }

    fn sample_observation(&self, x: &[f64], rng: &mut Rng, out: &mut [f64]) {
        for (o, &i) in out.iter_mut().zip(&self.sensors) {
            *o = (-x[i] - 1.0).exp();
        }
        add_noise(rng, out, self.config.r2.sqrt());
    }

    fn log_likelihood(&self, y: &[f64], x: &[f64]) -> f64 {
        gaussian_log_terms(y, self.sensors.iter().map(|&i| (-x[i] - 1.0).exp()), self.config.r2)
    }
}

/// System selection as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
pub enum SystemConfig {
    Sinusoidal {
        #[serde(default = "Sinusoidal::default_q2")]
        q2: f64,
        r2: f64,
    },
    Lorenz96 {
        dim: usize,
        #[serde(default = "Lorenz96::default_forcing")]
        forcing: f64,
        #[serde(default = "Lorenz96::default_dt")]
        dt: f64,
        #[serde(default = "Lorenz96::default_obs_var")]
        obs_var: f64,
    },
    AdvectionDiffusion(AdvectionDiffusionConfig),
}

impl SystemConfig {
    pub fn id(&self) -> &'static str {
        match self {
            SystemConfig::Sinusoidal { .. } => "sinusoidal",
            SystemConfig::Lorenz96 { .. } => "lorenz96",
            SystemConfig::AdvectionDiffusion(_) => "advection_diffusion",
        }
    }
}

/// A simulator instance usable by both dataset generation and the particle
/// filter.
#[derive(Debug, Clone, PartialEq)]
pub enum System {
    Sinusoidal(Sinusoidal),
    Lorenz96(Lorenz96),
    AdvectionDiffusion(Box<AdvectionDiffusion>),
}

/// Builds the simulator for a configuration, validating its parameters.
pub fn make_ssm_interface(cfg: &SystemConfig) -> Result<System> {
    match cfg {
        SystemConfig::Sinusoidal { q2, r2 } => {
            if !(*q2 > 0.0 && *r2 > 0.0) {
                return Err(Error::invalid("sinusoidal system needs q2 > 0 and r2 > 0"));
            }
            Ok(System::Sinusoidal(Sinusoidal::new(*q2, *r2)))
        }
        SystemConfig::Lorenz96 {
            dim,
            forcing,
            dt,
            obs_var,
        } => {
            if *dim < 4 || !(*dt > 0.0) || !(*obs_var > 0.0) {
                return Err(Error::invalid("lorenz96 needs dim >= 4, dt > 0 and obs_var > 0"));
            }
            Ok(System::Lorenz96(Lorenz96 {
                dim: *dim,
                forcing: *forcing,
                dt: *dt,
                obs_var: *obs_var,
            }))
        }
        SystemConfig::AdvectionDiffusion(c) => Ok(System::AdvectionDiffusion(Box::new(AdvectionDiffusion::new(c.clone())?))),
    }
}

impl System {
    fn inner(&self) -> &dyn StateSpaceModel {
        match self {
            System::Sinusoidal(s) => s,
            System::Lorenz96(s) => s,
            System::AdvectionDiffusion(s) => s.as_ref(),
        }
    }
}

impl StateSpaceModel for System {
    fn state_dim(&self) -> usize {
        self.inner().state_dim()
    }
    fn obs_dim(&self) -> usize {
        self.inner().obs_dim()
    }
    fn sample_initial(&self, rng: &mut Rng, out: &mut [f64]) {
        self.inner().sample_initial(rng, out)
    }
    fn sample_transition(&self, x_prev: &[f64], rng: &mut Rng, out: &mut [f64]) {
        self.inner().sample_transition(x_prev, rng, out)
    }
    fn sample_observation(&self, x: &[f64], rng: &mut Rng, out: &mut [f64]) {
        self.inner().sample_observation(x, rng, out)
    }
    fn log_likelihood(&self, y: &[f64], x: &[f64]) -> f64 {
        self.inner().log_likelihood(y, x)
    }
}

/// One simulated trajectory: `K + 1` states and `K` measurements, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    m: usize,
    n: usize,
    pub states: Vec<f64>,
    pub measurements: Vec<f64>,
}

impl Trajectory {
    pub fn new(m: usize, n: usize, states: Vec<f64>, measurements: Vec<f64>) -> Result<Self> {
        if m == 0 || n == 0 || states.len() % m != 0 || measurements.len() % n != 0 {
            return Err(Error::shape("trajectory", "buffer lengths are not multiples of the dims"));
        }
        if states.len() / m != measurements.len() / n + 1 {
            return Err(Error::shape(
                "trajectory",
                format!("{} states for {} measurements", states.len() / m, measurements.len() / n),
            ));
        }
        Ok(Trajectory {
            m,
            n,
            states,
            measurements,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of transitions `K`.
    pub fn k(&self) -> usize {
        self.measurements.len() / self.n
    }

    /// `x_k` for `k = 0..=K`.
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.m..(k + 1) * self.m]
    }

    /// `y_k` for `k = 1..=K`.
    pub fn measurement(&self, k: usize) -> &[f64] {
        &self.measurements[(k - 1) * self.n..k * self.n]
    }
}

/// What was simulated, sufficient to regenerate the data bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub system: SystemConfig,
    pub trajectories: usize,
    pub steps: usize,
    pub state_dim: usize,
    pub meas_dim: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Trajectories `range` as a new dataset with adjusted metadata.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        let trajectories = self.trajectories[range].to_vec();
        Dataset {
            meta: DatasetMeta {
                trajectories: trajectories.len(),
                ..self.meta.clone()
            },
            trajectories,
        }
    }
}

/// Simulates one trajectory from `rng`.
pub fn simulate_trajectory<S: StateSpaceModel + ?Sized>(sys: &S, steps: usize, rng: &mut Rng) -> Result<Trajectory> {
    let m = sys.state_dim();
    let n = sys.obs_dim();
    let mut states = vec![0.0; (steps + 1) * m];
    let mut meas = vec![0.0; steps * n];
    sys.sample_initial(rng, &mut states[..m]);
    for k in 1..=steps {
        let (head, tail) = states.split_at_mut(k * m);
        let x = &mut tail[..m];
        sys.sample_transition(&head[(k - 1) * m..], rng, x);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteStep {
                step: k,
                context: "simulated state".into(),
            });
        }
        sys.sample_observation(x, rng, &mut meas[(k - 1) * n..k * n]);
    }
    Trajectory::new(m, n, states, meas)
}

/// `count` trajectories of `steps` transitions. Trajectory `i` draws from
/// stream `(seed, "simulate", i)`, so generation parallelizes without
/// affecting the result.
pub fn simulate(cfg: &SystemConfig, count: usize, steps: usize, seed: u64) -> Result<Dataset> {
    if count == 0 {
        return Err(Error::invalid("need at least one trajectory"));
    }
    let sys = make_ssm_interface(cfg)?;
    let trajectories: Result<Vec<Trajectory>> = (0..count)
        .into_par_iter()
        .map(|i| simulate_trajectory(&sys, steps, &mut rng::stream(seed, "simulate", i as u64)))
        .collect();
    Ok(Dataset {
        meta: DatasetMeta {
            system: cfg.clone(),
            trajectories: count,
            steps,
            state_dim: sys.state_dim(),
            meas_dim: sys.obs_dim(),
            seed,
        },
        trajectories: trajectories?,
    })
}

pub fn simulate_sinusoidal(q2: f64, r2: f64, steps: usize, count: usize, seed: u64) -> Result<Dataset> {
    simulate(&SystemConfig::Sinusoidal { q2, r2 }, count, steps, seed)
}

pub fn simulate_lorenz96(dim: usize, forcing: f64, dt: f64, steps: usize, count: usize, seed: u64) -> Result<Dataset> {
    simulate(
        &SystemConfig::Lorenz96 {
            dim,
            forcing,
            dt,
            obs_var: 1.0,
        },
        count,
        steps,
        seed,
    )
}

pub fn simulate_advdiff(cfg: &AdvectionDiffusionConfig, steps: usize, count: usize, seed: u64) -> Result<Dataset> {
    simulate(&SystemConfig::AdvectionDiffusion(cfg.clone()), count, steps, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_determinism() {
        let a = simulate_sinusoidal(0.1, 0.05, 7, 3, 42).unwrap();
        let b = simulate_sinusoidal(0.1, 0.05, 7, 3, 42).unwrap();
        assert_eq!(a, b);
        for t in &a.trajectories {
            assert_eq!(t.states.len(), 8 * 2);
            assert_eq!(t.measurements.len(), 7 * 2);
        }
        assert_ne!(a.trajectories[0], a.trajectories[1]);
    }

    #[test]
    fn zero_count_rejected() {
        assert!(simulate_sinusoidal(0.1, 0.05, 7, 0, 1).is_err());
    }

    #[test]
    fn sinusoidal_likelihood_peaks_at_replicated_angle() {
        let s = Sinusoidal::new(0.1, 0.05);
        let x = [0.8, 0.3];
        let a = Sinusoidal::angle(&x);
        let best = s.log_likelihood(&[a, a], &x);
        for d in [-0.1, 0.05, 0.2] {
            assert!(s.log_likelihood(&[a + d, a], &x) < best);
        }
        assert_eq!(Sinusoidal::angle(&[0.0, 2.0]), PI / 2.0);
        assert_eq!(Sinusoidal::angle(&[0.0, -2.0]), -PI / 2.0);
    }

    #[test]
    fn lorenz_zero_is_equilibrium_without_forcing() {
        let x = lorenz96_integrate(&[0.0; 6], 0.0, 0.01, 100);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lorenz_likelihood_factorizes() {
        let l = Lorenz96::new(4);
        let x: [f64; 4] = [1.0, -0.5, 2.0, 0.1];
        let y: [f64; 4] = [0.5, 0.0, 7.0, -1.0];
        let manual: f64 = x
            .iter()
            .zip(&y)
            .map(|(xi, yi)| -0.5 * ((2.0 * PI).ln() + (yi - xi * xi * xi).powi(2)))
            .sum();
        assert!((l.log_likelihood(&y, &x) - manual).abs() < 1e-12);
    }

    #[test]
    fn lorenz_initial_state() {
        let x = Lorenz96::initial_state(4);
        assert!((x[0] - 1.0).abs() < 1e-15 && x[1].abs() < 1e-15 && (x[2] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn thomas_matches_dense_solve() {
        let lower = [0.0, -1.0, 0.5, -0.2];
        let diag = [4.0, 3.0, 5.0, 2.0];
        let upper = [1.0, -0.5, 0.3, 0.0];
        let lu = TridiagonalLu::new(&lower, &diag, &upper).unwrap();
        let rhs = [1.0, 2.0, -1.0, 0.5];
        let mut x = [0.0; 4];
        lu.solve(&rhs, &mut x);
        for i in 0..4 {
            let mut r = diag[i] * x[i];
            if i > 0 {
                r += lower[i] * x[i - 1];
            }
            if i < 3 {
                r += upper[i] * x[i + 1];
            }
            assert!((r - rhs[i]).abs() < 1e-14);
        }
    }

    #[test]
    fn sensor_layouts() {
        assert_eq!(sensor_layout(100, 10).unwrap(), vec![5, 15, 25, 35, 45, 55, 65, 75, 85, 95]);
        let s25 = sensor_layout(100, 25).unwrap();
        assert_eq!(s25[0], 2);
        assert_eq!(s25[24], 98);
        assert!(s25.windows(2).all(|w| w[1] - w[0] == 4));
        assert!(sensor_layout(100, 100).is_err());
    }

    #[test]
    fn pure_diffusion_decays() {
        let mut c = AdvectionDiffusionConfig::new(0.1, 10);
        c.kappa = 0.0;
        c.source = false;
        c.sigma = 0.0;
        let ad = AdvectionDiffusion::new(c).unwrap();
        let mut u = ad.initial_state();
        let mut prev_max = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let mut next = vec![0.0; u.len()];
        for _ in 0..50 {
            ad.step(&u, None, &mut next);
            std::mem::swap(&mut u, &mut next);
            let mx = u.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(mx < prev_max);
            prev_max = mx;
        }
    }

    #[test]
    fn advdiff_dataset_shape() {
        let d = simulate_advdiff(&AdvectionDiffusionConfig::new(0.1, 10), 5, 2, 1).unwrap();
        assert_eq!(d.meta.state_dim, 100);
        assert_eq!(d.meta.meas_dim, 10);
        let full = AdvectionDiffusion::with_boundaries(d.trajectories[0].state(5));
        assert_eq!(full.len(), 102);
        assert_eq!((full[0], full[101]), (0.0, 0.0));
    }
}
