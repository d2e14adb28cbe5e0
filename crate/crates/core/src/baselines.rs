//! Reference filters: a bootstrap particle filter driven by the true model
//! and a classical Kalman filter for linear-Gaussian systems.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::filtering::{cholesky_jittered, symmetrize, GaussianBelief};
use crate::rng::{self, Rng};

/// Particles propagated per random stream.
pub const PF_CHUNK: usize = 4096;

/// What the particle filter needs from a system: samplers for the initial
/// state and one transition, and the observation log-likelihood.
pub trait StateSpaceModel: Sync {
    fn state_dim(&self) -> usize;
    fn obs_dim(&self) -> usize;
    fn sample_initial(&self, rng: &mut Rng, out: &mut [f64]);
    fn sample_transition(&self, x_prev: &[f64], rng: &mut Rng, out: &mut [f64]);
    fn sample_observation(&self, x: &[f64], rng: &mut Rng, out: &mut [f64]);
    fn log_likelihood(&self, y: &[f64], x: &[f64]) -> f64;
}

/// Weighted particle approximation of `p(x_k | y_{1:k})`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleCloud {
    pub step: usize,
    pub dim: usize,
    /// `N x m`, row-major.
    pub particles: Vec<f64>,
    pub weights: Vec<f64>,
    pub ess: f64,
    /// All likelihoods underflowed and the weights were reset to uniform.
    pub degenerate: bool,
}

impl ParticleCloud {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        &self.particles[i * self.dim..(i + 1) * self.dim]
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.dim];
        for (i, w) in self.weights.iter().enumerate() {
            for (j, x) in self.particle(i).iter().enumerate() {
                mu[j] += w * x;
            }
        }
        mu
    }

    /// Per-coordinate weighted variance.
    pub fn variance(&self) -> Vec<f64> {
        let mu = self.mean();
        let mut v = vec![0.0; self.dim];
        for (i, w) in self.weights.iter().enumerate() {
            for (j, x) in self.particle(i).iter().enumerate() {
                v[j] += w * (x - mu[j]) * (x - mu[j]);
            }
        }
        v
    }

    /// `count` equally weighted draws by systematic resampling.
    pub fn equal_weight_samples(&self, count: usize, rng: &mut Rng) -> Vec<f64> {
        let idx = systematic_resample(&self.weights, count, rng);
        let mut out = Vec::with_capacity(count * self.dim);
        for i in idx {
            out.extend_from_slice(self.particle(i));
        }
        out
    }
}

/// `1 / sum w_i^2` for normalized weights.
pub fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling: one uniform offset, `count` evenly spaced points
/// on the weight CDF. Returns the selected indices in increasing order.
pub fn systematic_resample(weights: &[f64], count: usize, rng: &mut Rng) -> Vec<usize> {
    let n = weights.len();
    let step = 1.0 / count as f64;
    let u0 = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(count);
    let mut cum = weights[0];
    let mut i = 0;
    for j in 0..count {
        let u = u0 + j as f64 * step;
        while u > cum && i + 1 < n {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
    }
    out
}

/// Normalizes log-weights in place into `weights`. Returns `false` when
/// every weight is zero or non-finite, in which case the weights are uniform.
fn normalize_log_weights(logw: &[f64], weights: &mut [f64]) -> bool {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let n = logw.len() as f64;
    if !max.is_finite() {
        weights.iter_mut().for_each(|w| *w = 1.0 / n);
        return false;
    }
    let mut total = 0.0;
    for (w, l) in weights.iter_mut().zip(logw) {
        *w = (l - max).exp();
        total += *w;
    }
    weights.iter_mut().for_each(|w| *w /= total);
    true
}

/// Streaming bootstrap particle filter. `visit` sees the weighted cloud of
/// every step `k = 1..=K`; resampling (systematic, when ESS < N/2) happens
/// before the next propagation.
pub fn pf_run<S, F>(ssm: &S, ys: &[f64], n: usize, seed: u64, mut visit: F) -> Result<()>
where
    S: StateSpaceModel + ?Sized,
    F: FnMut(&ParticleCloud) -> Result<()>,
{
    if n < 2 {
        return Err(Error::invalid("particle filter needs at least 2 particles"));
    }
    let m = ssm.state_dim();
    let d = ssm.obs_dim();
    if ys.len() % d != 0 {
        return Err(Error::shape("pf_run", "measurement length is not a multiple of n"));
    }
    let k_total = ys.len() / d;
    let mut particles = vec![0.0; n * m];
    particles
        .par_chunks_mut(PF_CHUNK * m)
        .enumerate()
        .for_each(|(c, chunk)| {
            let mut r = rng::stream(seed, "pf.init", c as u64);
            for x in chunk.chunks_mut(m) {
                ssm.sample_initial(&mut r, x);
            }
        });
    let mut weights = vec![1.0 / n as f64; n];
    let mut logw = vec![0.0; n];
    let mut next = vec![0.0; n * m];
    for k in 1..=k_total {
        if ess(&weights) < n as f64 / 2.0 {
            let mut r = rng::stream(seed, "pf.resample", k as u64);
            let idx = systematic_resample(&weights, n, &mut r);
            for (dst, &src) in idx.iter().enumerate() {
                next[dst * m..(dst + 1) * m].copy_from_slice(&particles[src * m..(src + 1) * m]);
            }
            std::mem::swap(&mut particles, &mut next);
            weights.iter_mut().for_each(|w| *w = 1.0 / n as f64);
        }
        let step_root = rng::derive_seed(seed, "pf.step", k as u64);
        let y = &ys[(k - 1) * d..k * d];
        next.par_chunks_mut(PF_CHUNK * m)
            .zip(particles.par_chunks(PF_CHUNK * m))
            .zip(logw.par_chunks_mut(PF_CHUNK))
            .zip(weights.par_chunks(PF_CHUNK))
            .enumerate()
            .for_each(|(c, (((out, prev), lw), w))| {
                let mut r = rng::stream(step_root, "chunk", c as u64);
                for (i, (xo, xp)) in out.chunks_mut(m).zip(prev.chunks(m)).enumerate() {
                    ssm.sample_transition(xp, &mut r, xo);
                    let ll = ssm.log_likelihood(y, xo);
                    lw[i] = w[i].ln() + if ll.is_nan() { f64::NEG_INFINITY } else { ll };
                }
            });
        std::mem::swap(&mut particles, &mut next);
        if particles.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteStep {
                step: k,
                context: "particle state".into(),
            });
        }
        let ok = normalize_log_weights(&logw, &mut weights);
        let cloud = ParticleCloud {
            step: k,
            dim: m,
            particles: std::mem::take(&mut particles),
            weights: std::mem::take(&mut weights),
            ess: 0.0,
            degenerate: !ok,
        };
        let cloud = ParticleCloud {
            ess: ess(&cloud.weights),
            ..cloud
        };
        visit(&cloud)?;
        particles = cloud.particles;
        weights = cloud.weights;
    }
    Ok(())
}

/// Collects every step's cloud. For large `N` prefer [`pf_run`].
pub fn pf_filter<S>(ssm: &S, ys: &[f64], n: usize, seed: u64) -> Result<Vec<ParticleCloud>>
where
    S: StateSpaceModel + ?Sized,
{
    let mut out = Vec::new();
    pf_run(ssm, ys, n, seed, |c| {
        out.push(c.clone());
        Ok(())
    })?;
    Ok(out)
}

/// `x_k = F x_{k-1} + b + w`, `y_k = H x_k + c + v`, `w ~ N(0, Q)`,
/// `v ~ N(0, R)`, `x_0 ~ N(mu0, Sigma0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianSsm {
    pub f: DMatrix<f64>,
    pub b: DVector<f64>,
    pub q: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub c: DVector<f64>,
    pub r: DMatrix<f64>,
    pub mu0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    q_sqrt: DMatrix<f64>,
    s0_sqrt: DMatrix<f64>,
    r_chol: DMatrix<f64>,
    r_logdet: f64,
}

impl LinearGaussianSsm {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        f: DMatrix<f64>,
        b: DVector<f64>,
        q: DMatrix<f64>,
        h: DMatrix<f64>,
        c: DVector<f64>,
        r: DMatrix<f64>,
        mu0: DVector<f64>,
        sigma0: DMatrix<f64>,
    ) -> Result<Self> {
        let m = f.nrows();
        let n = h.nrows();
        if f.shape() != (m, m)
            || b.len() != m
            || q.shape() != (m, m)
            || h.ncols() != m
            || c.len() != n
            || r.shape() != (n, n)
            || mu0.len() != m
            || sigma0.shape() != (m, m)
        {
            return Err(Error::shape("linear_gaussian_ssm", "inconsistent dimensions"));
        }
        let q_sqrt = cholesky_jittered(&q)?.l();
        let s0_sqrt = cholesky_jittered(&sigma0)?.l();
        let rc = cholesky_jittered(&r)?.l();
        let r_logdet = 2.0 * rc.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(LinearGaussianSsm {
            f,
            b,
            q,
            h,
            c,
            r,
            mu0,
            sigma0,
            q_sqrt,
            s0_sqrt,
            r_chol: rc,
            r_logdet,
        })
    }

    pub fn initial_belief(&self) -> GaussianBelief {
        GaussianBelief {
            mean: self.mu0.clone(),
            cov: self.sigma0.clone(),
        }
    }
}

fn gaussian_fill(rng: &mut Rng, k: usize) -> DVector<f64> {
    DVector::from_iterator(k, (0..k).map(|_| StandardNormal.sample(rng)))
}

impl StateSpaceModel for LinearGaussianSsm {
    fn state_dim(&self) -> usize {
        self.f.nrows()
    }

    fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    fn sample_initial(&self, rng: &mut Rng, out: &mut [f64]) {
        let x = &self.mu0 + &self.s0_sqrt * gaussian_fill(rng, out.len());
        out.copy_from_slice(x.as_slice());
    }

    fn sample_transition(&self, x_prev: &[f64], rng: &mut Rng, out: &mut [f64]) {
        let xp = DVector::from_column_slice(x_prev);
        let x = &self.f * xp + &self.b + &self.q_sqrt * gaussian_fill(rng, out.len());
        out.copy_from_slice(x.as_slice());
    }

    fn sample_observation(&self, x: &[f64], rng: &mut Rng, out: &mut [f64]) {
        let y = &self.h * DVector::from_column_slice(x) + &self.c + &self.r_chol * gaussian_fill(rng, out.len());
        out.copy_from_slice(y.as_slice());
    }

    fn log_likelihood(&self, y: &[f64], x: &[f64]) -> f64 {
        let resid = DVector::from_column_slice(y) - &self.h * DVector::from_column_slice(x) - &self.c;
        let w = self
            .r_chol
            .solve_lower_triangular(&resid)
            .expect("factor has a positive diagonal");
        -0.5 * (y.len() as f64 * (2.0 * std::f64::consts::PI).ln() + self.r_logdet + w.norm_squared())
    }
}

/// Predict-update Kalman filter. Returns `K + 1` beliefs, the prior on
/// `x_0` first.
pub fn kalman_filter(ssm: &LinearGaussianSsm, ys: &[f64]) -> Result<Vec<GaussianBelief>> {
    let n = ssm.obs_dim();
    let m = ssm.state_dim();
    if ys.len() % n != 0 {
        return Err(Error::shape("kalman_filter", "measurement length is not a multiple of n"));
    }
    let mut out = vec![ssm.initial_belief()];
    for y in ys.chunks(n) {
        let prev = out.last().expect("initial belief present");
        let pm = &ssm.f * &prev.mean + &ssm.b;
        let pc = symmetrize(&(&ssm.f * &prev.cov * ssm.f.transpose() + &ssm.q));
        let s = symmetrize(&(&ssm.h * &pc * ssm.h.transpose() + &ssm.r));
        let gain = cholesky_jittered(&s)?.solve(&(&ssm.h * &pc)).transpose();
        let innov = DVector::from_column_slice(y) - &ssm.h * &pm - &ssm.c;
        let eye = DMatrix::<f64>::identity(m, m);
        out.push(GaussianBelief {
            mean: &pm + &gain * innov,
            cov: symmetrize(&((eye - &gain * &ssm.h) * pc)),
        });
    }
    Ok(out)
}

/// Simulates `(x_{0:K}, y_{1:K})` from the linear-Gaussian model.
pub fn simulate_linear(ssm: &LinearGaussianSsm, k: usize, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let m = ssm.state_dim();
    let n = ssm.obs_dim();
    let mut xs = vec![0.0; (k + 1) * m];
    let mut ys = vec![0.0; k * n];
    ssm.sample_initial(rng, &mut xs[..m]);
    for t in 1..=k {
        let (head, tail) = xs.split_at_mut(t * m);
        ssm.sample_transition(&head[(t - 1) * m..], rng, &mut tail[..m]);
        ssm.sample_observation(&tail[..m], rng, &mut ys[(t - 1) * n..t * n]);
    }
    (xs, ys)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn scalar_ssm(h: f64) -> LinearGaussianSsm {
        LinearGaussianSsm::new(
            scalar(1.0),
            DVector::zeros(1),
            scalar(1.0),
            scalar(h),
            DVector::zeros(1),
            scalar(1.0),
            DVector::zeros(1),
            scalar(1.0),
        )
        .unwrap()
    }

    #[test]
    fn ess_examples() {
        assert!((ess(&[0.25; 4]) - 4.0).abs() < 1e-12);
        assert_eq!(ess(&[0.0, 1.0, 0.0]), 1.0);
        assert!((ess(&[0.5, 0.25, 0.25]) - 8.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn systematic_counts_are_floor_or_ceil() {
        let w = [0.1, 0.35, 0.05, 0.5];
        for seed in 0..50 {
            let idx = systematic_resample(&w, 20, &mut rng::from_seed(seed));
            for (i, wi) in w.iter().enumerate() {
                let c = idx.iter().filter(|&&j| j == i).count() as f64;
                let e = 20.0 * wi;
                assert!(c == e.floor() || c == e.ceil(), "{i}: {c} vs {e}");
            }
        }
    }

    #[test]
    fn log_weight_normalization_handles_underflow() {
        let mut w = vec![0.0; 3];
        assert!(normalize_log_weights(&[-1000.0, -1001.0, -2000.0], &mut w));
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w[0] > w[1] && w[2] < 1e-300);
        assert!(!normalize_log_weights(&[f64::NEG_INFINITY; 3], &mut w));
        assert_eq!(w, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn textbook_scalar_kalman() {
        let b = kalman_filter(&scalar_ssm(1.0), &[2.0]).unwrap();
        // prior (0, 1) predicts (0, 2); S = 3, K = 2/3
        assert!((b[1].mean[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((b[1].cov[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn pure_prediction_chain() {
        let b = kalman_filter(&scalar_ssm(0.0), &[5.0, -5.0, 1.0]).unwrap();
        for (k, belief) in b.iter().enumerate() {
            assert_eq!(belief.mean[0], 0.0);
            assert!((belief.cov[(0, 0)] - (1.0 + k as f64)).abs() < 1e-12);
        }
    }

    #[test]
    fn pf_is_deterministic_and_normalized() {
        let ssm = scalar_ssm(1.0);
        let ys = [0.5, 1.0, 0.2];
        let a = pf_filter(&ssm, &ys, 5000, 11).unwrap();
        let b = pf_filter(&ssm, &ys, 5000, 11).unwrap();
        assert_eq!(a, b);
        for c in &a {
            assert!((c.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(c.weights.iter().all(|&w| w >= 0.0));
        }
    }

    struct Pinned;

    impl StateSpaceModel for Pinned {
        fn state_dim(&self) -> usize {
            1
        }
        fn obs_dim(&self) -> usize {
            1
        }
        fn sample_initial(&self, rng: &mut Rng, out: &mut [f64]) {
            out[0] = rng.random_range(0..10) as f64;
        }
        fn sample_transition(&self, x_prev: &[f64], _: &mut Rng, out: &mut [f64]) {
            out[0] = x_prev[0];
        }
        fn sample_observation(&self, x: &[f64], _: &mut Rng, out: &mut [f64]) {
            out[0] = x[0];
        }
        fn log_likelihood(&self, y: &[f64], x: &[f64]) -> f64 {
            if y[0] == x[0] {
                0.0
            } else {
                f64::NEG_INFINITY
            }
        }
    }

    #[test]
    fn exact_match_concentrates_weight() {
        let clouds = pf_filter(&Pinned, &[3.0], 50, 2).unwrap();
        let c = &clouds[0];
        let mass: f64 = (0..c.len()).filter(|&i| c.particle(i)[0] == 3.0).map(|i| c.weights[i]).sum();
        assert!((mass - 1.0).abs() < 1e-12);
    }
}
