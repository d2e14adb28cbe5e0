//! Closed-form latent filtering: the measurement update on `gamma_k`, the
//! conditioned state propagation, the FBF' Kalman recursion, and sampling
//! and density evaluation in the original space.

use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ParameterStore, Tensor};
use crate::error::{Error, Result};
use crate::flows::FlowTransform;
use crate::latent_ssm::{
    fbfprime_to_fbf, FbfPrimeParams, LatentModel, ObservationCoefficients, TransitionCoefficients,
};
use crate::model::TrainedFilter;
use crate::rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Absolute diagonal jitter tried in order after a plain factorization fails.
pub const JITTER_LADDER: [f64; 5] = [1e-12, 1e-11, 1e-10, 1e-9, 1e-8];

/// Rows drawn per random stream in [`sample_posterior`].
pub const SAMPLE_CHUNK: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let m = mean.len();
        if cov.nrows() != m || cov.ncols() != m {
            return Err(Error::shape("belief", format!("mean {m} vs cov {}x{}", cov.nrows(), cov.ncols())));
        }
        Ok(GaussianBelief { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().chain(self.cov.iter()).all(|v| v.is_finite())
    }
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Cholesky factorization, retrying with escalating diagonal jitter.
pub fn cholesky_jittered(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(a.clone()) {
        return Ok(c);
    }
    let n = a.nrows();
    for eps in JITTER_LADDER {
        let shifted = a + DMatrix::identity(n, n) * eps;
        if let Some(c) = Cholesky::new(shifted) {
            return Ok(c);
        }
    }
    Err(Error::Singular(format!(
        "{n}x{n} matrix not positive definite even with jitter {}",
        JITTER_LADDER[JITTER_LADDER.len() - 1]
    )))
}

/// How the measurement update treats the innovation covariance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// Exact Gaussian conditioning with gain `Sigma D^T (D Sigma D^T + Q)^-1`.
    #[default]
    Exact,
    /// Gain `Sigma D^T Q^-1` and `Sigma' = Sigma - Sigma D^T Q^-1 D Sigma`.
    /// Only close to exact when `D Sigma D^T` is small against `Q`, and not
    /// guaranteed positive semidefinite.
    AsPrinted,
}

/// Conditions the latent belief on `gamma ~ N(C + D chi, Q_gamma)`.
pub fn measurement_update(
    belief: &GaussianBelief,
    gamma: &DVector<f64>,
    obs: &ObservationCoefficients,
    mode: Conditioning,
) -> Result<GaussianBelief> {
    let (mu, sigma) = (&belief.mean, &belief.cov);
    let d = &obs.d;
    if d.ncols() != mu.len() || d.nrows() != gamma.len() || obs.c.len() != gamma.len() {
        return Err(Error::shape("measurement_update", "D, C and gamma disagree with belief"));
    }
    let innovation = gamma - &obs.c - d * mu;
    let sdt = sigma * d.transpose();
    let denom = match mode {
        Conditioning::Exact => symmetrize(&(d * &sdt + &obs.q_gamma)),
        Conditioning::AsPrinted => obs.q_gamma.clone(),
    };
    let chol = cholesky_jittered(&denom)?;
    // K^T = denom^-1 D Sigma
    let kt = chol.solve(&sdt.transpose());
    let gain = kt.transpose();
    let mean = mu + &gain * innovation;
    let cov = symmetrize(&(sigma - &gain * sdt.transpose()));
    Ok(GaussianBelief { mean, cov })
}

/// Information-form update `(Sigma^-1 + D^T Q^-1 D)^-1`. Needs an invertible
/// prior covariance; used as an independent check on the gain form.
pub fn measurement_update_information(
    belief: &GaussianBelief,
    gamma: &DVector<f64>,
    obs: &ObservationCoefficients,
) -> Result<GaussianBelief> {
    let prior = cholesky_jittered(&belief.cov)?;
    let qc = cholesky_jittered(&obs.q_gamma)?;
    let prior_prec = prior.inverse();
    let dt_qinv = qc.solve(&obs.d).transpose();
    let post_prec = symmetrize(&(&prior_prec + &dt_qinv * &obs.d));
    let pc = cholesky_jittered(&post_prec)?;
    let cov = symmetrize(&pc.inverse());
    let rhs = &prior_prec * &belief.mean + &dt_qinv * (gamma - &obs.c);
    Ok(GaussianBelief {
        mean: pc.solve(&rhs),
        cov,
    })
}

/// `mu_k = A + B mu'`, `Sigma_k = B Sigma' B^T + Q_chi`.
pub fn state_propagate(belief: &GaussianBelief, tr: &TransitionCoefficients) -> Result<GaussianBelief> {
    let m = belief.dim();
    if tr.a.len() != m || tr.b.shape() != (m, m) || tr.q_chi.shape() != (m, m) {
        return Err(Error::shape("state_propagate", "coefficients disagree with belief"));
    }
    Ok(GaussianBelief {
        mean: &tr.a + &tr.b * &belief.mean,
        cov: symmetrize(&(&tr.b * &belief.cov * tr.b.transpose() + &tr.q_chi)),
    })
}

/// One Kalman predict-update step of the FBF' latent model.
pub fn kalman_step(belief: &GaussianBelief, gamma: &DVector<f64>, p: &FbfPrimeParams) -> Result<GaussianBelief> {
    let m = belief.dim();
    let pred_mean = &p.e + &p.f * &belief.mean;
    let pred_cov = symmetrize(&(&p.f * &belief.cov * p.f.transpose() + &p.p_chi));
    let s = symmetrize(&(&p.h * &pred_cov * p.h.transpose() + &p.p_gamma));
    let chol = cholesky_jittered(&s)?;
    let gain = chol.solve(&(&p.h * &pred_cov)).transpose();
    let innovation = gamma - &p.h * &pred_mean - &p.g;
    let eye = DMatrix::<f64>::identity(m, m);
    Ok(GaussianBelief {
        mean: &pred_mean + &gain * innovation,
        cov: symmetrize(&((eye - &gain * &p.h) * pred_cov)),
    })
}

/// Route taken for FBF' checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimeRoute {
    /// Kalman recursion on `(E, F, G, H, P_chi, P_gamma)`.
    #[default]
    Kalman,
    /// Convert to FBF form and run the two-step recursion.
    Converted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterOptions {
    #[serde(default)]
    pub conditioning: Conditioning,
    #[serde(default)]
    pub prime_route: PrimeRoute,
}

/// Beliefs `k = 0..=K` (the initial belief first) and the wall time of each
/// processed measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRun {
    pub beliefs: Vec<GaussianBelief>,
    pub step_seconds: Vec<f64>,
}

impl FilterRun {
    pub fn steps(&self) -> usize {
        self.step_seconds.len()
    }
}

/// The two-step recursion with caller-supplied coefficients: for each
/// `gamma_k`, condition on it with `obs`, then propagate with
/// `transition(gamma_k)`.
pub fn fbf_recursion<F>(
    initial: &GaussianBelief,
    gammas: &[DVector<f64>],
    obs: &ObservationCoefficients,
    mut transition: F,
    mode: Conditioning,
) -> Result<FilterRun>
where
    F: FnMut(&DVector<f64>) -> Result<TransitionCoefficients>,
{
    let mut beliefs = Vec::with_capacity(gammas.len() + 1);
    let mut step_seconds = Vec::with_capacity(gammas.len());
    beliefs.push(initial.clone());
    for (i, gamma) in gammas.iter().enumerate() {
        let start = Instant::now();
        let prev = beliefs.last().expect("initial belief present");
        let cond = measurement_update(prev, gamma, obs, mode)?;
        let tr = transition(gamma)?;
        let next = state_propagate(&cond, &tr)?;
        if !next.is_finite() {
            return Err(Error::NonFiniteStep {
                step: i + 1,
                context: "latent belief".into(),
            });
        }
        beliefs.push(next);
        step_seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(FilterRun { beliefs, step_seconds })
}

/// Maps measurements through V. `ys` holds `K` rows of length `n`.
pub fn latent_measurements(v: &FlowTransform, store: &ParameterStore, ys: &[f64]) -> Result<Vec<DVector<f64>>> {
    let n = v.dim();
    if ys.len() % n != 0 {
        return Err(Error::shape("latent_measurements", format!("{} values is not a multiple of n = {n}", ys.len())));
    }
    let k = ys.len() / n;
    if k == 0 {
        return Ok(Vec::new());
    }
    let (z, _) = v.forward_batch(store, &Tensor::matrix(k, n, ys.to_vec())?)?;
    (0..k)
        .map(|i| {
            let row = z.row(i);
            if row.iter().all(|x| x.is_finite()) {
                Ok(DVector::from_column_slice(row))
            } else {
                Err(Error::NonFiniteStep {
                    step: i + 1,
                    context: "V(y) is not finite".into(),
                })
            }
        })
        .collect()
}

/// Filters one measurement sequence (`K` rows of length `n`, flattened).
pub fn fbf_filter(filter: &TrainedFilter, ys: &[f64], opts: FilterOptions) -> Result<FilterRun> {
    let model = &filter.model;
    let store = &filter.params;
    let initial = GaussianBelief::new(filter.mu0.clone(), filter.sigma0.clone())?;
    let gammas = latent_measurements(model.meas_flow(), store, ys)?;
    match model.latent() {
        LatentModel::Fbf(l) => {
            let obs = l.observation(store)?;
            fbf_recursion(&initial, &gammas, &obs, |g| l.eval_conditioners(store, g.as_slice()), opts.conditioning)
        }
        LatentModel::FbfPrime(l) => {
            let p = l.params(store)?;
            match opts.prime_route {
                PrimeRoute::Kalman => kalman_recursion(&initial, &gammas, &p),
                PrimeRoute::Converted => {
                    let conv = fbfprime_to_fbf(&p)?;
                    fbf_recursion(&initial, &gammas, &conv.observation, |g| Ok(conv.transition(g)), opts.conditioning)
                }
            }
        }
    }
}

/// Repeated [`kalman_step`].
pub fn kalman_recursion(initial: &GaussianBelief, gammas: &[DVector<f64>], p: &FbfPrimeParams) -> Result<FilterRun> {
    let mut beliefs = vec![initial.clone()];
    let mut step_seconds = Vec::with_capacity(gammas.len());
    for (i, gamma) in gammas.iter().enumerate() {
        let start = Instant::now();
        let next = kalman_step(beliefs.last().expect("initial belief present"), gamma, p)?;
        if !next.is_finite() {
            return Err(Error::NonFiniteStep {
                step: i + 1,
                context: "latent belief".into(),
            });
        }
        beliefs.push(next);
        step_seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(FilterRun { beliefs, step_seconds })
}

/// A square-root factor `L` with `L L^T = Sigma`. Plain Cholesky when it
/// succeeds; otherwise a symmetric eigen-decomposition with negative
/// eigenvalues clipped to zero, so a singular (even zero) covariance gives
/// exact degenerate draws.
pub fn sqrt_factor(cov: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(c) = Cholesky::new(cov.clone()) {
        return c.l();
    }
    let eig = SymmetricEigen::new(symmetrize(cov));
    let scale = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|l| l.max(0.0).sqrt()));
    eig.eigenvectors * DMatrix::from_diagonal(&scale)
}

/// Draws latent samples `chi ~ N(mu, Sigma)` as rows. Chunk `c` of
/// [`SAMPLE_CHUNK`] rows uses stream `(seed, "posterior", c)`, so output does
/// not depend on the thread count.
pub fn sample_latent(belief: &GaussianBelief, count: usize, seed: u64) -> Tensor {
    let m = belief.dim();
    let l = sqrt_factor(&belief.cov);
    let chunks = count.div_ceil(SAMPLE_CHUNK);
    let data: Vec<f64> = (0..chunks)
        .into_par_iter()
        .flat_map_iter(|c| {
            let rows = SAMPLE_CHUNK.min(count - c * SAMPLE_CHUNK);
            let mut r = rng::stream(seed, "posterior", c as u64);
            let mut out = Vec::with_capacity(rows * m);
            for _ in 0..rows {
                let xi = DVector::from_iterator(m, (0..m).map(|_| StandardNormal.sample(&mut r)));
                let chi = &belief.mean + &l * xi;
                out.extend(chi.iter());
            }
            out
        })
        .collect();
    if count == 0 {
        return Tensor::zeros(&[0, m]);
    }
    Tensor::matrix(count, m, data).expect("positive extents")
}

/// `x = T^-1(chi)` for `count` latent draws; rows of the result are samples.
pub fn sample_posterior(filter: &TrainedFilter, belief: &GaussianBelief, count: usize, seed: u64) -> Result<Tensor> {
    let chi = sample_latent(belief, count, seed);
    if count == 0 {
        return Ok(chi);
    }
    let t = filter.model.state_flow();
    let store = &filter.params;
    let m = belief.dim();
    let pieces: Result<Vec<Tensor>> = chi
        .data()
        .par_chunks(SAMPLE_CHUNK * m)
        .map(|c| t.inverse_batch(store, &Tensor::matrix(c.len() / m, m, c.to_vec())?))
        .collect();
    let data: Vec<f64> = pieces?.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::matrix(count, m, data)
}

/// Seed for the draws at step `k` of a run rooted at `seed`.
pub fn step_seed(seed: u64, k: usize) -> u64 {
    rng::derive_seed(seed, "step", k as u64)
}

/// Posterior samples for steps `1..=K` of a run, laid out `[k][j][i]`.
/// Step `k` uses [`step_seed`]`(seed, k)`.
pub fn sample_run(filter: &TrainedFilter, run: &FilterRun, count: usize, seed: u64) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(run.steps() * count * filter.model.state_dim());
    for (k, belief) in run.beliefs.iter().enumerate().skip(1) {
        out.extend(sample_posterior(filter, belief, count, step_seed(seed, k))?.into_data());
    }
    Ok(out)
}

/// Full-covariance Gaussian log-density.
pub fn gaussian_log_pdf(mean: &DVector<f64>, cov: &DMatrix<f64>, z: &DVector<f64>) -> Result<f64> {
    let chol = cholesky_jittered(cov)?;
    let d = z - mean;
    let w = chol.l().solve_lower_triangular(&d).ok_or_else(|| Error::Singular("triangular solve".into()))?;
    let logdet: f64 = chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
    Ok(-0.5 * (mean.len() as f64 * LN_2PI + logdet + w.norm_squared()))
}

/// `ln N(T(x) | mu, Sigma) + ln|det dT/dx|`.
pub fn posterior_logdensity(filter: &TrainedFilter, belief: &GaussianBelief, x: &[f64]) -> Result<f64> {
    let (z, logdet) = filter.model.state_flow().forward_point(&filter.params, x)?;
    Ok(gaussian_log_pdf(&belief.mean, &belief.cov, &DVector::from_vec(z))? + logdet)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent_ssm::ObservationCoefficients;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    fn obs(c: DVector<f64>, d: DMatrix<f64>, q: DMatrix<f64>) -> ObservationCoefficients {
        ObservationCoefficients { c, d, q_gamma: q }
    }

    #[test]
    fn scalar_conjugate_update() {
        let b = GaussianBelief::new(DVector::zeros(1), scalar(1.0)).unwrap();
        let o = obs(DVector::zeros(1), scalar(1.0), scalar(1.0));
        let post = measurement_update(&b, &DVector::from_element(1, 2.0), &o, Conditioning::Exact).unwrap();
        assert!((post.mean[0] - 1.0).abs() < 1e-15);
        assert!((post.cov[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn as_printed_differs_when_measurement_is_informative() {
        let b = GaussianBelief::new(DVector::zeros(1), scalar(1.0)).unwrap();
        let o = obs(DVector::zeros(1), scalar(1.0), scalar(1.0));
        let post = measurement_update(&b, &DVector::from_element(1, 2.0), &o, Conditioning::AsPrinted).unwrap();
        // gain 1, covariance 1 - 1 = 0
        assert!((post.mean[0] - 2.0).abs() < 1e-15);
        assert!(post.cov[(0, 0)].abs() < 1e-15);
    }

    #[test]
    fn zero_d_leaves_belief_unchanged() {
        let b = GaussianBelief::new(
            DVector::from_vec(vec![1.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        let o = obs(DVector::from_vec(vec![0.5, 0.5]), DMatrix::zeros(2, 2), DMatrix::identity(2, 2));
        let post = measurement_update(&b, &DVector::from_vec(vec![9.0, 9.0]), &o, Conditioning::Exact).unwrap();
        assert_eq!(post, b);
    }

    #[test]
    fn propagation_examples() {
        let b = GaussianBelief::new(DVector::from_element(1, 1.0), scalar(1.0)).unwrap();
        let tr = TransitionCoefficients {
            a: DVector::from_element(1, 1.0),
            b: scalar(2.0),
            q_chi: scalar(3.0),
        };
        let next = state_propagate(&b, &tr).unwrap();
        assert_eq!(next.mean[0], 3.0);
        assert_eq!(next.cov[(0, 0)], 7.0);
        let id = TransitionCoefficients {
            a: DVector::zeros(1),
            b: scalar(1.0),
            q_chi: scalar(0.0),
        };
        assert_eq!(state_propagate(&b, &id).unwrap(), b);
    }

    fn scalar_prime(h: f64) -> FbfPrimeParams {
        FbfPrimeParams {
            e: DVector::zeros(1),
            f: scalar(1.0),
            g: DVector::zeros(1),
            h: scalar(h),
            p_chi: scalar(1.0),
            p_gamma: scalar(1.0),
        }
    }

    #[test]
    fn textbook_kalman_step() {
        let b = GaussianBelief::new(DVector::zeros(1), scalar(1.0)).unwrap();
        let next = kalman_step(&b, &DVector::from_element(1, 2.0), &scalar_prime(1.0)).unwrap();
        assert!((next.mean[0] - 4.0 / 3.0).abs() < 1e-15);
        assert!((next.cov[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn kalman_without_observation_predicts() {
        let b = GaussianBelief::new(DVector::from_element(1, 0.7), scalar(0.4)).unwrap();
        let next = kalman_step(&b, &DVector::from_element(1, 5.0), &scalar_prime(0.0)).unwrap();
        assert_eq!(next.mean[0], 0.7);
        assert!((next.cov[(0, 0)] - 1.4).abs() < 1e-15);
    }

    #[test]
    fn gain_and_information_forms_agree() {
        let b = GaussianBelief::new(
            DVector::from_vec(vec![0.2, -0.4]),
            DMatrix::from_row_slice(2, 2, &[1.5, 0.4, 0.4, 0.8]),
        )
        .unwrap();
        let o = obs(
            DVector::from_vec(vec![0.1, 0.0]),
            DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 2.0]),
            DMatrix::from_row_slice(2, 2, &[0.6, 0.0, 0.0, 0.9]),
        );
        let gamma = DVector::from_vec(vec![1.0, -1.0]);
        let a = measurement_update(&b, &gamma, &o, Conditioning::Exact).unwrap();
        let c = measurement_update_information(&b, &gamma, &o).unwrap();
        assert!((a.mean - c.mean).amax() < 1e-12);
        assert!((a.cov - c.cov).amax() < 1e-12);
    }

    #[test]
    fn jitter_rescues_singular_matrix() {
        let a = DMatrix::zeros(2, 2);
        let c = cholesky_jittered(&a).unwrap();
        assert!((c.l()[(0, 0)] - 1e-6).abs() < 1e-12);
        let neg = DMatrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, 1.0]);
        assert!(matches!(cholesky_jittered(&neg), Err(Error::Singular(_))));
    }

    #[test]
    fn degenerate_draws_equal_mean() {
        let b = GaussianBelief::new(DVector::from_vec(vec![1.0, 2.0]), DMatrix::zeros(2, 2)).unwrap();
        let s = sample_latent(&b, 50, 3);
        for r in 0..50 {
            assert_eq!(s.row(r), &[1.0, 2.0]);
        }
    }

    #[test]
    fn latent_draws_are_seeded() {
        let b = GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        assert_eq!(sample_latent(&b, 3000, 4), sample_latent(&b, 3000, 4));
        assert_ne!(sample_latent(&b, 10, 4), sample_latent(&b, 10, 5));
    }

    #[test]
    fn gaussian_log_pdf_at_mode() {
        let mean = DVector::from_vec(vec![1.0, 2.0]);
        let v = gaussian_log_pdf(&mean, &DMatrix::identity(2, 2), &mean).unwrap();
        assert!((v + LN_2PI).abs() < 1e-14);
    }
}
