//! RMSE of the sample mean, MMD against the true state with a Gaussian
//! kernel, and CRPS per component.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default MMD kernel bandwidth.
pub const MMD_SIGMA: f64 = 2.0;

/// Posterior samples for one trajectory: `K` steps of `N` draws in `R^m`,
/// laid out `[k][j][i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub k: usize,
    pub n: usize,
    pub m: usize,
    pub data: Vec<f64>,
}

impl SampleSet {
    pub fn new(k: usize, n: usize, m: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != k * n * m {
            return Err(Error::shape("sample_set", format!("{} values for {k}x{n}x{m}", data.len())));
        }
        Ok(SampleSet { k, n, m, data })
    }

    pub fn step(&self, k: usize) -> &[f64] {
        &self.data[k * self.n * self.m..(k + 1) * self.n * self.m]
    }

    pub fn sample(&self, k: usize, j: usize) -> &[f64] {
        let s = self.step(k);
        &s[j * self.m..(j + 1) * self.m]
    }

    pub fn mean(&self, k: usize) -> Vec<f64> {
        let mut mu = vec![0.0; self.m];
        for j in 0..self.n {
            for (a, b) in mu.iter_mut().zip(self.sample(k, j)) {
                *a += b;
            }
        }
        mu.iter_mut().for_each(|v| *v /= self.n as f64);
        mu
    }
}

fn check(truth: &[f64], s: &SampleSet) -> Result<()> {
    if s.n == 0 {
        return Err(Error::invalid("metrics need at least one sample per step"));
    }
    if truth.len() != s.k * s.m {
        return Err(Error::shape(
            "metrics",
            format!("truth has {} values, samples cover {}x{}", truth.len(), s.k, s.m),
        ));
    }
    Ok(())
}

/// `sqrt( (1/(mK)) sum_k ||x_k - mean_j x_k^(j)||^2 )`. `truth` holds
/// `x_{1:K}` row-major.
pub fn rmse(truth: &[f64], s: &SampleSet) -> Result<f64> {
    check(truth, s)?;
    let mut acc = 0.0;
    for k in 0..s.k {
        let mu = s.mean(k);
        for (i, v) in mu.iter().enumerate() {
            let d = truth[k * s.m + i] - v;
            acc += d * d;
        }
    }
    Ok((acc / (s.m * s.k) as f64).sqrt())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// MMD at one step against a point mass at `truth`.
pub fn mmd_step(truth: &[f64], samples: &[f64], m: usize, sigma: f64) -> f64 {
    let n = samples.len() / m;
    let c = -0.5 / (sigma * sigma);
    let ker = |a: &[f64], b: &[f64]| (c * sq_dist(a, b)).exp();
    let mut within = 0.0;
    for i in 0..n {
        let xi = &samples[i * m..(i + 1) * m];
        // diagonal terms are exp(0) = 1; off-diagonal counted twice
        let mut row = 0.0;
        for j in (i + 1)..n {
            row += ker(xi, &samples[j * m..(j + 1) * m]);
        }
        within += 1.0 + 2.0 * row;
    }
    let cross: f64 = (0..n).map(|j| ker(&samples[j * m..(j + 1) * m], truth)).sum();
    let nf = n as f64;
    within / (nf * nf) - 2.0 * cross / nf + 1.0
}

/// Mean over steps of [`mmd_step`].
pub fn mmd(truth: &[f64], s: &SampleSet, sigma: f64) -> Result<f64> {
    check(truth, s)?;
    if !(sigma > 0.0) {
        return Err(Error::invalid("MMD bandwidth must be positive"));
    }
    let per: Vec<f64> = (0..s.k)
        .into_par_iter()
        .map(|k| mmd_step(&truth[k * s.m..(k + 1) * s.m], s.step(k), s.m, sigma))
        .collect();
    Ok(per.iter().sum::<f64>() / s.k as f64)
}

/// Scalar CRPS from the closed form
/// `(1/N) sum_j |x_j - t| - (1/(2N^2)) sum_{j,l} |x_j - x_l|`, using the sorted
/// identity `sum_{j,l} |x_j - x_l| = 2 sum_i (2i - N - 1) x_(i)`.
pub fn crps_scalar(truth: f64, values: &mut [f64]) -> f64 {
    let n = values.len() as f64;
    values.sort_by(f64::total_cmp);
    let mut abs_err = 0.0;
    let mut spread = 0.0;
    for (i, &v) in values.iter().enumerate() {
        abs_err += (v - truth).abs();
        spread += (2.0 * (i + 1) as f64 - n - 1.0) * v;
    }
    abs_err / n - spread / (n * n)
}

/// `(1/(mK)) sum_{k,i} CRPS_{k,i}`.
pub fn crps(truth: &[f64], s: &SampleSet) -> Result<f64> {
    check(truth, s)?;
    let per: Vec<f64> = (0..s.k)
        .into_par_iter()
        .map(|k| {
            let mut buf = vec![0.0; s.n];
            (0..s.m)
                .map(|i| {
                    for (j, b) in buf.iter_mut().enumerate() {
                        *b = s.sample(k, j)[i];
                    }
                    crps_scalar(truth[k * s.m + i], &mut buf)
                })
                .sum::<f64>()
        })
        .collect();
    Ok(per.iter().sum::<f64>() / (s.m * s.k) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Summary { mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub rmse: f64,
    pub mmd: f64,
    pub crps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_trajectory: Vec<TrajectoryMetrics>,
    pub rmse: Summary,
    pub mmd: Summary,
    pub crps: Summary,
}

impl MetricReport {
    pub fn from_rows(rows: Vec<TrajectoryMetrics>) -> Self {
        let col = |f: fn(&TrajectoryMetrics) -> f64| rows.iter().map(f).collect::<Vec<_>>();
        MetricReport {
            rmse: Summary::of(&col(|r| r.rmse)),
            mmd: Summary::of(&col(|r| r.mmd)),
            crps: Summary::of(&col(|r| r.crps)),
            per_trajectory: rows,
        }
    }
}

/// All three metrics for one trajectory.
pub fn evaluate(truth: &[f64], s: &SampleSet, sigma: f64) -> Result<TrajectoryMetrics> {
    Ok(TrajectoryMetrics {
        rmse: rmse(truth, s)?,
        mmd: mmd(truth, s, sigma)?,
        crps: crps(truth, s)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_samples_score_zero() {
        let truth = vec![1.0, 2.0, 3.0, 4.0];
        let data: Vec<f64> = (0..2).flat_map(|k| (0..3).flat_map(move |_| vec![truth_at(k, 0), truth_at(k, 1)])).collect();
        fn truth_at(k: usize, i: usize) -> f64 {
            [1.0, 2.0, 3.0, 4.0][k * 2 + i]
        }
        let s = SampleSet::new(2, 3, 2, data).unwrap();
        assert_eq!(rmse(&truth, &s).unwrap(), 0.0);
        assert!(mmd(&truth, &s, 2.0).unwrap().abs() < 1e-15);
        assert_eq!(crps(&truth, &s).unwrap(), 0.0);
    }

    #[test]
    fn single_sample_examples() {
        let s = SampleSet::new(1, 1, 1, vec![2.0]).unwrap();
        assert_eq!(rmse(&[0.0], &s).unwrap(), 2.0);
        assert_eq!(crps(&[0.0], &s).unwrap(), 2.0);
        let d: f64 = 2.0;
        let expected = 2.0 - 2.0 * (-d * d / 8.0).exp();
        assert!((mmd(&[0.0], &s, 2.0).unwrap() - expected).abs() < 1e-15);
        let far = SampleSet::new(1, 1, 1, vec![1e3]).unwrap();
        assert_eq!(mmd(&[0.0], &far, 2.0).unwrap(), 2.0);
    }

    #[test]
    fn crps_sorted_form_matches_pairs() {
        let vals: [f64; 5] = [0.3, -1.2, 2.5, 0.0, 0.7];
        let t: f64 = 0.4;
        let n = vals.len() as f64;
        let a: f64 = vals.iter().map(|v| (v - t).abs()).sum::<f64>() / n;
        let b: f64 = vals.iter().flat_map(|x| vals.iter().map(move |y| (x - y).abs())).sum::<f64>();
        let naive = a - b / (2.0 * n * n);
        let mut buf = vals.to_vec();
        assert!((crps_scalar(t, &mut buf) - naive).abs() < 1e-15);
    }

    #[test]
    fn shape_errors() {
        let s = SampleSet::new(2, 1, 1, vec![0.0, 0.0]).unwrap();
        assert!(rmse(&[0.0], &s).is_err());
        assert!(SampleSet::new(2, 2, 2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn summary_stats() {
        let s = Summary::of(&[1.0, 3.0]);
        assert_eq!(s.mean, 2.0);
        assert!((s.std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(Summary::of(&[5.0]).std, 0.0);
    }
}
