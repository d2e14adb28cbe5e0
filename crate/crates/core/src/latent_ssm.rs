//! Latent linear-Gaussian state-space models and their conditional
//! log-densities.
//!
//! FBF latent model, with `chi = T(x)` and `gamma = V(y)`:
//!
//! ```text
//! chi_k   = A(gamma_k) + B(gamma_k) chi_{k-1} + eps,   eps ~ N(0, Q_chi(gamma_k))
//! gamma_k = C + D chi_{k-1} + nu,                      nu  ~ N(0, Q_gamma)
//! ```
//!
//! FBF' latent model (classical linear SSM):
//!
//! ```text
//! chi_k   = E + F chi_{k-1} + zeta,   zeta ~ N(0, P_chi)
//! gamma_k = G + H chi_k + xi,         xi   ~ N(0, P_gamma)
//! ```
//!
//! All covariances are diagonal with softplus-transformed entries.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Graph, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::flows::FlowTransform;
use crate::nn::{Activation, Mlp, OutputInit};
use crate::rng::Rng;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Architecture of the conditioner networks A, B and Q_chi.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionerConfig {
    pub layers: usize,
    pub units: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for ConditionerConfig {
    fn default() -> Self {
        ConditionerConfig {
            layers: 6,
            units: 64,
            activation: Activation::Relu,
        }
    }
}

/// Transition coefficients `(A, B, Q_chi)` for one latent measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionCoefficients {
    pub a: DVector<f64>,
    pub b: DMatrix<f64>,
    pub q_chi: DMatrix<f64>,
}

/// Observation coefficients `(C, D, Q_gamma)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationCoefficients {
    pub c: DVector<f64>,
    pub d: DMatrix<f64>,
    pub q_gamma: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FbfLatentModel {
    m: usize,
    n: usize,
    net_a: Mlp,
    net_b: Mlp,
    net_q: Mlp,
}

impl FbfLatentModel {
    pub const C: &'static str = "latent.c";
    pub const D: &'static str = "latent.d";
    pub const Q_GAMMA: &'static str = "latent.q_gamma";

    pub fn new(m: usize, n: usize, cfg: &ConditionerConfig) -> Result<Self> {
        let mk = |name: &str, out: usize| {
            Mlp::new(format!("latent.{name}"), n, cfg.units, cfg.layers, out, cfg.activation)
        };
        Ok(FbfLatentModel {
            m,
            n,
            net_a: mk("net_a", m)?,
            net_b: mk("net_b", m * m)?,
            net_q: mk("net_q", m)?,
        })
    }

    pub fn state_dim(&self) -> usize {
        self.m
    }

    pub fn meas_dim(&self) -> usize {
        self.n
    }

    /// A starts at 0, B at the identity, Q_chi and Q_gamma at softplus(0),
    /// C and D at 0.
    pub fn register(&self, store: &mut ParameterStore, rng: &mut Rng) -> Result<()> {
        let m = self.m;
        let eye: Vec<f64> = (0..m * m).map(|i| if i / m == i % m { 1.0 } else { 0.0 }).collect();
        self.net_a.register(store, rng, &OutputInit::Zero)?;
        self.net_b.register(store, rng, &OutputInit::Bias(eye))?;
        self.net_q.register(store, rng, &OutputInit::Zero)?;
        store.insert(Self::C, Tensor::zeros(&[self.n]), true)?;
        store.insert(Self::D, Tensor::zeros(&[self.n, m]), true)?;
        store.insert(Self::Q_GAMMA, Tensor::zeros(&[self.n]), true)?;
        Ok(())
    }

    pub fn nets(&self) -> [&Mlp; 3] {
        [&self.net_a, &self.net_b, &self.net_q]
    }

    /// Batched conditioners: `A [rows, m]`, `B [rows, m*m]` (row-major m x m
    /// per row) and the diagonal of `Q_chi` `[rows, m]`.
    pub fn conditioners(&self, g: &mut Graph<'_>, gamma: Var) -> Result<(Var, Var, Var)> {
        let a = self.net_a.forward(g, gamma)?;
        let b = self.net_b.forward(g, gamma)?;
        let q = self.net_q.forward(g, gamma)?;
        let q = g.softplus(q)?;
        Ok((a, b, q))
    }

    /// `log N(chi | A + B chi_prev, Q_chi)` per row, conditioners at `gamma`.
    pub fn transition_log_pdf(&self, g: &mut Graph<'_>, chi_prev: Var, chi: Var, gamma: Var) -> Result<Var> {
        let (a, b, q) = self.conditioners(g, gamma)?;
        let bx = batched_matvec(g, b, chi_prev, self.m)?;
        let mean = g.add(a, bx)?;
        diag_gaussian_log_pdf(g, chi, mean, q)
    }

    /// `log N(gamma | C + D chi_prev, Q_gamma)` per row.
    pub fn observation_log_pdf(&self, g: &mut Graph<'_>, chi_prev: Var, gamma: Var) -> Result<Var> {
        let c = g.param(Self::C)?;
        let d = g.param(Self::D)?;
        let q = g.param(Self::Q_GAMMA)?;
        let dt = g.transpose(d)?;
        let dx = g.matmul(chi_prev, dt)?;
        let mean = g.add_row(dx, c)?;
        let rows = g.value(gamma).rows();
        let var = broadcast_softplus(g, q, rows)?;
        diag_gaussian_log_pdf(g, gamma, mean, var)
    }

    pub fn eval_conditioners(&self, store: &ParameterStore, gamma: &[f64]) -> Result<TransitionCoefficients> {
        if gamma.len() != self.n {
            return Err(Error::shape("eval_conditioners", "gamma length differs from n"));
        }
        let mut g = Graph::new(store);
        let gv = g.constant(Tensor::matrix(1, self.n, gamma.to_vec())?)?;
        let (a, b, q) = self.conditioners(&mut g, gv)?;
        let m = self.m;
        Ok(TransitionCoefficients {
            a: DVector::from_column_slice(g.value(a).data()),
            b: DMatrix::from_row_slice(m, m, g.value(b).data()),
            q_chi: DMatrix::from_diagonal(&DVector::from_column_slice(g.value(q).data())),
        })
    }

    pub fn observation(&self, store: &ParameterStore) -> Result<ObservationCoefficients> {
        let c = store.value(Self::C)?.data();
        let d = store.value(Self::D)?.data();
        let q = store.value(Self::Q_GAMMA)?.data();
        Ok(ObservationCoefficients {
            c: DVector::from_column_slice(c),
            d: DMatrix::from_row_slice(self.n, self.m, d),
            q_gamma: DMatrix::from_diagonal(&DVector::from_iterator(
                self.n,
                q.iter().map(|&v| softplus(v)),
            )),
        })
    }
}

/// FBF' parameters in matrix form. Covariances are the softplus-transformed
/// diagonals.
#[derive(Debug, Clone, PartialEq)]
pub struct FbfPrimeParams {
    pub e: DVector<f64>,
    pub f: DMatrix<f64>,
    pub g: DVector<f64>,
    pub h: DMatrix<f64>,
    pub p_chi: DMatrix<f64>,
    pub p_gamma: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FbfPrimeLatentModel {
    m: usize,
    n: usize,
}

impl FbfPrimeLatentModel {
    pub const E: &'static str = "latent.e";
    pub const F: &'static str = "latent.f";
    pub const G: &'static str = "latent.g";
    pub const H: &'static str = "latent.h";
    pub const P_CHI: &'static str = "latent.p_chi";
    pub const P_GAMMA: &'static str = "latent.p_gamma";

    pub fn new(m: usize, n: usize) -> Self {
        FbfPrimeLatentModel { m, n }
    }

    pub fn state_dim(&self) -> usize {
        self.m
    }

    pub fn meas_dim(&self) -> usize {
        self.n
    }

    /// E = 0, F = I, G = 0, H = 0, pre-softplus covariances 0.
    pub fn register(&self, store: &mut ParameterStore) -> Result<()> {
        let (m, n) = (self.m, self.n);
        let eye: Vec<f64> = (0..m * m).map(|i| if i / m == i % m { 1.0 } else { 0.0 }).collect();
        store.insert(Self::E, Tensor::zeros(&[m]), true)?;
        store.insert(Self::F, Tensor::matrix(m, m, eye)?, true)?;
        store.insert(Self::G, Tensor::zeros(&[n]), true)?;
        store.insert(Self::H, Tensor::zeros(&[n, m]), true)?;
        store.insert(Self::P_CHI, Tensor::zeros(&[m]), true)?;
        store.insert(Self::P_GAMMA, Tensor::zeros(&[n]), true)?;
        Ok(())
    }

    /// `log N(chi | E + F chi_prev, P_chi)` per row.
    pub fn transition_log_pdf(&self, g: &mut Graph<'_>, chi_prev: Var, chi: Var) -> Result<Var> {
        let e = g.param(Self::E)?;
        let f = g.param(Self::F)?;
        let p = g.param(Self::P_CHI)?;
        let ft = g.transpose(f)?;
        let fx = g.matmul(chi_prev, ft)?;
        let mean = g.add_row(fx, e)?;
        let rows = g.value(chi).rows();
        let var = broadcast_softplus(g, p, rows)?;
        diag_gaussian_log_pdf(g, chi, mean, var)
    }

    /// `log N(gamma | G + H chi, P_gamma)` per row; conditions on the current
    /// latent state.
    pub fn observation_log_pdf(&self, g: &mut Graph<'_>, chi: Var, gamma: Var) -> Result<Var> {
        let gg = g.param(Self::G)?;
        let h = g.param(Self::H)?;
        let p = g.param(Self::P_GAMMA)?;
        let ht = g.transpose(h)?;
        let hx = g.matmul(chi, ht)?;
        let mean = g.add_row(hx, gg)?;
        let rows = g.value(gamma).rows();
        let var = broadcast_softplus(g, p, rows)?;
        diag_gaussian_log_pdf(g, gamma, mean, var)
    }

    pub fn params(&self, store: &ParameterStore) -> Result<FbfPrimeParams> {
        let (m, n) = (self.m, self.n);
        let diag_sp = |name: &str, k: usize| -> Result<DMatrix<f64>> {
            let v = store.value(name)?.data();
            Ok(DMatrix::from_diagonal(&DVector::from_iterator(
                k,
                v.iter().map(|&x| softplus(x)),
            )))
        };
        Ok(FbfPrimeParams {
            e: DVector::from_column_slice(store.value(Self::E)?.data()),
            f: DMatrix::from_row_slice(m, m, store.value(Self::F)?.data()),
            g: DVector::from_column_slice(store.value(Self::G)?.data()),
            h: DMatrix::from_row_slice(n, m, store.value(Self::H)?.data()),
            p_chi: diag_sp(Self::P_CHI, m)?,
            p_gamma: diag_sp(Self::P_GAMMA, n)?,
        })
    }
}

/// Either latent model variant.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentModel {
    Fbf(FbfLatentModel),
    FbfPrime(FbfPrimeLatentModel),
}

/// `-0.5 * sum_i (ln 2pi + ln var_i + (z_i - mean_i)^2 / var_i)` per row.
pub fn diag_gaussian_log_pdf(g: &mut Graph<'_>, z: Var, mean: Var, var: Var) -> Result<Var> {
    let d = g.value(z).cols();
    let diff = g.sub(z, mean)?;
    let sq = g.mul(diff, diff)?;
    let logv = g.log(var)?;
    let neg = g.scale(logv, -1.0)?;
    let prec = g.exp(neg)?;
    let maha = g.mul(sq, prec)?;
    let terms = g.add(maha, logv)?;
    let s = g.sum_rows(terms)?;
    let s = g.scale(s, -0.5)?;
    let c = g.constant(Tensor::vector(vec![-0.5 * d as f64 * LN_2PI]))?;
    g.add_row(s, c)
}

/// Row-wise `B_r x_r` where row `r` of `b` holds an `m x m` matrix row-major.
pub fn batched_matvec(g: &mut Graph<'_>, b: Var, x: Var, m: usize) -> Result<Var> {
    let rows = g.value(x).rows();
    let tile: Vec<usize> = (0..m * m).map(|i| i % m).collect();
    let tiled = g.select_cols(x, &tile)?;
    let prod = g.mul(b, tiled)?;
    let blocks = g.reshape(prod, &[rows * m, m])?;
    let sums = g.sum_rows(blocks)?;
    g.reshape(sums, &[rows, m])
}

fn broadcast_softplus(g: &mut Graph<'_>, raw: Var, rows: usize) -> Result<Var> {
    let sp = g.softplus(raw)?;
    let cols = g.value(sp).len();
    let zeros = g.constant(Tensor::zeros(&[rows, cols]))?;
    g.add_row(zeros, sp)
}

/// `f_s`: log p(x_k | x_{k-1}, y_k) for batches of rows.
pub fn f_s(
    g: &mut Graph<'_>,
    t: &FlowTransform,
    v: &FlowTransform,
    model: &FbfLatentModel,
    x_prev: Var,
    x: Var,
    y: Var,
) -> Result<Var> {
    let (chi_prev, _) = t.forward(g, x_prev)?;
    let (chi, ld) = t.forward(g, x)?;
    let (gamma, _) = v.forward(g, y)?;
    let lp = model.transition_log_pdf(g, chi_prev, chi, gamma)?;
    g.add(lp, ld)
}

/// `f_o`: log p(y_k | x_{k-1}).
pub fn f_o(
    g: &mut Graph<'_>,
    t: &FlowTransform,
    v: &FlowTransform,
    model: &FbfLatentModel,
    x_prev: Var,
    y: Var,
) -> Result<Var> {
    let (chi_prev, _) = t.forward(g, x_prev)?;
    let (gamma, ld) = v.forward(g, y)?;
    let lp = model.observation_log_pdf(g, chi_prev, gamma)?;
    g.add(lp, ld)
}

/// `f_s'`: log p(x_k | x_{k-1}) under the FBF' model.
pub fn f_s_prime(
    g: &mut Graph<'_>,
    t: &FlowTransform,
    model: &FbfPrimeLatentModel,
    x_prev: Var,
    x: Var,
) -> Result<Var> {
    let (chi_prev, _) = t.forward(g, x_prev)?;
    let (chi, ld) = t.forward(g, x)?;
    let lp = model.transition_log_pdf(g, chi_prev, chi)?;
    g.add(lp, ld)
}

/// `f_o'`: log p(y_k | x_k) under the FBF' model.
pub fn f_o_prime(
    g: &mut Graph<'_>,
    t: &FlowTransform,
    v: &FlowTransform,
    model: &FbfPrimeLatentModel,
    x: Var,
    y: Var,
) -> Result<Var> {
    let (chi, _) = t.forward(g, x)?;
    let (gamma, ld) = v.forward(g, y)?;
    let lp = model.observation_log_pdf(g, chi, gamma)?;
    g.add(lp, ld)
}

/// FBF' rewritten in FBF form. `A(gamma) = a_offset + gain * gamma`; the
/// other coefficients are constant.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvertedFbfPrime {
    pub a_offset: DVector<f64>,
    pub gain: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub q_chi: DMatrix<f64>,
    pub observation: ObservationCoefficients,
}

impl ConvertedFbfPrime {
    pub fn transition(&self, gamma: &DVector<f64>) -> TransitionCoefficients {
        TransitionCoefficients {
            a: &self.a_offset + &self.gain * gamma,
            b: self.b.clone(),
            q_chi: self.q_chi.clone(),
        }
    }
}

/// Conditions the FBF' transition on the same-step measurement:
///
/// ```text
/// K' = P_chi H^T (H P_chi H^T + P_gamma)^-1
/// A  = E - K'(G + H E) + K' gamma      B = F - K' H F      Q_chi = (I - K' H) P_chi
/// C  = G + H E                         D = H F             Q_gamma = H P_chi H^T + P_gamma
/// ```
pub fn fbfprime_to_fbf(p: &FbfPrimeParams) -> Result<ConvertedFbfPrime> {
    let m = p.f.nrows();
    let s = &p.h * &p.p_chi * p.h.transpose() + &p.p_gamma;
    let chol = crate::filtering::cholesky_jittered(&s)?;
    // K' = P_chi H^T S^-1  =>  K'^T = S^-1 H P_chi
    let gain = chol.solve(&(&p.h * &p.p_chi)).transpose();
    let c = &p.g + &p.h * &p.e;
    let kh = &gain * &p.h;
    let eye = DMatrix::<f64>::identity(m, m);
    let q_chi = crate::filtering::symmetrize(&((&eye - &kh) * &p.p_chi));
    Ok(ConvertedFbfPrime {
        a_offset: &p.e - &gain * &c,
        b: &p.f - &kh * &p.f,
        q_chi,
        gain,
        observation: ObservationCoefficients {
            c,
            d: &p.h * &p.f,
            q_gamma: crate::filtering::symmetrize(&s),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{FlowConfig, FlowInit};
    use crate::rng;

    fn identity_flows(m: usize, n: usize, store: &mut ParameterStore) -> (FlowTransform, FlowTransform) {
        let cfg = FlowConfig {
            blocks: 2,
            layers: 2,
            units: 4,
            ..FlowConfig::default()
        };
        let t = FlowTransform::new("T", m, &cfg).unwrap();
        let v = FlowTransform::new("V", n, &cfg).unwrap();
        let mut r = rng::from_seed(0);
        t.register(store, &mut r, FlowInit::Identity).unwrap();
        v.register(store, &mut r, FlowInit::Identity).unwrap();
        (t, v)
    }

    fn small_cfg() -> ConditionerConfig {
        ConditionerConfig {
            layers: 2,
            units: 8,
            activation: Activation::Relu,
        }
    }

    #[test]
    fn initial_conditioners() {
        let model = FbfLatentModel::new(2, 3, &small_cfg()).unwrap();
        let mut store = ParameterStore::new();
        model.register(&mut store, &mut rng::from_seed(4)).unwrap();
        let co = model.eval_conditioners(&store, &[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(co.a, DVector::zeros(2));
        assert_eq!(co.b, DMatrix::identity(2, 2));
        let sp0 = 2f64.ln();
        assert!((co.q_chi[(0, 0)] - sp0).abs() < 1e-15 && co.q_chi[(0, 1)] == 0.0);
    }

    fn row(g: &mut Graph<'_>, v: &[f64]) -> Var {
        g.constant(Tensor::matrix(1, v.len(), v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn f_s_at_mode_with_identity_dynamics() {
        let mut store = ParameterStore::new();
        let (t, v) = identity_flows(2, 2, &mut store);
        let model = FbfLatentModel::new(2, 2, &small_cfg()).unwrap();
        model.register(&mut store, &mut rng::from_seed(1)).unwrap();
        // Q_chi = I needs softplus^-1(1) on the final bias of net_q
        let inv_sp1 = (1f64.exp() - 1.0).ln();
        store.set("latent.net_q.l1.b", Tensor::vector(vec![inv_sp1; 2])).unwrap();
        let mut g = Graph::new(&store);
        let xp = row(&mut g, &[0.4, -0.3]);
        let x = row(&mut g, &[0.4, -0.3]);
        let y = row(&mut g, &[1.0, 2.0]);
        let out = f_s(&mut g, &t, &v, &model, xp, x, y).unwrap();
        assert!((g.value(out).item() + LN_2PI).abs() < 1e-14);
    }

    #[test]
    fn f_s_scalar_closed_form() {
        // m = 1 is below the flow minimum, so embed in m = 2 with an
        // independent second coordinate and subtract its contribution.
        let mut store = ParameterStore::new();
        let (t, v) = identity_flows(2, 2, &mut store);
        let model = FbfLatentModel::new(2, 2, &small_cfg()).unwrap();
        model.register(&mut store, &mut rng::from_seed(1)).unwrap();
        let inv_sp1 = (1f64.exp() - 1.0).ln();
        store.set("latent.net_q.l1.b", Tensor::vector(vec![inv_sp1; 2])).unwrap();
        store
            .set("latent.net_b.l1.b", Tensor::vector(vec![0.5, 0.0, 0.0, 0.0]))
            .unwrap();
        let mut g = Graph::new(&store);
        let xp = row(&mut g, &[2.0, 0.0]);
        let x = row(&mut g, &[1.0, 0.0]);
        let y = row(&mut g, &[-3.0, 7.0]);
        let out = f_s(&mut g, &t, &v, &model, xp, x, y).unwrap();
        // ln N(1 | 1, 1) + ln N(0 | 0, 1)
        assert!((g.value(out).item() + LN_2PI).abs() < 1e-14);
    }

    #[test]
    fn f_o_closed_forms() {
        let mut store = ParameterStore::new();
        let (t, v) = identity_flows(2, 2, &mut store);
        let model = FbfLatentModel::new(2, 2, &small_cfg()).unwrap();
        model.register(&mut store, &mut rng::from_seed(1)).unwrap();
        let inv_sp = |v: f64| (v.exp() - 1.0).ln();
        store.set(FbfLatentModel::Q_GAMMA, Tensor::vector(vec![inv_sp(1.0); 2])).unwrap();
        {
            let mut g = Graph::new(&store);
            let xp = row(&mut g, &[3.0, 1.0]);
            let y = row(&mut g, &[0.0, 0.0]);
            let out = f_o(&mut g, &t, &v, &model, xp, y).unwrap();
            assert!((g.value(out).item() + LN_2PI).abs() < 1e-14);
        }
        // C = 1, D = [2], Qgamma = 4, x_prev = 1, y = 3 on coordinate 0
        store.set(FbfLatentModel::C, Tensor::vector(vec![1.0, 0.0])).unwrap();
        store
            .set(FbfLatentModel::D, Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 0.0]).unwrap())
            .unwrap();
        store
            .set(FbfLatentModel::Q_GAMMA, Tensor::vector(vec![inv_sp(4.0), inv_sp(1.0)]))
            .unwrap();
        let mut g = Graph::new(&store);
        let xp = row(&mut g, &[1.0, 0.0]);
        let y = row(&mut g, &[3.0, 0.0]);
        let out = f_o(&mut g, &t, &v, &model, xp, y).unwrap();
        let expected = -0.5 * (LN_2PI + 4f64.ln()) - 0.5 * LN_2PI;
        assert!((g.value(out).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn prime_densities_closed_form() {
        let mut store = ParameterStore::new();
        let (t, v) = identity_flows(2, 2, &mut store);
        let model = FbfPrimeLatentModel::new(2, 2);
        model.register(&mut store).unwrap();
        let inv_sp1 = (1f64.exp() - 1.0).ln();
        store.set(FbfPrimeLatentModel::P_CHI, Tensor::vector(vec![inv_sp1; 2])).unwrap();
        store.set(FbfPrimeLatentModel::P_GAMMA, Tensor::vector(vec![inv_sp1; 2])).unwrap();
        store.set(FbfPrimeLatentModel::E, Tensor::vector(vec![1.0, -1.0])).unwrap();
        let mut g = Graph::new(&store);
        let xp = row(&mut g, &[0.5, 0.5]);
        let x = row(&mut g, &[1.5, -0.5]);
        let fs = f_s_prime(&mut g, &t, &model, xp, x).unwrap();
        assert!((g.value(fs).item() + LN_2PI).abs() < 1e-14);
        // H = 0, G = 0: y at 0 is the mode regardless of x
        let y = row(&mut g, &[0.0, 0.0]);
        let fo = f_o_prime(&mut g, &t, &v, &model, x, y).unwrap();
        assert!((g.value(fo).item() + LN_2PI).abs() < 1e-14);
    }

    #[test]
    fn batched_matvec_matches_loop() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let b = g
            .constant(Tensor::matrix(2, 4, vec![1.0, 2.0, 3.0, 4.0, 0.0, 1.0, -1.0, 0.0]).unwrap())
            .unwrap();
        let x = g.constant(Tensor::matrix(2, 2, vec![1.0, 1.0, 2.0, 3.0]).unwrap()).unwrap();
        let y = batched_matvec(&mut g, b, x, 2).unwrap();
        assert_eq!(g.value(y).data(), &[3.0, 7.0, 3.0, -2.0]);
    }

    fn prime_params(m: usize, n: usize, h: DMatrix<f64>) -> FbfPrimeParams {
        FbfPrimeParams {
            e: DVector::from_fn(m, |i, _| 0.1 * i as f64),
            f: DMatrix::from_fn(m, m, |i, j| if i == j { 0.9 } else { 0.05 }),
            g: DVector::from_fn(n, |i, _| -0.2 * i as f64),
            h,
            p_chi: DMatrix::from_diagonal(&DVector::from_fn(m, |i, _| 0.5 + i as f64)),
            p_gamma: DMatrix::from_diagonal(&DVector::from_fn(n, |i, _| 0.3 + i as f64)),
        }
    }

    #[test]
    fn conversion_with_uninformative_observation() {
        let p = prime_params(3, 2, DMatrix::zeros(2, 3));
        let c = fbfprime_to_fbf(&p).unwrap();
        assert_eq!(c.gain, DMatrix::zeros(3, 2));
        assert_eq!(c.b, p.f);
        assert_eq!(c.q_chi, p.p_chi);
        assert_eq!(c.observation.c, p.g);
        assert_eq!(c.observation.d, DMatrix::zeros(2, 3));
        assert_eq!(c.observation.q_gamma, p.p_gamma);
        assert_eq!(c.a_offset, p.e);
    }

    #[test]
    fn conversion_scalar_algebra() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let p = FbfPrimeParams {
            e: DVector::zeros(1),
            f: one.clone(),
            g: DVector::zeros(1),
            h: one.clone(),
            p_chi: one.clone(),
            p_gamma: one,
        };
        let c = fbfprime_to_fbf(&p).unwrap();
        assert!((c.gain[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((c.b[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((c.q_chi[(0, 0)] - 0.5).abs() < 1e-15);
        assert_eq!(c.observation.d[(0, 0)], 1.0);
        assert_eq!(c.observation.q_gamma[(0, 0)], 2.0);
    }
}
