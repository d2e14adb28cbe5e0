//! RealNVP-style invertible transforms built from affine coupling blocks.
//!
//! A block splits the coordinates into a passive set, copied through, and an
//! active set that is scaled and shifted by functions of the passive set:
//!
//! ```text
//! z_active = x_active * exp(s~(x_passive)) + t(x_passive),   s~ = c * tanh(s / c)
//! ```
//!
//! so the log-det-Jacobian is the row sum of `s~`. Blocks alternate between
//! passive = even indices and passive = odd indices. Every flow starts with a
//! fixed per-coordinate standardization `(x - loc) / scale`, which is the
//! identity unless it has been fitted to data.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParameterStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Mlp, OutputInit};
use crate::rng::Rng;

pub const DEFAULT_CLAMP: f64 = 2.0;

/// Architecture of one flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub blocks: usize,
    /// Linear layers in each coupling conditioner.
    pub layers: usize,
    pub units: usize,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default = "default_clamp")]
    pub clamp: f64,
}

fn default_clamp() -> f64 {
    DEFAULT_CLAMP
}

impl Default for FlowConfig {
    fn default() -> Self {
        FlowConfig {
            blocks: 6,
            layers: 3,
            units: 64,
            activation: Activation::Relu,
            clamp: DEFAULT_CLAMP,
        }
    }
}

/// Initialization of the conditioner output layers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FlowInit {
    /// Zero output layers: the flow is the identity.
    Identity,
    /// Random output layers with the given scale relative to Kaiming-uniform.
    Random(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingBlock {
    passive: Vec<usize>,
    active: Vec<usize>,
    /// Maps `[passive.., active..]` back to coordinate order.
    restore: Vec<usize>,
    net: Mlp,
    clamp: f64,
}

impl CouplingBlock {
    pub fn new(dim: usize, parity: usize, net_prefix: String, config: &FlowConfig) -> Result<Self> {
        if dim < 2 {
            return Err(Error::invalid(format!("coupling needs dim >= 2, got {dim}")));
        }
        if !(config.clamp > 0.0) {
            return Err(Error::invalid("coupling clamp must be positive"));
        }
        let (passive, active): (Vec<usize>, Vec<usize>) =
            (0..dim).partition(|i| i % 2 == parity % 2);
        let mut restore = vec![0; dim];
        for (pos, &coord) in passive.iter().chain(&active).enumerate() {
            restore[coord] = pos;
        }
        let net = Mlp::new(
            net_prefix,
            passive.len(),
            config.units,
            config.layers,
            2 * active.len(),
            config.activation,
        )?;
        Ok(CouplingBlock {
            passive,
            active,
            restore,
            net,
            clamp: config.clamp,
        })
    }

    pub fn passive(&self) -> &[usize] {
        &self.passive
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn net(&self) -> &Mlp {
        &self.net
    }

    pub fn clamp(&self) -> f64 {
        self.clamp
    }

    fn scale_shift(&self, g: &mut Graph<'_>, passive: Var) -> Result<(Var, Var)> {
        let h = self.net.forward(g, passive)?;
        let (s, t) = g.split(h, self.active.len())?;
        let s = g.scale(s, 1.0 / self.clamp)?;
        let s = g.tanh(s)?;
        let s = g.scale(s, self.clamp)?;
        Ok((s, t))
    }

    /// Returns `(z, logdet)` with `logdet` of shape `[rows, 1]`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Var)> {
        let xp = g.select_cols(x, &self.passive)?;
        let xa = g.select_cols(x, &self.active)?;
        let (s, t) = self.scale_shift(g, xp)?;
        let e = g.exp(s)?;
        let za = g.mul(xa, e)?;
        let za = g.add(za, t)?;
        let cat = g.concat(xp, za)?;
        let z = g.select_cols(cat, &self.restore)?;
        let logdet = g.sum_rows(s)?;
        Ok((z, logdet))
    }

    pub fn inverse(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        let zp = g.select_cols(z, &self.passive)?;
        let za = g.select_cols(z, &self.active)?;
        let (s, t) = self.scale_shift(g, zp)?;
        let diff = g.sub(za, t)?;
        let neg = g.scale(s, -1.0)?;
        let e = g.exp(neg)?;
        let xa = g.mul(diff, e)?;
        let cat = g.concat(zp, xa)?;
        g.select_cols(cat, &self.restore)
    }
}

/// An invertible map on `R^dim`: standardization followed by coupling blocks.
/// Parameter values live in a [`ParameterStore`] under `prefix`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTransform {
    prefix: String,
    dim: usize,
    blocks: Vec<CouplingBlock>,
}

impl FlowTransform {
    pub fn new(prefix: impl Into<String>, dim: usize, config: &FlowConfig) -> Result<Self> {
        let prefix = prefix.into();
        if dim < 2 {
            return Err(Error::invalid(format!("flow dimension must be >= 2, got {dim}")));
        }
        let blocks = (0..config.blocks)
            .map(|b| CouplingBlock::new(dim, b, format!("{prefix}.block{b}"), config))
            .collect::<Result<Vec<_>>>()?;
        Ok(FlowTransform { prefix, dim, blocks })
    }

    /// Builds a flow from explicit blocks (e.g. hand-constructed test maps).
    pub fn from_blocks(prefix: impl Into<String>, dim: usize, blocks: Vec<CouplingBlock>) -> Self {
        FlowTransform {
            prefix: prefix.into(),
            dim,
            blocks,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn blocks(&self) -> &[CouplingBlock] {
        &self.blocks
    }

    pub fn loc_name(&self) -> String {
        format!("{}.norm.loc", self.prefix)
    }

    pub fn scale_name(&self) -> String {
        format!("{}.norm.scale", self.prefix)
    }

    pub fn register(&self, store: &mut ParameterStore, rng: &mut Rng, init: FlowInit) -> Result<()> {
        store.insert(self.loc_name(), Tensor::zeros(&[self.dim]), false)?;
        store.insert(self.scale_name(), Tensor::full(&[self.dim], 1.0), false)?;
        let last = match init {
            FlowInit::Identity => OutputInit::Zero,
            FlowInit::Random(s) => OutputInit::Random(s),
        };
        for b in &self.blocks {
            b.net.register(store, rng, &last)?;
        }
        Ok(())
    }

    /// Sets the standardization from per-coordinate mean and standard
    /// deviation (floored at 1e-6).
    pub fn set_standardization(&self, store: &mut ParameterStore, loc: &[f64], scale: &[f64]) -> Result<()> {
        if loc.len() != self.dim || scale.len() != self.dim {
            return Err(Error::shape("set_standardization", "length differs from flow dim"));
        }
        store.set(&self.loc_name(), Tensor::vector(loc.to_vec()))?;
        store.set(
            &self.scale_name(),
            Tensor::vector(scale.iter().map(|s| s.max(1e-6)).collect()),
        )
    }

    fn standardization(&self, store: &ParameterStore) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((
            store.value(&self.loc_name())?.data().to_vec(),
            store.value(&self.scale_name())?.data().to_vec(),
        ))
    }

    fn check_cols(&self, g: &Graph<'_>, x: Var) -> Result<()> {
        let c = g.value(x).cols();
        if c != self.dim {
            return Err(Error::shape(
                "flow",
                format!("expected {} columns, got {c}", self.dim),
            ));
        }
        Ok(())
    }

    /// Forward map on a batch `[rows, dim]`; returns `(z, logdet [rows, 1])`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<(Var, Var)> {
        self.check_cols(g, x)?;
        let rows = g.value(x).rows();
        let (loc, scale) = self.standardization(g.params())?;
        let neg_loc = g.constant(Tensor::vector(loc.iter().map(|v| -v).collect()))?;
        let inv_scale = g.constant(diag(&scale.iter().map(|s| 1.0 / s).collect::<Vec<_>>()))?;
        let centered = g.add_row(x, neg_loc)?;
        let mut z = g.matmul(centered, inv_scale)?;
        let base: f64 = -scale.iter().map(|s| s.ln()).sum::<f64>();
        let mut logdet = g.constant(Tensor::full(&[rows, 1], base))?;
        for b in &self.blocks {
            let (zn, ld) = b.forward(g, z)?;
            z = zn;
            logdet = g.add(logdet, ld)?;
        }
        Ok((z, logdet))
    }

    pub fn inverse(&self, g: &mut Graph<'_>, z: Var) -> Result<Var> {
        self.check_cols(g, z)?;
        let (loc, scale) = self.standardization(g.params())?;
        let mut x = z;
        for b in self.blocks.iter().rev() {
            x = b.inverse(g, x)?;
        }
        let sc = g.constant(diag(&scale))?;
        let x = g.matmul(x, sc)?;
        let loc = g.constant(Tensor::vector(loc))?;
        g.add_row(x, loc)
    }

    /// Forward map on plain data (no gradients). Returns `(z, logdet per row)`.
    pub fn forward_batch(&self, store: &ParameterStore, x: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new(store);
        let xv = g.constant(x.clone())?;
        let (z, ld) = self.forward(&mut g, xv)?;
        Ok((g.value(z).clone(), g.value(ld).data().to_vec()))
    }

    pub fn inverse_batch(&self, store: &ParameterStore, z: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(store);
        let zv = g.constant(z.clone())?;
        let x = self.inverse(&mut g, zv)?;
        Ok(g.value(x).clone())
    }

    pub fn forward_point(&self, store: &ParameterStore, x: &[f64]) -> Result<(Vec<f64>, f64)> {
        let (z, ld) = self.forward_batch(store, &Tensor::matrix(1, x.len(), x.to_vec())?)?;
        Ok((z.into_data(), ld[0]))
    }

    pub fn inverse_point(&self, store: &ParameterStore, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .inverse_batch(store, &Tensor::matrix(1, z.len(), z.to_vec())?)?
            .into_data())
    }

    /// Change-of-variables log-density `base_log_pdf(T(x)) + log|det dT/dx|`.
    pub fn log_density(
        &self,
        store: &ParameterStore,
        base_log_pdf: impl Fn(&[f64]) -> f64,
        x: &[f64],
    ) -> Result<f64> {
        let (z, ld) = self.forward_point(store, x)?;
        Ok(base_log_pdf(&z) + ld)
    }
}

pub(crate) fn diag(values: &[f64]) -> Tensor {
    let n = values.len();
    let mut data = vec![0.0; n * n];
    for (i, v) in values.iter().enumerate() {
        data[i * n + i] = *v;
    }
    Tensor::matrix(n, n, data).expect("non-empty diagonal")
}

/// Standard normal log-density in any dimension.
pub fn standard_normal_log_pdf(z: &[f64]) -> f64 {
    let d = z.len() as f64;
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + z.iter().map(|v| v * v).sum::<f64>())
}

/// Convenience: a seeded random batch of standard normal rows.
pub fn normal_batch(rng: &mut Rng, rows: usize, cols: usize, sd: f64) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| sd * rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive extents")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn flow(dim: usize, blocks: usize, init: FlowInit, seed: u64) -> (FlowTransform, ParameterStore) {
        let cfg = FlowConfig {
            blocks,
            layers: 3,
            units: 16,
            ..FlowConfig::default()
        };
        let f = FlowTransform::new("T", dim, &cfg).unwrap();
        let mut store = ParameterStore::new();
        f.register(&mut store, &mut rng::from_seed(seed), init).unwrap();
        (f, store)
    }

    #[test]
    fn masks_alternate_and_cover_every_coordinate() {
        let (f, _) = flow(5, 2, FlowInit::Identity, 0);
        assert_eq!(f.blocks()[0].passive(), &[0, 2, 4]);
        assert_eq!(f.blocks()[0].active(), &[1, 3]);
        assert_eq!(f.blocks()[1].passive(), &[1, 3]);
        assert_eq!(f.blocks()[1].active(), &[0, 2, 4]);
    }

    #[test]
    fn dimension_one_rejected() {
        assert!(FlowTransform::new("T", 1, &FlowConfig::default()).is_err());
    }

    #[test]
    fn identity_at_initialization() {
        let (f, store) = flow(3, 4, FlowInit::Identity, 1);
        let x = [0.3, -1.7, 2.5];
        let (z, ld) = f.forward_point(&store, &x).unwrap();
        assert_eq!(z, x);
        assert_eq!(ld, 0.0);
        let lp = f.log_density(&store, standard_normal_log_pdf, &x).unwrap();
        assert_eq!(lp, standard_normal_log_pdf(&x));
    }

    #[test]
    fn empty_flow_is_identity() {
        let (f, store) = flow(2, 0, FlowInit::Identity, 0);
        let (z, ld) = f.forward_point(&store, &[4.0, -2.0]).unwrap();
        assert_eq!(z, vec![4.0, -2.0]);
        assert_eq!(ld, 0.0);
        assert_eq!(f.inverse_point(&store, &[4.0, -2.0]).unwrap(), vec![4.0, -2.0]);
    }

    #[test]
    fn standard_normal_at_mode() {
        let (f, store) = flow(2, 2, FlowInit::Identity, 0);
        let lp = f.log_density(&store, standard_normal_log_pdf, &[0.0, 0.0]).unwrap();
        assert!((lp + (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    /// Block with constant s~ = ln 2 and t = 1 on coordinate 2.
    fn doubling_block() -> (FlowTransform, ParameterStore) {
        let cfg = FlowConfig {
            blocks: 1,
            layers: 2,
            units: 4,
            ..FlowConfig::default()
        };
        let f = FlowTransform::new("T", 2, &cfg).unwrap();
        let mut store = ParameterStore::new();
        let s_raw = cfg.clamp * (2f64.ln() / cfg.clamp).atanh();
        f.register(&mut store, &mut rng::from_seed(0), FlowInit::Identity).unwrap();
        store
            .set("T.block0.l1.b", Tensor::vector(vec![s_raw, 1.0]))
            .unwrap();
        (f, store)
    }

    #[test]
    fn closed_form_affine_block() {
        let (f, store) = doubling_block();
        let (z, ld) = f.forward_point(&store, &[0.7, 1.5]).unwrap();
        assert!((z[0] - 0.7).abs() < 1e-15);
        assert!((z[1] - 4.0).abs() < 1e-14);
        assert!((ld - 2f64.ln()).abs() < 1e-15);
        let x = f.inverse_point(&store, &[0.7, 4.0]).unwrap();
        assert!((x[0] - 0.7).abs() < 1e-15 && (x[1] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn pure_shift_has_zero_logdet() {
        let (f, mut store) = flow(2, 1, FlowInit::Identity, 0);
        store.set("T.block0.l2.b", Tensor::vector(vec![0.0, 0.8])).unwrap();
        let (z, ld) = f.forward_point(&store, &[0.1, 0.2]).unwrap();
        assert_eq!(ld, 0.0);
        assert!((z[1] - 1.0).abs() < 1e-15);
        // log N(x | -mu) for the shifted coordinate
        let lp = f.log_density(&store, standard_normal_log_pdf, &[0.1, 0.2]).unwrap();
        assert!((lp - standard_normal_log_pdf(&[0.1, 1.0])).abs() < 1e-15);
    }

    #[test]
    fn block_composed_with_its_inverse_is_identity() {
        // A block followed by its analytic inverse: identity, and the
        // inverse contributes -logdet.
        let (f, store) = flow(2, 3, FlowInit::Random(0.5), 11);
        let x = Tensor::matrix(1, 2, vec![0.4, -0.9]).unwrap();
        let mut g = Graph::new(&store);
        let xv = g.constant(x.clone()).unwrap();
        let b = &f.blocks()[1];
        let (z, ld) = b.forward(&mut g, xv).unwrap();
        let back = b.inverse(&mut g, z).unwrap();
        let d: f64 = g
            .value(back)
            .data()
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(d < 1e-14);
        assert!(g.value(ld).item().is_finite());
    }

    #[test]
    fn standardization_is_affine_with_constant_logdet() {
        let (f, mut store) = flow(2, 0, FlowInit::Identity, 0);
        f.set_standardization(&mut store, &[1.0, -2.0], &[2.0, 0.5]).unwrap();
        let (z, ld) = f.forward_point(&store, &[3.0, -1.0]).unwrap();
        assert_eq!(z, vec![1.0, 2.0]);
        assert!((ld - (-(2f64.ln()) - 0.5f64.ln())).abs() < 1e-15);
        let x = f.inverse_point(&store, &z).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-15 && (x[1] + 1.0).abs() < 1e-15);
    }
}
