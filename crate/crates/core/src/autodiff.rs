//! Dense row-major tensors and a recording tape for reverse-mode
//! differentiation.
//!
//! The engine is deliberately small. Every op treats its operands as 2-D
//! (`rows x cols`, where `cols` is the extent of the last axis) and the only
//! broadcasts are scalar scaling and adding a bias row to every row of a
//! matrix. A [`Graph`] borrows a [`ParameterStore`] immutably while it
//! records; gradients come back keyed by parameter slot so the store can be
//! updated once the graph is dropped.

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("invalid extents {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![v; n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len().max(1);
        let data = if data.is_empty() { vec![0.0] } else { data };
        Tensor {
            shape: vec![n],
            data,
        }
    }

    /// Stacks equal-length rows into a `rows x cols` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::shape("from_rows", "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Tensor::matrix(rows.len(), cols, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all extents but the last.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn reshaped(mut self, shape: &[usize]) -> Tensor {
        self.shape = shape.to_vec();
        self
    }

    fn transposed(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Tensor {
            shape: vec![c, r],
            data: out,
        }
    }
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let orow = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Named tensors in insertion order. Only slots flagged trainable receive
/// gradients and optimizer updates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    slots: Vec<Slot>,
    index: HashMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::DuplicateParameter(name));
        }
        self.index.insert(name.clone(), self.slots.len());
        self.slots.push(Slot {
            name,
            value,
            trainable,
        });
        Ok(())
    }

    pub fn slot_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.slot_index(name).map(|i| &self.slots[i].value)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.slot_index(name).map(move |i| &mut self.slots[i].value)
    }

    /// Replaces the value of an existing slot, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .slot_index(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if self.slots[slot].value.shape() != value.shape() {
            return Err(Error::shape(
                "set",
                format!(
                    "`{name}` has shape {:?}, got {:?}",
                    self.slots[slot].value.shape(),
                    value.shape()
                ),
            ));
        }
        self.slots[slot].value = value;
        Ok(())
    }

    /// Sets the trainable flag on every slot whose name starts with `prefix`.
    /// Returns the number of slots touched.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for s in self.slots.iter_mut().filter(|s| s.name.starts_with(prefix)) {
            s.trainable = trainable;
            n += 1;
        }
        n
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [Slot] {
        &mut self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }
}

/// Gradients aligned with the slots of the store they were computed against.
/// Untrainable slots and slots the output does not depend on hold zeros.
#[derive(Debug, Clone)]
pub struct Gradients {
    names: Vec<String>,
    grads: Vec<Tensor>,
}

impl Gradients {
    fn zeros_like(store: &ParameterStore) -> Self {
        Gradients {
            names: store.slots.iter().map(|s| s.name.clone()).collect(),
            grads: store
                .slots
                .iter()
                .map(|s| Tensor::zeros(s.value.shape()))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.grads[i])
    }

    pub fn by_slot(&self, slot: usize) -> &Tensor {
        &self.grads[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.grads)
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in &mut self.grads {
            for v in &mut g.data {
                *v *= factor;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(Tensor::is_finite)
    }
}

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Relu(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    Concat(Var, Var),
    SliceCols(Var, usize, usize),
    SelectCols(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Records a computation over tensors and parameters for one backward pass.
pub struct Graph<'p> {
    params: &'p ParameterStore,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
    consumed: bool,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParameterStore) -> Self {
        Graph {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn params(&self) -> &'p ParameterStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn num_ops(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, "constant")
    }

    /// Leaf bound to a parameter slot. Repeated lookups return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let slot = self
            .params
            .slot_index(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if let Some(v) = self.param_vars[slot] {
            return Ok(v);
        }
        let value = self.params.slots[slot].value.clone();
        let v = self.push(value, Op::Param(slot), "param")?;
        self.param_vars[slot] = Some(v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.cols() != tb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
        let data = matmul_raw(ta.data(), tb.data(), n, k, m);
        self.push(Tensor { shape: vec![n, m], data }, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), "mul")
    }

    /// Adds a row vector (`[c]` or `[1, c]`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        let c = ta.cols();
        if tr.len() != c {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + row {:?}", ta.shape(), tr.shape()),
            ));
        }
        let mut out = ta.clone();
        for chunk in out.data.chunks_mut(c) {
            for (o, r) in chunk.iter_mut().zip(&tr.data) {
                *o += r;
            }
        }
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push(out, Op::Relu(a), "relu")
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(softplus);
        self.push(out, Op::Softplus(a), "softplus")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), "log")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), "mean")
    }

    /// Sums along the last axis, giving `[rows, 1]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data: Vec<f64> = t.data.chunks(t.cols()).map(|r| r.iter().sum()).collect();
        let rows = data.len();
        self.push(Tensor { shape: vec![rows, 1], data }, Op::SumRows(a), "sum_rows")
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::shape(
                "concat",
                format!("{:?} ++ {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (ca, cb) = (ta.cols(), tb.cols());
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for r in 0..ta.rows() {
            data.extend_from_slice(&ta.data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&tb.data[r * cb..(r + 1) * cb]);
        }
        let mut shape = ta.shape.clone();
        *shape.last_mut().expect("non-empty shape") = ca + cb;
        self.push(Tensor { shape, data }, Op::Concat(a, b), "concat")
    }

    /// Splits along the last axis into `[.., at]` and `[.., cols - at]`.
    pub fn split(&mut self, a: Var, at: usize) -> Result<(Var, Var)> {
        let c = self.value(a).cols();
        if at == 0 || at >= c {
            return Err(Error::shape("split", format!("cannot split {c} columns at {at}")));
        }
        Ok((self.slice_cols(a, 0, at)?, self.slice_cols(a, at, c)?))
    }

    fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let data: Vec<f64> = t
            .data
            .chunks(c)
            .flat_map(|r| r[start..end].iter().copied())
            .collect();
        let mut shape = t.shape.clone();
        *shape.last_mut().expect("non-empty shape") = end - start;
        self.push(Tensor { shape, data }, Op::SliceCols(a, start, end), "split")
    }

    /// Gathers columns by index along the last axis.
    pub fn select_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        if idx.is_empty() || idx.iter().any(|&i| i >= c) {
            return Err(Error::shape(
                "select_cols",
                format!("indices {idx:?} out of range for {c} columns"),
            ));
        }
        let data: Vec<f64> = t
            .data
            .chunks(c)
            .flat_map(|r| idx.iter().map(move |&i| r[i]))
            .collect();
        let mut shape = t.shape.clone();
        *shape.last_mut().expect("non-empty shape") = idx.len();
        self.push(
            Tensor { shape, data },
            Op::SelectCols(a, idx.to_vec()),
            "select_cols",
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if shape.is_empty() || shape.iter().product::<usize>() != t.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", t.shape()),
            ));
        }
        let out = t.clone().reshaped(shape);
        self.push(out, Op::Reshape(a), "reshape")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.shape().len() != 2 {
            return Err(Error::shape("transpose", format!("{:?}", t.shape())));
        }
        let out = t.transposed();
        self.push(out, Op::Transpose(a), "transpose")
    }

    /// Reverse sweep from `output` seeded with `seed`. A graph supports a
    /// single backward pass.
    pub fn backward(&mut self, output: Var, seed: Tensor) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if seed.shape() != self.value(output).shape() {
            return Err(Error::shape(
                "backward",
                format!(
                    "seed {:?} vs output {:?}",
                    seed.shape(),
                    self.value(output).shape()
                ),
            ));
        }
        self.consumed = true;
        let mut out = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Param(slot) => {
                    if self.params.slots[slot].trainable {
                        out.grads[slot].add_assign(&g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                    let bt = tb.transposed();
                    let da = matmul_raw(&g.data, &bt.data, n, m, k);
                    let at = ta.transposed();
                    let db = matmul_raw(&at.data, &g.data, k, n, m);
                    accumulate(&mut grads, a, Tensor { shape: vec![n, k], data: da });
                    accumulate(&mut grads, b, Tensor { shape: vec![k, m], data: db });
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a, g.clone());
                    accumulate(&mut grads, b, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, b, g.map(|x| -x));
                    accumulate(&mut grads, a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip(&self.nodes[b.0].value, |x, y| x * y);
                    let db = g.zip(&self.nodes[a.0].value, |x, y| x * y);
                    accumulate(&mut grads, a, da);
                    accumulate(&mut grads, b, db);
                }
                Op::AddRow(a, row) => {
                    let shape = self.nodes[row.0].value.shape.clone();
                    let c = g.cols();
                    let mut dr = vec![0.0; c];
                    for chunk in g.data.chunks(c) {
                        for (d, v) in dr.iter_mut().zip(chunk) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, row, Tensor { shape, data: dr });
                    accumulate(&mut grads, a, g);
                }
                Op::Scale(a, c) => accumulate(&mut grads, a, g.map(|x| x * c)),
                Op::Tanh(a) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut grads, a, g.zip(y, |d, y| d * (1.0 - y * y)));
                }
                Op::Relu(a) => {
                    let x = &self.nodes[a.0].value;
                    accumulate(
                        &mut grads,
                        a,
                        g.zip(x, |d, x| if x > 0.0 { d } else { 0.0 }),
                    );
                }
                Op::Softplus(a) => {
                    let x = &self.nodes[a.0].value;
                    accumulate(&mut grads, a, g.zip(x, |d, x| d * sigmoid(x)));
                }
                Op::Exp(a) => {
                    let y = &self.nodes[i].value;
                    accumulate(&mut grads, a, g.zip(y, |d, y| d * y));
                }
                Op::Log(a) => {
                    let x = &self.nodes[a.0].value;
                    accumulate(&mut grads, a, g.zip(x, |d, x| d / x));
                }
                Op::Sum(a) => {
                    let shape = self.nodes[a.0].value.shape.clone();
                    accumulate(&mut grads, a, Tensor::full(&shape, g.item()));
                }
                Op::Mean(a) => {
                    let t = &self.nodes[a.0].value;
                    let v = g.item() / t.len() as f64;
                    let shape = t.shape.clone();
                    accumulate(&mut grads, a, Tensor::full(&shape, v));
                }
                Op::SumRows(a) => {
                    let t = &self.nodes[a.0].value;
                    let c = t.cols();
                    let data = g.data.iter().flat_map(|&v| std::iter::repeat_n(v, c)).collect();
                    let shape = t.shape.clone();
                    accumulate(&mut grads, a, Tensor { shape, data });
                }
                Op::Concat(a, b) => {
                    let ca = self.nodes[a.0].value.cols();
                    let c = g.cols();
                    let (mut da, mut db) = (Vec::new(), Vec::new());
                    for r in g.data.chunks(c) {
                        da.extend_from_slice(&r[..ca]);
                        db.extend_from_slice(&r[ca..]);
                    }
                    let sa = self.nodes[a.0].value.shape.clone();
                    let sb = self.nodes[b.0].value.shape.clone();
                    accumulate(&mut grads, a, Tensor { shape: sa, data: da });
                    accumulate(&mut grads, b, Tensor { shape: sb, data: db });
                }
                Op::SliceCols(a, start, end) => {
                    let t = &self.nodes[a.0].value;
                    let c = t.cols();
                    let w = end - start;
                    let mut d = Tensor::zeros(&t.shape);
                    for (dst, src) in d.data.chunks_mut(c).zip(g.data.chunks(w)) {
                        dst[start..end].copy_from_slice(src);
                    }
                    accumulate(&mut grads, a, d);
                }
                Op::SelectCols(a, idx) => {
                    let t = &self.nodes[a.0].value;
                    let c = t.cols();
                    let mut d = Tensor::zeros(&t.shape);
                    for (dst, src) in d.data.chunks_mut(c).zip(g.data.chunks(idx.len())) {
                        for (&j, &v) in idx.iter().zip(src) {
                            dst[j] += v;
                        }
                    }
                    accumulate(&mut grads, a, d);
                }
                Op::Reshape(a) => {
                    let shape = self.nodes[a.0].value.shape.clone();
                    accumulate(&mut grads, a, g.reshaped(&shape));
                }
                Op::Transpose(a) => accumulate(&mut grads, a, g.transposed()),
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Value and gradient of a scalar computation.
pub fn value_and_grad<F>(params: &ParameterStore, f: F) -> Result<(f64, Gradients)>
where
    F: FnOnce(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let out = f(&mut g)?;
    let value = g.value(out).item();
    let grads = g.backward(out, Tensor::scalar(1.0))?;
    Ok((value, grads))
}

/// Largest relative discrepancy between analytic partials and central
/// differences `(f(θ+h) - f(θ-h)) / 2h`, over every entry of every trainable
/// slot. The denominator is `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(params: &ParameterStore, h: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let (_, grads) = value_and_grad(params, &f)?;
    let eval = |p: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new(p);
        let out = f(&mut g)?;
        Ok(g.value(out).item())
    };
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    for (slot, s) in params.slots().iter().enumerate() {
        if !s.trainable {
            continue;
        }
        for j in 0..s.value.len() {
            let orig = s.value.data[j];
            probe.slots[slot].value.data[j] = orig + h;
            let up = eval(&probe)?;
            probe.slots[slot].value.data[j] = orig - h;
            let down = eval(&probe)?;
            probe.slots[slot].value.data[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.by_slot(slot).data[j];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(name: &str, t: Tensor) -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert(name, t, true).unwrap();
        s
    }

    #[test]
    fn matmul_selects_basis_column() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let b = g.constant(Tensor::matrix(2, 1, vec![1.0, 0.0]).unwrap()).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[1.0, 3.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(g.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn softplus_and_tanh_values() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::vector(vec![0.0, 50.0, -50.0])).unwrap();
        let s = g.softplus(x).unwrap();
        assert!((g.value(s).data()[0] - 2f64.ln()).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 50.0).abs() < 1e-12);
        let t = g.tanh(x).unwrap();
        let v = g.value(t).data()[1];
        assert!(v > -1.0 && v <= 1.0);
        assert_eq!(v, 1.0);
    }

    #[test]
    fn log_of_negative_is_reported() {
        let store = ParameterStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(Tensor::vector(vec![-1.0])).unwrap();
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn square_gradient() {
        let store = store_with("w", Tensor::scalar(3.0));
        let (v, grads) = value_and_grad(&store, |g| {
            let w = g.param("w")?;
            g.mul(w, w)
        })
        .unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(grads.get("w").unwrap().data(), &[6.0]);
    }

    #[test]
    fn softplus_sum_gradient_is_half() {
        let store = store_with("w", Tensor::zeros(&[3]));
        let (_, grads) = value_and_grad(&store, |g| {
            let w = g.param("w")?;
            let s = g.softplus(w)?;
            g.sum(s)
        })
        .unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[0.5, 0.5, 0.5]);
    }

    #[test]
    fn second_backward_is_rejected() {
        let store = store_with("w", Tensor::scalar(1.0));
        let mut g = Graph::new(&store);
        let w = g.param("w").unwrap();
        let y = g.mul(w, w).unwrap();
        g.backward(y, Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            g.backward(y, Tensor::scalar(1.0)),
            Err(Error::TapeConsumed)
        ));
    }

    #[test]
    fn seed_shape_must_match() {
        let store = store_with("w", Tensor::zeros(&[2]));
        let mut g = Graph::new(&store);
        let w = g.param("w").unwrap();
        assert!(g.backward(w, Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn frozen_slots_get_zero_gradient() {
        let mut store = ParameterStore::new();
        store.insert("a", Tensor::scalar(2.0), true).unwrap();
        store.insert("b", Tensor::scalar(5.0), false).unwrap();
        let (_, grads) = value_and_grad(&store, |g| {
            let a = g.param("a")?;
            let b = g.param("b")?;
            g.mul(a, b)
        })
        .unwrap();
        assert_eq!(grads.get("a").unwrap().item(), 5.0);
        assert_eq!(grads.get("b").unwrap().item(), 0.0);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParameterStore::new();
        s.insert("x", Tensor::scalar(0.0), true).unwrap();
        assert!(matches!(
            s.insert("x", Tensor::scalar(0.0), true),
            Err(Error::DuplicateParameter(_))
        ));
    }

    #[test]
    fn linear_function_grad_check_is_exact() {
        let store = store_with("w", Tensor::vector(vec![0.3, -1.2, 2.0]));
        let err = grad_check(&store, 1e-5, |g| {
            let w = g.param("w")?;
            let s = g.scale(w, 1.7)?;
            g.sum(s)
        })
        .unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn structural_ops_round_trip_gradients() {
        let mut store = ParameterStore::new();
        store
            .insert("x", Tensor::matrix(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, 0.6]).unwrap(), true)
            .unwrap();
        store.insert("r", Tensor::vector(vec![0.7, -0.2]), true).unwrap();
        let err = grad_check(&store, 1e-5, |g| {
            let x = g.param("x")?;
            let r = g.param("r")?;
            let (a, b) = g.split(x, 1)?;
            let sel = g.select_cols(b, &[1, 0])?;
            let sel = g.add_row(sel, r)?;
            let c = g.concat(sel, a)?;
            let t = g.transpose(c)?;
            let flat = g.reshape(t, &[3, 2])?;
            let e = g.exp(flat)?;
            let rows = g.sum_rows(e)?;
            let l = g.log(rows)?;
            let sq = g.mul(l, l)?;
            g.mean(sq)
        })
        .unwrap();
        assert!(err < 1e-7, "{err}");
    }
}
