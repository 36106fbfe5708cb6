//! Reverse-mode tape.
//!
//! Every operation appends one node holding its output and whatever the
//! backward pass needs. Nodes only reference earlier nodes, so the node order
//! is a topological order and [`backward`] is a single reverse sweep.

use std::collections::HashMap;

use crate::error::{FlatError, Result};
use crate::par::Exec;

use super::kernels::{self, ConvGeom};
use super::{Scalar, Tensor, NORM_EPS};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    entries: Vec<(String, Tensor<T>)>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { entries: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> ParamId {
        if let Some(id) = self.id(name) {
            self.entries[id.0].1 = t;
            return id;
        }
        self.entries.push((name.to_string(), t));
        ParamId(self.entries.len() - 1)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        let i = self.entries.iter().position(|(n, _)| n == name)?;
        Some(self.entries.remove(i).1)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].1
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|id| self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.entries.iter_mut().for_each(|(_, t)| t.zero_grad());
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { entries: self.entries.iter().map(|(n, t)| (n.clone(), t.cast())).collect() }
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf { param: Option<ParamId> },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    AddRowBias { x: Var, b: Var },
    AddChannelBias { x: Var, b: Var, channels: usize, plane: usize },
    Conv2d { x: Var, k: Var, geom: ConvGeom, batch: usize, cols: Vec<Vec<T>> },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool { x: Var, plane: usize },
    Concat { a: Var, b: Var, rows: usize, wa: usize, wb: usize },
    NormalizeRows { x: Var, width: usize, norms: Vec<f64> },
    ScaleBy { x: Var, s: Var },
    MulConst { x: Var, c: T },
    Add { a: Var, b: Var },
    Sum { x: Var },
    Mse { a: Var, b: Var },
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<T>, classes: usize },
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// One forward computation. Owned by a single thread; build a fresh tape
/// per step.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    exec: Exec,
    track: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims2(shape: &[usize], what: &str) -> Result<(usize, usize)> {
    match shape {
        [m, n] => Ok((*m, *n)),
        _ => Err(FlatError::Dimension(format!("{what} expects a 2-D tensor, got {shape:?}"))),
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match shape {
        [b, c, h, w] => Ok((*b, *c, *h, *w)),
        _ => Err(FlatError::Dimension(format!("{what} expects a 4-D tensor, got {shape:?}"))),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Tape { nodes: Vec::new(), params: HashMap::new(), exec, track: true }
    }

    /// A tape that never tracks gradients: parameters and inputs are
    /// recorded as constants and no backward buffers are kept.
    pub fn inference() -> Self {
        Tape { track: false, ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("node shape matches data")
    }

    /// Records a constant or a gradient-tracked input, depending on
    /// `t.requires_grad`.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let rg = t.requires_grad && self.track;
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf { param: None }, rg)
    }

    /// Records a parameter leaf. Repeated calls return the same node so all
    /// uses of a parameter share one gradient.
    pub fn param(&mut self, params: &ParamSet<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = params.get(id);
        let v = self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf { param: Some(id) }, t.requires_grad && self.track);
        self.params.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, params: &ParamSet<T>, name: &str) -> Result<Var> {
        let id = params
            .id(name)
            .ok_or_else(|| FlatError::State(format!("missing parameter `{name}`")))?;
        Ok(self.param(params, id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul")?;
        let (k2, n) = dims2(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(FlatError::Dimension(format!(
                "matmul of {:?} and {:?}: inner dimensions differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2(self.shape(a), "matmul_nt")?;
        let (n, k2) = dims2(self.shape(b), "matmul_nt")?;
        if k != k2 {
            return Err(FlatError::Dimension(format!(
                "matmul_nt of {:?} and {:?}: inner dimensions differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a), false, self.value(b), true, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMulNt { a, b, m, k, n }, rg))
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(x), "add_row_bias")?;
        if self.shape(b) != [n] {
            return Err(FlatError::Dimension(format!(
                "bias {:?} does not match rows of {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let bias = self.value(b);
        let out: Vec<T> = self.value(x).iter().enumerate().map(|(i, &v)| v + bias[i % n]).collect();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::AddRowBias { x, b }, rg))
    }

    /// Dense layer `x · wᵀ + b` with `w: out×in`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match b {
            Some(b) => self.add_row_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (batch, c, h, w) = dims4(self.shape(x), "conv2d input")?;
        let (f, kc, kh, kw) = dims4(self.shape(k), "conv2d kernel")?;
        if kc != c || kh != kw {
            return Err(FlatError::Dimension(format!(
                "kernel {:?} is incompatible with input {:?}",
                self.shape(k),
                self.shape(x)
            )));
        }
        let geom = ConvGeom::new(c, h, w, f, kh, stride, pad)?;
        let keep = self.rg(k);
        let (out, cols) = kernels::conv2d_forward(self.value(x), self.value(k), &geom, batch, keep, self.exec);
        let rg = self.rg(x) || self.rg(k);
        let shape = vec![batch, f, geom.out_h, geom.out_w];
        Ok(self.push(shape, out, Op::Conv2d { x, k, geom, batch, cols }, rg))
    }

    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (_, c, h, w) = dims4(self.shape(x), "add_channel_bias")?;
        if self.shape(b) != [c] {
            return Err(FlatError::Dimension(format!(
                "bias {:?} does not match channels of {:?}",
                self.shape(b),
                self.shape(x)
            )));
        }
        let plane = h * w;
        let bias = self.value(b);
        let out: Vec<T> =
            self.value(x).iter().enumerate().map(|(i, &v)| v + bias[(i / plane) % c]).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(shape, out, Op::AddChannelBias { x, b, channels: c, plane }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::Relu { x }, rg)
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(x), "maxpool2")?;
        if h < 2 || w < 2 {
            return Err(FlatError::Dimension(format!("cannot 2x2-pool a {h}x{w} map")));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x), b * c, h, w);
        let rg = self.rg(x);
        Ok(self.push(vec![b, c, h / 2, w / 2], out, Op::MaxPool2 { x, argmax }, rg))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(x), "global_avg_pool")?;
        let plane = h * w;
        let out = self
            .value(x)
            .chunks(plane)
            .map(|p| T::of(p.iter().map(|v| v.f64()).sum::<f64>() / plane as f64))
            .collect();
        let rg = self.rg(x);
        Ok(self.push(vec![b, c], out, Op::GlobalAvgPool { x, plane }, rg))
    }

    /// Concatenates two row-aligned matrices along the feature axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (rows, wa) = dims2(self.shape(a), "concat")?;
        let (rows_b, wb) = dims2(self.shape(b), "concat")?;
        if rows != rows_b {
            return Err(FlatError::Dimension(format!(
                "concat of {:?} and {:?}: row counts differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut out = Vec::with_capacity(rows * (wa + wb));
        for r in 0..rows {
            out.extend_from_slice(&self.value(a)[r * wa..(r + 1) * wa]);
            out.extend_from_slice(&self.value(b)[r * wb..(r + 1) * wb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![rows, wa + wb], out, Op::Concat { a, b, rows, wa, wb }, rg))
    }

    /// Scales each row to unit norm. Rows with norm at or below the
    /// normalization floor are divided by the floor instead, so a zero row
    /// stays zero.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().expect("non-empty shape");
        let mut norms = Vec::with_capacity(self.value(x).len() / width);
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).chunks(width) {
            let norm = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
            let d = norm.max(NORM_EPS);
            out.extend(row.iter().map(|v| T::of(v.f64() / d)));
            norms.push(norm);
        }
        let rg = self.rg(x);
        self.push(shape, out, Op::NormalizeRows { x, width, norms }, rg)
    }

    /// Multiplies `x` by the single-element tensor `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(FlatError::Dimension(format!("scale must have one element, got {:?}", self.shape(s))));
        }
        let sv = self.value(s)[0];
        let out = self.value(x).iter().map(|&v| v * sv).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(shape, out, Op::ScaleBy { x, s }, rg))
    }

    pub fn mul_const(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, out, Op::MulConst { x, c }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(FlatError::Dimension(format!(
                "add of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, Op::Add { a, b }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().map(|v| v.f64()).sum::<f64>();
        let rg = self.rg(x);
        self.push(vec![1], vec![T::of(s)], Op::Sum { x }, rg)
    }

    /// Mean squared elementwise difference.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(FlatError::Dimension(format!(
                "mse of {:?} and {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let n = self.value(a).len() as f64;
        let s: f64 =
            self.value(a).iter().zip(self.value(b)).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![1], vec![T::of(s / n)], Op::Mse { a, b }, rg))
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (rows, classes) = dims2(self.shape(logits), "softmax_cross_entropy")?;
        if classes < 2 {
            return Err(FlatError::Dimension(format!("cross-entropy needs at least 2 classes, got {classes}")));
        }
        if labels.len() != rows {
            return Err(FlatError::Dimension(format!("{} labels for {rows} rows", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(FlatError::Index(format!("label {bad} outside 0..{classes}")));
        }
        let mut probs = Vec::with_capacity(rows * classes);
        let mut total = 0.0f64;
        for (row, &label) in self.value(logits).chunks(classes).zip(labels) {
            let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v.f64() - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[label].f64();
            probs.extend(row.iter().map(|v| T::of((v.f64() - lse).exp())));
        }
        let loss = T::of(total / rows as f64);
        let rg = self.rg(logits);
        let op = Op::SoftmaxCe { logits, labels: labels.to_vec(), probs, classes };
        Ok(self.push(vec![1], vec![loss], op, rg))
    }
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Back-propagates from the scalar `loss`, adding parameter gradients into
/// `params` and returning the gradient of every tracked node.
pub fn backward<T: Scalar>(tape: &Tape<T>, loss: Var, params: &mut ParamSet<T>) -> Result<Gradients<T>> {
    if tape.value(loss).len() != 1 {
        return Err(FlatError::Contract(format!(
            "backward needs a scalar loss, got shape {:?}",
            tape.shape(loss)
        )));
    }
    let mut grads: Vec<Option<Vec<T>>> = (0..tape.nodes.len()).map(|_| None).collect();
    if !tape.rg(loss) {
        return Ok(Gradients { grads });
    }
    grads[loss.0] = Some(vec![T::one()]);

    for i in (0..=loss.0).rev() {
        let node = &tape.nodes[i];
        if !node.requires_grad {
            continue;
        }
        let Some(dy) = grads[i].take() else { continue };
        let rg = |v: Var| tape.rg(v);
        match &node.op {
            Op::Leaf { param } => {
                if let Some(id) = param {
                    params.get_mut(*id).accumulate_grad(&dy)?;
                }
                grads[i] = Some(dy);
                continue;
            }
            &Op::MatMul { a, b, m, k, n } => {
                if rg(a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm(m, n, k, &dy, false, tape.value(b), true, &mut da, false);
                    acc(&mut grads, a, da);
                }
                if rg(b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm(k, m, n, tape.value(a), true, &dy, false, &mut db, false);
                    acc(&mut grads, b, db);
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if rg(a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm(m, n, k, &dy, false, tape.value(b), false, &mut da, false);
                    acc(&mut grads, a, da);
                }
                if rg(b) {
                    let mut db = vec![T::zero(); n * k];
                    kernels::gemm(n, m, k, &dy, true, tape.value(a), false, &mut db, false);
                    acc(&mut grads, b, db);
                }
            }
            &Op::AddRowBias { x, b } => {
                if rg(b) {
                    let n = tape.value(b).len();
                    let mut db = vec![0.0f64; n];
                    dy.iter().enumerate().for_each(|(j, v)| db[j % n] += v.f64());
                    acc(&mut grads, b, db.into_iter().map(T::of).collect());
                }
                if rg(x) {
                    acc(&mut grads, x, dy.clone());
                }
            }
            &Op::AddChannelBias { x, b, channels, plane } => {
                if rg(b) {
                    let mut db = vec![0.0f64; channels];
                    dy.iter().enumerate().for_each(|(j, v)| db[(j / plane) % channels] += v.f64());
                    acc(&mut grads, b, db.into_iter().map(T::of).collect());
                }
                if rg(x) {
                    acc(&mut grads, x, dy.clone());
                }
            }
            Op::Conv2d { x, k, geom, batch, cols } => {
                let (dx, dk) = kernels::conv2d_backward(
                    &dy,
                    tape.value(*k),
                    cols,
                    geom,
                    *batch,
                    rg(*x),
                    rg(*k),
                    tape.exec,
                );
                if let Some(dx) = dx {
                    acc(&mut grads, *x, dx);
                }
                if let Some(dk) = dk {
                    acc(&mut grads, *k, dk);
                }
            }
            &Op::Relu { x } => {
                let dx = tape
                    .value(x)
                    .iter()
                    .zip(&dy)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                acc(&mut grads, x, dx);
            }
            Op::MaxPool2 { x, argmax } => {
                let mut dx = vec![T::zero(); tape.value(*x).len()];
                argmax.iter().zip(&dy).for_each(|(&src, &g)| dx[src] += g);
                acc(&mut grads, *x, dx);
            }
            &Op::GlobalAvgPool { x, plane } => {
                let inv = T::of(1.0 / plane as f64);
                let dx = (0..dy.len() * plane).map(|j| dy[j / plane] * inv).collect();
                acc(&mut grads, x, dx);
            }
            &Op::Concat { a, b, rows, wa, wb } => {
                let w = wa + wb;
                if rg(a) {
                    let da = (0..rows).flat_map(|r| dy[r * w..r * w + wa].iter().copied()).collect();
                    acc(&mut grads, a, da);
                }
                if rg(b) {
                    let db = (0..rows).flat_map(|r| dy[r * w + wa..(r + 1) * w].iter().copied()).collect();
                    acc(&mut grads, b, db);
                }
            }
            Op::NormalizeRows { x, width, norms } => {
                let y = &node.data;
                let mut dx = Vec::with_capacity(dy.len());
                for (r, &norm) in norms.iter().enumerate() {
                    let yr = &y[r * width..(r + 1) * width];
                    let gr = &dy[r * width..(r + 1) * width];
                    if norm > NORM_EPS {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.f64() * b.f64()).sum();
                        dx.extend(yr.iter().zip(gr).map(|(a, b)| T::of((b.f64() - a.f64() * dot) / norm)));
                    } else {
                        dx.extend(gr.iter().map(|b| T::of(b.f64() / NORM_EPS)));
                    }
                }
                acc(&mut grads, *x, dx);
            }
            &Op::ScaleBy { x, s } => {
                let sv = tape.value(s)[0];
                if rg(s) {
                    let ds: f64 = tape.value(x).iter().zip(&dy).map(|(a, b)| a.f64() * b.f64()).sum();
                    acc(&mut grads, s, vec![T::of(ds)]);
                }
                if rg(x) {
                    acc(&mut grads, x, dy.iter().map(|&g| g * sv).collect());
                }
            }
            &Op::MulConst { x, c } => acc(&mut grads, x, dy.iter().map(|&g| g * c).collect()),
            &Op::Add { a, b } => {
                if rg(a) {
                    acc(&mut grads, a, dy.clone());
                }
                if rg(b) {
                    acc(&mut grads, b, dy.clone());
                }
            }
            &Op::Sum { x } => {
                let n = tape.value(x).len();
                acc(&mut grads, x, vec![dy[0]; n]);
            }
            &Op::Mse { a, b } => {
                let n = tape.value(a).len() as f64;
                let g = dy[0].f64();
                let diff: Vec<f64> =
                    tape.value(a).iter().zip(tape.value(b)).map(|(x, y)| x.f64() - y.f64()).collect();
                if rg(a) {
                    acc(&mut grads, a, diff.iter().map(|d| T::of(2.0 * d * g / n)).collect());
                }
                if rg(b) {
                    acc(&mut grads, b, diff.iter().map(|d| T::of(-2.0 * d * g / n)).collect());
                }
            }
            Op::SoftmaxCe { logits, labels, probs, classes } => {
                let rows = labels.len() as f64;
                let g = dy[0].f64();
                let mut dl: Vec<T> = probs.iter().map(|p| T::of(p.f64() * g / rows)).collect();
                for (r, &l) in labels.iter().enumerate() {
                    let j = r * classes + l;
                    dl[j] = T::of((probs[j].f64() - 1.0) * g / rows);
                }
                acc(&mut grads, *logits, dl);
            }
        }
        grads[i] = Some(dy);
    }
    Ok(Gradients { grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::<f64>::new();
        let eye = tape.input(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let zero = tape.input(t(&[2, 2], &[0.0; 4]));
        let a = tape.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.input(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let y = tape.matmul(eye, b).unwrap();
        assert_eq!(tape.value(y), &[5.0, 6.0, 7.0, 8.0]);
        let y = tape.matmul(zero, b).unwrap();
        assert_eq!(tape.value(y), &[0.0; 4]);
        let y = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(y), &[19.0, 22.0, 43.0, 50.0]);
        let c = tape.input(t(&[3, 1], &[1.0; 3]));
        let err = tape.matmul(a, c).unwrap_err().to_string();
        assert!(err.contains("[2, 2]") && err.contains("[3, 1]"), "{err}");
    }

    #[test]
    fn conv2d_examples() {
        let mut tape = Tape::<f32>::new();
        let img: Vec<f32> = (0..9).map(|i| i as f32).collect();
        let x = tape.input(Tensor::new(&[1, 1, 3, 3], img.clone()).unwrap());
        let one = tape.input(Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let y = tape.conv2d(x, one, 1, 0).unwrap();
        assert_eq!(tape.value(y), img.as_slice());

        let zeros = tape.input(Tensor::zeros(&[1, 1, 3, 3]));
        let k3 = tape.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(zeros, k3, 1, 1).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));

        let ones = tape.input(Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = tape.conv2d(ones, k3, 1, 0).unwrap();
        assert_eq!(tape.shape(y), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y), &[9.0]);

        let big = tape.input(Tensor::full(&[1, 1, 5, 5], 1.0));
        assert!(matches!(tape.conv2d(ones, big, 1, 0), Err(FlatError::Dimension(_))));
    }

    #[test]
    fn relu_examples() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0, 2.0]);
        let x = tape.input(Tensor::from_vec(vec![-3.0, -0.5]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 0.0]);
        let x = tape.input(Tensor::from_vec(vec![0.5, 3.0]));
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.5, 3.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[3], &[-1.0, 0.0, 2.0]).with_grad());
        let y = tape.relu(x);
        let l = tape.sum(y);
        let g = backward(&tape, l, &mut ParamSet::default()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f32>::new();
        let x = tape.input(Tensor::zeros(&[1, 4]));
        let l = tape.softmax_cross_entropy(x, &[2]).unwrap();
        assert!((tape.value(l)[0] as f64 - 4f64.ln()).abs() < 1e-6);

        let x = tape.input(Tensor::new(&[1, 3], vec![0.0, 30.0, 0.0]).unwrap());
        let l = tape.softmax_cross_entropy(x, &[1]).unwrap();
        assert!(tape.value(l)[0] < 1e-9);

        let x = tape.input(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let l = tape.softmax_cross_entropy(x, &[2]).unwrap();
        // ln(e^1 + e^2 + e^3) - 3
        let want = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        assert!((tape.value(l)[0] as f64 - want).abs() < 1e-6);
        assert!((want - 0.40761).abs() < 1e-5);

        assert!(matches!(tape.softmax_cross_entropy(x, &[3]), Err(FlatError::Index(_))));
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::<f32>::new();
        let a = tape.input(Tensor::from_vec(vec![1.0, 2.0]));
        let b = tape.input(Tensor::from_vec(vec![4.0, 6.0]));
        let z = tape.input(Tensor::from_vec(vec![0.0, 0.0]));
        let o = tape.input(Tensor::from_vec(vec![1.0, 1.0]));
        let l = tape.mse(a, a).unwrap();
        assert_eq!(tape.value(l), &[0.0]);
        let l = tape.mse(z, o).unwrap();
        assert_eq!(tape.value(l), &[1.0]);
        let l = tape.mse(a, b).unwrap();
        assert_eq!(tape.value(l), &[12.5]);
        let c = tape.input(Tensor::from_vec(vec![1.0]));
        assert!(matches!(tape.mse(a, c), Err(FlatError::Dimension(_))));
    }

    #[test]
    fn backward_simple_cases() {
        let mut tape = Tape::<f64>::new();
        let x = tape.input(t(&[4], &[0.5, -1.0, 2.0, 3.0]).with_grad());
        let l = tape.sum(x);
        let g = backward(&tape, l, &mut ParamSet::default()).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);

        let mut tape = Tape::<f64>::new();
        let xv = [0.5, -1.0, 2.0, 3.0];
        let x = tape.input(t(&[4], &xv).with_grad());
        let z = tape.input(t(&[4], &[0.0; 4]));
        let l = tape.mse(x, z).unwrap();
        let g = backward(&tape, l, &mut ParamSet::default()).unwrap();
        for (gi, xi) in g.get(x).unwrap().iter().zip(xv) {
            assert!((gi - 2.0 * xi / 4.0).abs() < 1e-15);
        }

        let y = tape.mul_const(x, 2.0);
        assert!(matches!(backward(&tape, y, &mut ParamSet::default()), Err(FlatError::Contract(_))));
    }

    #[test]
    fn repeated_backward_accumulates_param_grads() {
        let mut params = ParamSet::<f64>::default();
        let id = params.insert("w", t(&[2], &[1.0, 2.0]).with_grad());
        let mut tape = Tape::new();
        let w = tape.param(&params, id);
        let l = tape.sum(w);
        backward(&tape, l, &mut params).unwrap();
        backward(&tape, l, &mut params).unwrap();
        assert_eq!(params.get(id).grad().unwrap(), &[2.0, 2.0]);
        params.zero_grad();
        assert!(params.get(id).grad().is_none());
    }

    /// Composite graph touching every op, checked against central
    /// differences in f64.
    fn composite_loss(tape: &mut Tape<f64>, ps: &ParamSet<f64>) -> Var {
        let x = tape.input(Tensor::new(&[2, 2, 5, 5], (0..100).map(|i| ((i * 7 % 13) as f64 - 6.0) / 6.0).collect()).unwrap());
        let k = tape.param_by_name(ps, "k").unwrap();
        let kb = tape.param_by_name(ps, "kb").unwrap();
        let w = tape.param_by_name(ps, "w").unwrap();
        let wb = tape.param_by_name(ps, "wb").unwrap();
        let m = tape.param_by_name(ps, "m").unwrap();
        let s = tape.param_by_name(ps, "s").unwrap();
        let h = tape.conv2d(x, k, 1, 1).unwrap();
        let h = tape.add_channel_bias(h, kb).unwrap();
        let h = tape.relu(h);
        let h = tape.maxpool2(h).unwrap();
        let f = tape.global_avg_pool(h).unwrap();
        let cat = tape.concat(f, f).unwrap();
        let z = tape.linear(cat, w, Some(wb)).unwrap();
        let zm = tape.matmul(z, m).unwrap();
        let zn = tape.normalize_rows(zm);
        let logits = tape.scale_by(zn, s).unwrap();
        let ce = tape.softmax_cross_entropy(logits, &[0, 2]).unwrap();
        let target = tape.input(t(&[2, 3], &[0.1, -0.2, 0.3, 0.0, 0.5, -0.5]));
        let reg = tape.mse(zm, target).unwrap();
        let reg = tape.mul_const(reg, 0.7);
        tape.add(ce, reg).unwrap()
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = seed::stream(3, &[]);
        let mut r = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-0.8..0.8)).collect() };
        let mut ps = ParamSet::<f64>::default();
        ps.insert("k", t(&[3, 2, 3, 3], &r(54)).with_grad());
        ps.insert("kb", t(&[3], &r(3)).with_grad());
        ps.insert("w", t(&[4, 6], &r(24)).with_grad());
        ps.insert("wb", t(&[4], &r(4)).with_grad());
        ps.insert("m", t(&[4, 3], &r(12)).with_grad());
        ps.insert("s", t(&[1], &[3.0]).with_grad());

        let mut tape = Tape::new();
        let l = composite_loss(&mut tape, &ps);
        backward(&tape, l, &mut ps).unwrap();

        let h = 1e-3;
        for name in ps.names() {
            let id = ps.id(&name).unwrap();
            for j in 0..ps.get(id).numel() {
                let analytic = ps.get(id).grad().unwrap()[j];
                let eval = |delta: f64| {
                    let mut q = ps.clone();
                    q.get_mut(id).data_mut()[j] += delta;
                    let mut tp = Tape::new();
                    let l = composite_loss(&mut tp, &q);
                    tp.value(l)[0]
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let denom = analytic.abs().max(numeric.abs()).max(1e-8);
                let rel = (analytic - numeric).abs() / denom;
                assert!(
                    rel < 1e-3 || (analytic - numeric).abs() < 1e-9,
                    "{name}[{j}]: analytic {analytic} numeric {numeric}"
                );
            }
        }
    }
}
