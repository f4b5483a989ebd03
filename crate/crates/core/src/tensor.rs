//! Dense tensors, a recording tape, and hand-written backward rules.
//!
//! Values are stored row-major with rank at most 3. The tape records each
//! operation together with whatever the backward rule needs; `backward`
//! walks the records in exact reverse order and accumulates gradients
//! additively. Reductions (dot products, pooling, the loss) accumulate in
//! `f64` regardless of the storage type.

use std::collections::BTreeMap;
use std::fmt::{Debug, Display};

use num_traits::Float;
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Storage element type. Parameters and activations use `f32`; `f64` is
/// available so finite-difference checks are not swamped by rounding.
pub trait Real: Float + Debug + Display + Default + Send + Sync + 'static {
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
}

/// Smallest probability fed to `ln` in cross-entropy terms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<R = f32> {
    shape: Vec<usize>,
    data: Vec<R>,
}

impl<R: Real> Tensor<R> {
    pub fn new(shape: Vec<usize>, data: Vec<R>) -> Result<Self> {
        if shape.len() > 3 {
            return Err(Error::shape("tensor", format!("rank {} > 3", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![R::zero(); n],
        }
    }

    pub fn scalar(v: R) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<R>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<R>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[R] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [R] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<R> {
        self.data
    }

    /// Row `r` of a rank-2 tensor.
    pub fn row(&self, r: usize) -> &[R] {
        let cols = self.shape[1];
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [R] {
        let cols = self.shape[1];
        &mut self.data[r * cols..(r + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<S: Real>(&self) -> Tensor<S> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| S::of(v.f64())).collect(),
        }
    }

    /// Rows/cols view for rank 1 (as a single row) and rank 2 tensors.
    fn as_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(op, format!("expected rank 1 or 2, got {s:?}"))),
        }
    }

    fn add_assign(&mut self, other: &Tensor<R>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + *b;
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate corruptions of backward rules, used as negative controls for
/// gradient and saliency checks.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Fault {
    #[default]
    None,
    /// tanh backward passes the upstream gradient through unchanged.
    TanhDerivative,
    /// matmul backward uses the unscaled upstream gradient for the right operand.
    MatMulRhs,
}

#[derive(Debug)]
enum Op<R> {
    Leaf,
    Param(String),
    Gather {
        table: String,
        table_shape: [usize; 2],
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, R),
    Tanh(Var),
    Softmax(Var),
    Sum(Var),
    MeanPool {
        input: Var,
        weights: Vec<R>,
    },
    SoftCrossEntropy {
        probs: Vec<Var>,
        targets: Vec<Vec<R>>,
    },
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// One tape per training step; not shared across threads.
#[derive(Debug, Default)]
pub struct Tape<R = f32> {
    nodes: Vec<Node<R>>,
    fault: Fault,
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: Fault::None,
        }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>) -> Var {
        #[cfg(debug_assertions)]
        if !value.is_finite() {
            log::warn!("non-finite value produced by {:?}", std::mem::discriminant(&op));
        }
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A constant input. Its gradient is still available from [`Gradients::of`].
    pub fn leaf(&mut self, value: Tensor<R>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A named trainable parameter.
    pub fn param(&mut self, name: &str, value: Tensor<R>) -> Var {
        self.push(value, Op::Param(name.to_string()))
    }

    /// Look up rows of a named table; the gradient is scattered back into
    /// a table-shaped gradient under `name`.
    pub fn gather(&mut self, name: &str, table: &Tensor<R>, ids: &[usize]) -> Result<Var> {
        let (rows, cols) = match table.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::shape("gather", format!("table must be rank 2, got {s:?}"))),
        };
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape("gather", format!("id {id} out of range for {rows} rows")));
            }
            data.extend_from_slice(table.row(id));
        }
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table: name.to_string(),
                table_shape: [rows, cols],
                ids: ids.to_vec(),
            },
        ))
    }

    /// `[n×k]·[k×m]`; a rank-1 left operand is treated as a single row and
    /// yields a rank-1 result.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, k) = av.as_matrix("matmul")?;
        let (k2, m) = match bv.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::shape("matmul", format!("right operand must be rank 2, got {s:?}"))),
        };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = matmul_raw(av.data(), bv.data(), n, k, m);
        let shape = if av.rank() == 1 { vec![m] } else { vec![n, m] };
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Adds a rank-1 bias to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(bias);
        let (_, m) = av.as_matrix("add_bias")?;
        if bv.shape() != [m] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + {:?}", av.shape(), bv.shape()),
            ));
        }
        let mut out = av.clone();
        for row in out.data.chunks_mut(m) {
            for (x, b) in row.iter_mut().zip(bv.data()) {
                *x = *x + *b;
            }
        }
        Ok(self.push(out, Op::AddBias(a, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(Error::shape("add", format!("{:?} + {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: R) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|x| *x * s).collect();
        let value = Tensor {
            shape: av.shape().to_vec(),
            data,
        };
        self.push(value, Op::Scale(a, s))
    }

    /// `λ·a + (1−λ)·b`. At λ = 1 the result is bitwise equal to `a`.
    pub fn lerp(&mut self, a: Var, b: Var, lambda: R) -> Result<Var> {
        let sa = self.scale(a, lambda);
        let sb = self.scale(b, R::one() - lambda);
        self.add(sa, sb)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape().to_vec(),
            data: av.data().iter().map(|x| x.tanh()).collect(),
        };
        self.push(value, Op::Tanh(a))
    }

    /// Softmax over the last axis (rank 1, or each row of rank 2).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (_, m) = av.as_matrix("softmax")?;
        if m == 0 {
            return Err(Error::shape("softmax", "empty last axis"));
        }
        let mut data = Vec::with_capacity(av.len());
        for row in av.data().chunks(m) {
            data.extend(softmax_row(row));
        }
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().map(|x| x.f64()).sum();
        self.push(Tensor::scalar(R::of(total)), Op::Sum(a))
    }

    /// Weighted mean over the rows of `[T×E]`, skipping rows with weight 0.
    /// Weights may be fractional.
    pub fn mean_pool_masked(&mut self, a: Var, weights: &[R]) -> Result<Var> {
        let av = self.value(a);
        let (t, e) = match av.shape() {
            [t, e] => (*t, *e),
            s => return Err(Error::shape("mean_pool_masked", format!("expected [T×E], got {s:?}"))),
        };
        if weights.len() != t {
            return Err(Error::shape(
                "mean_pool_masked",
                format!("{} weights for {t} rows", weights.len()),
            ));
        }
        let total: f64 = weights.iter().map(|w| w.f64()).sum();
        if !(total > 0.0) {
            return Err(Error::Numeric("mean_pool_masked: mask weights sum to zero".into()));
        }
        let mut acc = vec![0.0f64; e];
        for (row, w) in av.data().chunks(e).zip(weights) {
            if *w == R::zero() {
                continue;
            }
            let w = w.f64();
            for (s, x) in acc.iter_mut().zip(row) {
                *s += w * x.f64();
            }
        }
        let value = Tensor::vector(acc.into_iter().map(|s| R::of(s / total)).collect());
        Ok(self.push(
            value,
            Op::MeanPool {
                input: a,
                weights: weights.to_vec(),
            },
        ))
    }

    /// `−(1/m) Σᵢ Σ_c ỹᵢc · ln max(pᵢc, 1e-12)` over a batch of probability
    /// vectors. Targets are constants.
    pub fn soft_cross_entropy(&mut self, probs: &[Var], targets: &[Vec<R>]) -> Result<Var> {
        if probs.len() != targets.len() {
            return Err(Error::shape(
                "soft_cross_entropy",
                format!("{} predictions for {} targets", probs.len(), targets.len()),
            ));
        }
        if probs.is_empty() {
            return Err(Error::shape("soft_cross_entropy", "empty batch"));
        }
        let mut total = 0.0f64;
        for (p, y) in probs.iter().zip(targets) {
            let pv = self.value(*p);
            if pv.rank() != 1 || pv.len() != y.len() {
                return Err(Error::shape(
                    "soft_cross_entropy",
                    format!("prediction {:?} vs target of {}", pv.shape(), y.len()),
                ));
            }
            for (pc, yc) in pv.data().iter().zip(y) {
                total -= yc.f64() * pc.f64().max(PROB_FLOOR).ln();
            }
        }
        let loss = total / probs.len() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric("soft_cross_entropy: non-finite loss".into()));
        }
        Ok(self.push(
            Tensor::scalar(R::of(loss)),
            Op::SoftCrossEntropy {
                probs: probs.to_vec(),
                targets: targets.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar `loss`, seeded with `loss_grad`.
    pub fn backward_with(&self, loss: Var, loss_grad: R) -> Result<Gradients<R>> {
        if self.nodes.is_empty() {
            return Err(Error::Tape("backward called before any forward operation".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(Error::Tape(format!("unknown variable {}", loss.0)));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Tape(format!(
                "loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor {
            shape: self.value(loss).shape().to_vec(),
            data: vec![loss_grad],
        });
        let mut params: BTreeMap<String, Tensor<R>> = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param(name) => accumulate_named(&mut params, name, &g),
                Op::Gather {
                    table,
                    table_shape,
                    ids,
                } => {
                    let cols = table_shape[1];
                    let entry = params
                        .entry(table.clone())
                        .or_insert_with(|| Tensor::zeros(&table_shape[..]));
                    for (pos, &id) in ids.iter().enumerate() {
                        let src = &g.data[pos * cols..(pos + 1) * cols];
                        for (d, s) in entry.row_mut(id).iter_mut().zip(src) {
                            *d = *d + *s;
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let (n, k) = av.as_matrix("matmul")?;
                    let m = bv.shape()[1];
                    // dA = G·Bᵀ
                    let mut ga = vec![R::zero(); n * k];
                    for i in 0..n {
                        for kk in 0..k {
                            let mut s = 0.0f64;
                            for j in 0..m {
                                s += g.data[i * m + j].f64() * bv.data[kk * m + j].f64();
                            }
                            ga[i * k + kk] = R::of(s);
                        }
                    }
                    // dB = Aᵀ·G
                    let mut gb = vec![R::zero(); k * m];
                    for kk in 0..k {
                        for j in 0..m {
                            let mut s = 0.0f64;
                            for i in 0..n {
                                let a_ik = if self.fault == Fault::MatMulRhs {
                                    1.0
                                } else {
                                    av.data[i * k + kk].f64()
                                };
                                s += a_ik * g.data[i * m + j].f64();
                            }
                            gb[kk * m + j] = R::of(s);
                        }
                    }
                    accumulate(&mut grads, *a, Tensor { shape: av.shape.clone(), data: ga });
                    accumulate(&mut grads, *b, Tensor { shape: bv.shape.clone(), data: gb });
                }
                Op::AddBias(a, bias) => {
                    let m = self.value(*bias).len();
                    let mut gb = vec![0.0f64; m];
                    for row in g.data.chunks(m) {
                        for (s, x) in gb.iter_mut().zip(row) {
                            *s += x.f64();
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *bias, Tensor::vector(gb.into_iter().map(R::of).collect()));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Scale(a, s) => {
                    let data = g.data.iter().map(|x| *x * *s).collect();
                    accumulate(&mut grads, *a, Tensor { shape: g.shape.clone(), data });
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let data = g
                        .data
                        .iter()
                        .zip(&y.data)
                        .map(|(gx, yx)| match self.fault {
                            Fault::TanhDerivative => *gx,
                            _ => *gx * (R::one() - *yx * *yx),
                        })
                        .collect();
                    accumulate(&mut grads, *a, Tensor { shape: g.shape.clone(), data });
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let m = *y.shape.last().unwrap_or(&1);
                    let mut data = Vec::with_capacity(y.len());
                    for (gr, yr) in g.data.chunks(m).zip(y.data.chunks(m)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a.f64() * b.f64()).sum();
                        data.extend(gr.iter().zip(yr).map(|(gx, yx)| R::of(yx.f64() * (gx.f64() - dot))));
                    }
                    accumulate(&mut grads, *a, Tensor { shape: y.shape.clone(), data });
                }
                Op::Sum(a) => {
                    let av = self.value(*a);
                    let data = vec![g.data[0]; av.len()];
                    accumulate(&mut grads, *a, Tensor { shape: av.shape.clone(), data });
                }
                Op::MeanPool { input, weights } => {
                    let av = self.value(*input);
                    let e = av.shape[1];
                    let total: f64 = weights.iter().map(|w| w.f64()).sum();
                    let mut data = vec![R::zero(); av.len()];
                    for (t, w) in weights.iter().enumerate() {
                        if *w == R::zero() {
                            continue;
                        }
                        let c = w.f64() / total;
                        for j in 0..e {
                            data[t * e + j] = R::of(c * g.data[j].f64());
                        }
                    }
                    accumulate(&mut grads, *input, Tensor { shape: av.shape.clone(), data });
                }
                Op::SoftCrossEntropy { probs, targets } => {
                    let scale = g.data[0].f64() / probs.len() as f64;
                    for (p, y) in probs.iter().zip(targets) {
                        let pv = self.value(*p);
                        let data = pv
                            .data
                            .iter()
                            .zip(y)
                            .map(|(pc, yc)| {
                                let pc = pc.f64();
                                if pc > PROB_FLOOR {
                                    R::of(-scale * yc.f64() / pc)
                                } else {
                                    R::zero()
                                }
                            })
                            .collect();
                        accumulate(&mut grads, *p, Tensor { shape: pv.shape.clone(), data });
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients<R>> {
        self.backward_with(loss, R::one())
    }
}

fn accumulate<R: Real>(grads: &mut [Option<Tensor<R>>], v: Var, g: Tensor<R>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_named<R: Real>(params: &mut BTreeMap<String, Tensor<R>>, name: &str, g: &Tensor<R>) {
    match params.get_mut(name) {
        Some(existing) => existing.add_assign(g),
        None => {
            params.insert(name.to_string(), g.clone());
        }
    }
}

fn matmul_raw<R: Real>(a: &[R], b: &[R], n: usize, k: usize, m: usize) -> Vec<R> {
    let mut out = vec![R::zero(); n * m];
    let mut acc = vec![0.0f64; m];
    for i in 0..n {
        acc.iter_mut().for_each(|s| *s = 0.0);
        for kk in 0..k {
            let a_ik = a[i * k + kk].f64();
            if a_ik == 0.0 {
                continue;
            }
            for (s, b_kj) in acc.iter_mut().zip(&b[kk * m..(kk + 1) * m]) {
                *s += a_ik * b_kj.f64();
            }
        }
        for (o, s) in out[i * m..(i + 1) * m].iter_mut().zip(&acc) {
            *o = R::of(*s);
        }
    }
    out
}

fn softmax_row<R: Real>(row: &[R]) -> Vec<R> {
    let max = row.iter().map(|x| x.f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|x| (x.f64() - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| R::of(e / total)).collect()
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients<R = f32> {
    nodes: Vec<Option<Tensor<R>>>,
    params: BTreeMap<String, Tensor<R>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of the loss with respect to a recorded value, if it was reached.
    pub fn of(&self, v: Var) -> Option<&Tensor<R>> {
        self.nodes.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a named parameter or gathered table, if the loss depends on it.
    pub fn param(&self, name: &str) -> Option<&Tensor<R>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<R>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<R>> {
        self.params
    }
}

/// Options for [`grad_check`].
#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Number of coordinates to probe (at least 50 are always probed).
    pub samples: usize,
    pub seed: u64,
    pub fault: Fault,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            samples: 50,
            seed: 0,
            fault: Fault::None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// `(tensor, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Compare analytic parameter gradients with central differences
/// `(L(θ+ε) − L(θ−ε)) / 2ε` on randomly chosen coordinates and return the
/// largest `|a − n| / max(|a|, |n|, 1e-8)`.
///
/// `loss_fn` records the forward computation for the given parameters on
/// the supplied tape and returns the scalar loss.
pub fn grad_check<R, F>(
    params: &BTreeMap<String, Tensor<R>>,
    loss_fn: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    R: Real,
    F: Fn(&BTreeMap<String, Tensor<R>>, &mut Tape<R>) -> Result<Var>,
{
    if !(1e-5..=1e-2).contains(&opts.eps) {
        return Err(Error::Config(format!("grad_check eps {} outside [1e-5, 1e-2]", opts.eps)));
    }
    let mut tape = Tape::with_fault(opts.fault);
    let loss = loss_fn(params, &mut tape)?;
    let base = tape.value(loss).data()[0].f64();
    if !base.is_finite() {
        return Err(Error::Numeric("grad_check: non-finite loss".into()));
    }
    let grads = tape.backward(loss)?;

    let names: Vec<&String> = params.keys().filter(|n| !params[*n].is_empty()).collect();
    if names.is_empty() {
        return Err(Error::Config("grad_check: no parameters".into()));
    }
    let samples = opts.samples.max(50);
    let per_tensor = samples.div_ceil(names.len());
    let mut rng = rng::stream(opts.seed, &[rng::tag::GRAD_CHECK]);
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        coordinates: 0,
        worst: None,
    };
    let eval = |p: &BTreeMap<String, Tensor<R>>| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss_fn(p, &mut t)?;
        let v = t.value(l).data()[0].f64();
        if !v.is_finite() {
            return Err(Error::Numeric("grad_check: non-finite loss".into()));
        }
        Ok(v)
    };
    for name in names {
        let n = params[name].len();
        for _ in 0..per_tensor {
            let idx = rng.random_range(0..n);
            let orig = params[name].data()[idx];
            work.get_mut(name).unwrap().data_mut()[idx] = R::of(orig.f64() + opts.eps);
            let plus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[idx] = R::of(orig.f64() - opts.eps);
            let minus = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * opts.eps);
            let analytic = grads.param(name).map(|g| g.data()[idx].f64()).unwrap_or(0.0);
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.coordinates += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((name.clone(), idx, analytic, numeric));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[0.0, 0.0]));
        let p = tape.softmax(x).unwrap();
        assert_eq!(tape.value(p).data(), &[0.5, 0.5]);
    }

    #[test]
    fn mean_pool_selects_weighted_rows() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 1], &[2.0, 4.0]));
        let p = tape.mean_pool_masked(x, &[1.0, 0.0]).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0]);
    }

    #[test]
    fn mean_pool_rejects_empty_mask() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2, 1], &[2.0, 4.0]));
        assert!(matches!(tape.mean_pool_masked(x, &[0.0, 0.0]), Err(Error::Numeric(_))));
    }

    #[test]
    fn tanh_of_zero_is_zero() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::vector(vec![0.0]));
        let y = tape.tanh(x);
        assert_eq!(tape.value(y).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[2, 3], &[0.0; 6]));
        let b = tape.leaf(t(&[2, 2], &[0.0; 4]));
        assert!(matches!(tape.matmul(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_on_empty_tape_fails() {
        let tape = Tape::<f32>::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::Tape(_))));
    }

    #[test]
    fn linear_sum_gradient_is_outer_product() {
        // loss = sum(x·W) => dW[k][j] = x[k]
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let w = tape.param("w", t(&[3, 2], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let y = tape.matmul(x, w).unwrap();
        let loss = tape.sum(y);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param("w").unwrap().data(), &[1.0, 1.0, -2.0, -2.0, 0.5, 0.5]);
        // dx[k] = Σ_j W[k][j]
        let gx = g.of(x).unwrap().data();
        assert!((gx[0] - 0.3).abs() < 1e-12 && (gx[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn unused_parameter_gets_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param("a", t(&[2], &[1.0, 2.0]));
        let _unused = tape.param("p", t(&[2], &[3.0, 4.0]));
        let loss = tape.sum(a);
        let g = tape.backward(loss).unwrap();
        assert!(g.param("p").is_none());
    }

    #[test]
    fn gather_scatters_into_table_rows() {
        let table = t(&[3, 2], &[0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        let mut tape = Tape::<f64>::new();
        let e = tape.gather("emb", &table, &[2, 1, 2]).unwrap();
        assert_eq!(tape.value(e).data(), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let loss = tape.sum(e);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.param("emb").unwrap().data(), &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn soft_ce_logit_gradient_is_p_minus_target() {
        let logits = [[0.3, -1.2, 0.7], [1.5, 0.2, -0.4]];
        let targets = vec![vec![0.1, 0.8, 0.1], vec![0.0, 0.0, 1.0]];
        let mut tape = Tape::<f64>::new();
        let mut xs = vec![];
        let mut ps = vec![];
        for l in &logits {
            let x = tape.leaf(t(&[3], l));
            xs.push(x);
            ps.push(tape.softmax(x).unwrap());
        }
        let loss = tape.soft_cross_entropy(&ps, &targets).unwrap();
        let g = tape.backward(loss).unwrap();
        for i in 0..2 {
            let p = tape.value(ps[i]).data();
            let gx = g.of(xs[i]).unwrap().data();
            for c in 0..3 {
                let expected = (p[c] - targets[i][c]) / 2.0;
                assert!((gx[c] - expected).abs() < 1e-12, "{} vs {}", gx[c], expected);
            }
        }
    }

    fn mlp_params(seed: u64) -> BTreeMap<String, Tensor<f64>> {
        let mut rng = rng::stream(seed, &[99]);
        let mut p = BTreeMap::new();
        let mut rand_t = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-0.8..0.8)).collect()).unwrap()
        };
        p.insert("w1".to_string(), rand_t(&[4, 5]));
        p.insert("b1".to_string(), rand_t(&[5]));
        p.insert("w2".to_string(), rand_t(&[5, 5]));
        p.insert("b2".to_string(), rand_t(&[5]));
        p.insert("w3".to_string(), rand_t(&[5, 3]));
        p.insert("b3".to_string(), rand_t(&[3]));
        p
    }

    fn mlp_loss(p: &BTreeMap<String, Tensor<f64>>, tape: &mut Tape<f64>) -> Result<Var> {
        let x = tape.leaf(t(&[3, 4], &[0.5, -0.3, 0.8, 0.1, -0.7, 0.2, 0.4, -0.9, 0.3, 0.3, -0.1, 0.6]));
        let mut h = x;
        for l in 1..=3 {
            let w = tape.param(&format!("w{l}"), p[&format!("w{l}")].clone());
            let b = tape.param(&format!("b{l}"), p[&format!("b{l}")].clone());
            let z = tape.matmul(h, w)?;
            let z = tape.add_bias(z, b)?;
            h = if l < 3 { tape.tanh(z) } else { z };
        }
        let pooled = tape.mean_pool_masked(h, &[1.0, 0.5, 0.0])?;
        let probs = tape.softmax(pooled)?;
        tape.soft_cross_entropy(&[probs], &[vec![0.2, 0.7, 0.1]])
    }

    #[test]
    fn three_layer_network_passes_grad_check() {
        let p = mlp_params(3);
        let r = grad_check(&p, mlp_loss, GradCheckOptions::default()).unwrap();
        assert!(r.coordinates >= 50);
        assert!(r.max_rel_error <= 1e-3, "{r:?}");
    }

    #[test]
    fn corrupted_tanh_rule_fails_grad_check() {
        let p = mlp_params(3);
        let opts = GradCheckOptions {
            fault: Fault::TanhDerivative,
            ..Default::default()
        };
        let r = grad_check(&p, mlp_loss, opts).unwrap();
        assert!(r.max_rel_error >= 1e-1, "{r:?}");
    }

    #[test]
    fn constant_loss_has_zero_error() {
        let p = mlp_params(1);
        let r = grad_check(
            &p,
            |_, tape| {
                let c = tape.leaf(Tensor::scalar(1.25));
                Ok(tape.sum(c))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn grad_check_rejects_bad_eps() {
        let p = mlp_params(1);
        let opts = GradCheckOptions {
            eps: 1.0,
            ..Default::default()
        };
        assert!(grad_check(&p, mlp_loss, opts).is_err());
    }
}
