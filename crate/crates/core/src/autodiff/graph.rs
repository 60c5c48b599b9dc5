//! Arena-backed computation graph. Nodes are appended in evaluation order,
//! so walking the arena backwards is a valid reverse topological order.

use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{AutodiffError, Scalar, Tensor};
use crate::geometry::{sample_backward, sample_cells, sample_forward, warp_grid_backward, warp_grid_forward, Border, TpsBasis, WarpMode};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics source.
#[derive(Debug, Clone, Copy)]
pub enum NormMode<'a, T> {
    /// Normalize with the batch statistics and record them under `name`.
    Train { name: &'a str },
    /// Normalize with stored running statistics.
    Eval { mean: &'a [T], var: &'a [T] },
}

/// Batch statistics recorded by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnStats<T> {
    pub name: String,
    pub mean: Vec<T>,
    /// Unbiased (n − 1) variance.
    pub var: Vec<T>,
}

#[derive(Debug, Clone)]
enum Leaf {
    Input,
    Variable,
    Param(String),
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf(Leaf),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Square(Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    ConvT2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Relu(Var),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    ClampMin(Var, T),
    Sum(Var),
    Mean(Var),
    MeanPerSample(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    Reshape(Var),
    WarpGrid { theta: Var, basis: Arc<TpsBasis<T>>, base: Arc<Vec<[T; 2]>>, mode: WarpMode },
    BilinearSample { img: Var, grid: Var, border: Border },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Square(_) => "square",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvT2d { .. } => "conv_transpose2d",
            Op::MaxPool2 { .. } => "max_pool2d",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Relu(_) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Abs(_) => "abs",
            Op::ClampMin(..) => "clamp_min",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::MeanPerSample(_) => "mean_per_sample",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(_) => "reshape",
            Op::WarpGrid { .. } => "warp_grid",
            Op::BilinearSample { .. } => "bilinear_sample",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    vars: HashMap<usize, Tensor<T>>,
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a `variable` leaf (zeros if it did not influence the loss).
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.vars.get(&v.0)
    }

    /// Gradient for a named parameter, summed over every use in the graph.
    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.params
    }
}

/// A single forward pass worth of nodes.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bn_stats: Vec<BnStats<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &str, a: &[usize], b: &[usize]) -> AutodiffError {
    AutodiffError::Shape(format!("{op}: incompatible shapes {a:?} and {b:?}"))
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bn_stats: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Batch statistics recorded by training-mode batch norms, in call order.
    pub fn bn_stats(&self) -> &[BnStats<T>] {
        &self.bn_stats
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var, AutodiffError> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite {
                op: op.name(),
                stage: "forward",
            });
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    /// Constant leaf; never receives gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var, AutodiffError> {
        self.push(value, Op::Leaf(Leaf::Input), false)
    }

    /// Anonymous leaf whose gradient is reported via [`Gradients::wrt`].
    pub fn variable(&mut self, value: Tensor<T>) -> Result<Var, AutodiffError> {
        self.push(value, Op::Leaf(Leaf::Variable), true)
    }

    /// Named trainable leaf; gradients are summed by name.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> Result<Var, AutodiffError> {
        self.push(value, Op::Leaf(Leaf::Param(name.to_string())), true)
    }

    /// Same value, cut from the gradient tape.
    pub fn detach(&mut self, v: Var) -> Result<Var, AutodiffError> {
        let value = self.nodes[v.0].value.clone();
        self.input(value)
    }

    fn binary_same(&mut self, a: Var, b: Var, name: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(shape_err(name, sa, sb));
        }
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(sa, data)
    }

    fn unary(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let v = &self.nodes[a.0].value;
        Tensor::new(v.shape(), v.data().iter().map(|x| f(*x)).collect()).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.binary_same(a, b, "add", |x, y| x + y)?;
        self.push_op(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.binary_same(a, b, "sub", |x, y| x - y)?;
        self.push_op(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let t = self.binary_same(a, b, "mul", |x, y| x * y)?;
        self.push_op(t, Op::Mul(a, b), &[a, b])
    }

    pub fn square(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.unary(a, |x| x * x);
        self.push_op(t, Op::Square(a), &[a])
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var, AutodiffError> {
        let t = self.unary(a, |x| x * c);
        self.push_op(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var, AutodiffError> {
        let t = self.unary(a, |x| x + c);
        self.push_op(t, Op::AddScalar(a), &[a])
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.data(a), k as isize, 1, self.data(b), n as isize, 1, T::zero(), &mut out, n as isize, 1);
        let t = Tensor::new(&[m, n], out)?;
        self.push_op(t, Op::MatMul(a, b), &[a, b])
    }

    /// `x[B, in] · w[out, in]ᵀ + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, AutodiffError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(shape_err("linear", &sx, &sw));
        }
        let (bsz, din, dout) = (sx[0], sx[1], sw[0]);
        let mut out = vec![T::zero(); bsz * dout];
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("linear bias", self.shape(b), &[dout]));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(self.data(b));
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        T::gemm(bsz, din, dout, T::one(), self.data(x), din as isize, 1, self.data(w), 1, din as isize, beta, &mut out, dout as isize, 1);
        let t = Tensor::new(&[bsz, dout], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push_op(t, Op::Linear { x, w, b }, &ins)
    }

    fn conv_common(&self, x: Var, w: Var, b: Option<Var>, transpose: bool, stride: usize, pad: usize) -> Result<(ConvGeom, usize), AutodiffError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let name = if transpose { "conv_transpose2d" } else { "conv2d" };
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(shape_err(name, &sx, &sw));
        }
        let k = sw[2];
        let (bsz, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let geom = if !transpose {
            if sw[1] != c {
                return Err(shape_err(name, &sx, &sw));
            }
            ConvGeom::conv(c, h, wd, sw[0], k, stride, pad)
        } else {
            // weight [c_in_t, c_out_t, k, k] in the transposed sense = [geom.c_out, geom.c_in, k, k]
            if sw[0] != c || stride == 0 {
                return Err(shape_err(name, &sx, &sw));
            }
            let ho = (h - 1) * stride + k;
            let wo = (wd - 1) * stride + k;
            if ho < 2 * pad + 1 || wo < 2 * pad + 1 {
                return Err(shape_err(name, &sx, &sw));
            }
            ConvGeom::conv(sw[1], ho - 2 * pad, wo - 2 * pad, c, k, stride, pad).filter(|g| g.ho == h && g.wo == wd)
        }
        .ok_or_else(|| shape_err(name, &sx, &sw))?;
        if let Some(b) = b {
            let expect = if transpose { geom.c_in } else { geom.c_out };
            if self.shape(b) != [expect] {
                return Err(shape_err(name, self.shape(b), &[expect]));
            }
        }
        Ok((geom, bsz))
    }

    /// `x[B, C, H, W]`, `w[C_out, C, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, AutodiffError> {
        let (geom, bsz) = self.conv_common(x, w, b, false, stride, pad)?;
        let out = kernels::conv2d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &geom, bsz);
        let t = Tensor::new(&[bsz, geom.c_out, geom.ho, geom.wo], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push_op(t, Op::Conv2d { x, w, b, geom }, &ins)
    }

    /// `x[B, C, H, W]`, `w[C, C_out, k, k]`; output side `(H − 1)·stride + k − 2·pad`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var, AutodiffError> {
        let (geom, bsz) = self.conv_common(x, w, b, true, stride, pad)?;
        let out = kernels::conv_transpose2d_forward(self.data(x), self.data(w), b.map(|b| self.data(b)), &geom, bsz);
        let t = Tensor::new(&[bsz, geom.c_in, geom.h, geom.w], out)?;
        let mut ins = vec![x, w];
        ins.extend(b);
        self.push_op(t, Op::ConvT2d { x, w, b, geom }, &ins)
    }

    /// 2×2 max pooling with stride 2 on `[B, C, H, W]` (H, W even).
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || !s[2].is_multiple_of(2) || !s[3].is_multiple_of(2) {
            return Err(AutodiffError::Shape(format!("max_pool2d: needs [B,C,even H,even W], got {s:?}")));
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let (ho, wo) = (h / 2, w / 2);
        let src = self.data(x);
        let mut out = Vec::with_capacity(planes * ho * wo);
        let mut argmax = Vec::with_capacity(planes * ho * wo);
        for p in 0..planes {
            let base = p * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    out.push(src[best]);
                    argmax.push(best);
                }
            }
        }
        let t = Tensor::new(&[s[0], s[1], ho, wo], out)?;
        self.push_op(t, Op::MaxPool2 { x, argmax }, &[x])
    }

    /// Per-channel normalization over axis 1 of `[B, C, ...]`.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, mode: NormMode<'_, T>) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(shape_err("batch_norm", &s, self.shape(gamma)));
        }
        let (bsz, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let m = bsz * inner;
        let xd = self.data(x);
        let eps = T::lit(eps);
        let mut record = None;
        let (mean, var, train) = match mode {
            NormMode::Train { name } => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for b in 0..bsz {
                        acc += xd[(b * c + ch) * inner..][..inner].iter().copied().sum::<T>();
                    }
                    mean[ch] = acc / T::lit(m as f64);
                    let mut sq = T::zero();
                    for b in 0..bsz {
                        for v in &xd[(b * c + ch) * inner..][..inner] {
                            let d = *v - mean[ch];
                            sq += d * d;
                        }
                    }
                    var[ch] = sq / T::lit(m as f64);
                }
                let unbiased = if m > 1 {
                    var.iter().map(|v| *v * T::lit(m as f64 / (m - 1) as f64)).collect()
                } else {
                    var.clone()
                };
                record = Some(BnStats {
                    name: name.to_string(),
                    mean: mean.clone(),
                    var: unbiased,
                });
                (mean, var, true)
            }
            NormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(shape_err("batch_norm running stats", &[mean.len()], &[c]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gd[ch] * h + bd[ch];
                }
            }
        }
        let t = Tensor::new(&s, out)?;
        self.bn_stats.extend(record);
        self.push_op(t, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, &[x, gamma, beta])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.unary(a, |x| x.max(T::zero()));
        self.push_op(t, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, AutodiffError> {
        let s = T::lit(slope);
        let t = self.unary(a, |x| if x > T::zero() { x } else { x * s });
        self.push_op(t, Op::LeakyRelu(a, s), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.unary(a, |x| x.tanh());
        self.push_op(t, Op::Tanh(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.unary(a, |x| T::one() / (T::one() + (-x).exp()));
        self.push_op(t, Op::Sigmoid(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.unary(a, |x| x.exp());
        self.push_op(t, Op::Exp(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.unary(a, |x| x.ln());
        self.push_op(t, Op::Log(a), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let t = self.unary(a, |x| x.abs());
        self.push_op(t, Op::Abs(a), &[a])
    }

    pub fn clamp_min(&mut self, a: Var, min: f64) -> Result<Var, AutodiffError> {
        let m = T::lit(min);
        let t = self.unary(a, |x| x.max(m));
        self.push_op(t, Op::ClampMin(a, m), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.data(a).iter().copied().sum::<T>();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let n = self.data(a).len();
        if n == 0 {
            return Err(AutodiffError::Shape("mean of empty tensor".into()));
        }
        let s = self.data(a).iter().copied().sum::<T>() / T::lit(n as f64);
        self.push_op(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// `[B, ...]` → `[B]`.
    pub fn mean_per_sample(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || s[0] == 0 {
            return Err(AutodiffError::Shape(format!("mean_per_sample on {s:?}")));
        }
        let inner = self.data(a).len() / s[0];
        let out = self
            .data(a)
            .chunks(inner.max(1))
            .map(|c| c.iter().copied().sum::<T>() / T::lit(inner as f64))
            .collect();
        let t = Tensor::new(&[s[0]], out)?;
        self.push_op(t, Op::MeanPerSample(a), &[a])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| AutodiffError::Shape("concat of nothing".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(AutodiffError::Shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            if s.len() != first.len() || s.iter().enumerate().any(|(i, d)| i != axis && *d != first[i]) {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis] * inner;
                out.extend_from_slice(&self.data(*v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let t = Tensor::new(&shape, out)?;
        self.push_op(t, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(AutodiffError::Shape(format!("narrow [{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let d = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let t = Tensor::new(&shape, out)?;
        self.push_op(t, Op::Narrow { x, axis, start }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.nodes[x.0].value.clone().reshaped(shape)?;
        self.push_op(t, Op::Reshape(x), &[x])
    }

    /// `theta[B, 2n + 4]` → source grid `[B, H, W, 2]`.
    pub fn warp_grid(&mut self, theta: Var, basis: Arc<TpsBasis<T>>, height: usize, width: usize, mode: WarpMode) -> Result<Var, AutodiffError> {
        let s = self.shape(theta).to_vec();
        let plen = 2 * basis.num_points() + 4;
        if s.len() != 2 || s[1] != plen {
            return Err(shape_err("warp_grid", &s, &[s.first().copied().unwrap_or(0), plen]));
        }
        let base = Arc::new(crate::geometry::base_grid::<T>(height, width));
        let mut out = Vec::with_capacity(s[0] * height * width * 2);
        for th in self.data(theta).chunks(plen) {
            out.extend(warp_grid_forward(th, &basis, &base, mode));
        }
        let t = Tensor::new(&[s[0], height, width, 2], out)?;
        self.push_op(t, Op::WarpGrid { theta, basis, base, mode }, &[theta])
    }

    /// `img[B, C, H, W]` read at `grid[B, Ho, Wo, 2]` → `[B, C, Ho, Wo]`.
    pub fn bilinear_sample(&mut self, img: Var, grid: Var, border: Border) -> Result<Var, AutodiffError> {
        let si = self.shape(img).to_vec();
        let sg = self.shape(grid).to_vec();
        if si.len() != 4 || sg.len() != 4 || sg[3] != 2 || sg[0] != si[0] {
            return Err(shape_err("bilinear_sample", &si, &sg));
        }
        let (bsz, c, h, w) = (si[0], si[1], si[2], si[3]);
        let npts = sg[1] * sg[2];
        let mut out = Vec::with_capacity(bsz * c * npts);
        for b in 0..bsz {
            let im = &self.data(img)[b * c * h * w..(b + 1) * c * h * w];
            let gr = &self.data(grid)[b * npts * 2..(b + 1) * npts * 2];
            out.extend(sample_forward(im, c, h, w, gr, border));
        }
        let t = Tensor::new(&[bsz, c, sg[1], sg[2]], out)?;
        self.push_op(t, Op::BilinearSample { img, grid, border }, &[img, grid])
    }

    /// Hash of every branch taken by a piecewise op (ReLU signs, pooling
    /// winners, |x| signs, clamp activity, interpolation cells). Two passes
    /// with equal signatures evaluate the same smooth piece.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let signs = |v: Var, h: &mut DefaultHasher, at: T| {
                for x in self.data(v) {
                    (*x > at).hash(h);
                }
            };
            match &node.op {
                Op::Relu(a) | Op::LeakyRelu(a, _) | Op::Abs(a) => {
                    i.hash(&mut h);
                    signs(*a, &mut h, T::zero());
                    if matches!(node.op, Op::Abs(_)) {
                        for x in self.data(*a) {
                            (*x < T::zero()).hash(&mut h);
                        }
                    }
                }
                Op::ClampMin(a, m) => {
                    i.hash(&mut h);
                    signs(*a, &mut h, *m);
                }
                Op::MaxPool2 { argmax, .. } => {
                    i.hash(&mut h);
                    argmax.hash(&mut h);
                }
                Op::BilinearSample { img, grid, border } => {
                    i.hash(&mut h);
                    let si = self.shape(*img);
                    sample_cells(self.data(*grid), si[2], si[3], *border).hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(AutodiffError::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients {
            vars: HashMap::new(),
            params: BTreeMap::new(),
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(AutodiffError::NonFinite {
                    op: node.op.name(),
                    stage: "backward",
                });
            }
            self.backprop_node(i, node, g, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, idx: usize, node: &Node<T>, g: Vec<T>, grads: &mut [Option<Vec<T>>], out: &mut Gradients<T>) -> Result<(), AutodiffError> {
        let len = |v: Var| self.nodes[v.0].value.len();
        macro_rules! acc {
            ($v:expr, $f:expr) => {{
                let v: Var = $v;
                if self.wants(v) {
                    accumulate(&mut grads[v.0], len(v), $f);
                }
            }};
        }
        match &node.op {
            Op::Leaf(Leaf::Input) => {}
            Op::Leaf(Leaf::Variable) => {
                out.vars.insert(idx, Tensor::new(node.value.shape(), g)?);
            }
            Op::Leaf(Leaf::Param(name)) => match out.params.get_mut(name) {
                Some(t) => {
                    if t.shape() != node.value.shape() {
                        return Err(shape_err(&format!("parameter {name}"), t.shape(), node.value.shape()));
                    }
                    t.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += *b);
                }
                None => {
                    out.params.insert(name.clone(), Tensor::new(node.value.shape(), g)?);
                }
            },
            Op::Add(a, b) => {
                acc!(*a, |d: &mut [T]| d.iter_mut().zip(&g).for_each(|(x, y)| *x += *y));
                acc!(*b, |d: &mut [T]| d.iter_mut().zip(&g).for_each(|(x, y)| *x += *y));
            }
            Op::Sub(a, b) => {
                acc!(*a, |d: &mut [T]| d.iter_mut().zip(&g).for_each(|(x, y)| *x += *y));
                acc!(*b, |d: &mut [T]| d.iter_mut().zip(&g).for_each(|(x, y)| *x -= *y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                acc!(*a, |d: &mut [T]| d.iter_mut().zip(&g).zip(bv).for_each(|((x, y), z)| *x += *y * *z));
                acc!(*b, |d: &mut [T]| d.iter_mut().zip(&g).zip(av).for_each(|((x, y), z)| *x += *y * *z));
            }
            Op::Square(a) => {
                let av = self.data(*a);
                let two = T::lit(2.0);
                acc!(*a, |d: &mut [T]| d.iter_mut().zip(&g).zip(av).for_each(|((x, y), z)| *x += two * *y * *z));
            }
            Op::Scale(a, c) => {
                let c = *c;
                acc!(*a, |d: &mut [T]| d.iter_mut().zip(&g).for_each(|(x, y)| *x += *y * c));
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc!(*a, |d: &mut [T]| d.iter_mut().zip(&g).for_each(|(x, y)| *x += *y));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.data(*a), self.data(*b));
                // dA = G Bᵀ, dB = Aᵀ G
                acc!(*a, |d: &mut [T]| T::gemm(m, n, k, T::one(), &g, n as isize, 1, bv, 1, n as isize, T::one(), d, k as isize, 1));
                acc!(*b, |d: &mut [T]| T::gemm(k, m, n, T::one(), av, 1, k as isize, &g, n as isize, 1, T::one(), d, n as isize, 1));
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (bsz, din, dout) = (sx[0], sx[1], sw[0]);
                let (xv, wv) = (self.data(*x), self.data(*w));
                acc!(*x, |d: &mut [T]| T::gemm(bsz, dout, din, T::one(), &g, dout as isize, 1, wv, din as isize, 1, T::one(), d, din as isize, 1));
                acc!(*w, |d: &mut [T]| T::gemm(dout, bsz, din, T::one(), &g, 1, dout as isize, xv, din as isize, 1, T::one(), d, din as isize, 1));
                if let Some(b) = b {
                    acc!(*b, |d: &mut [T]| {
                        for row in g.chunks(dout) {
                            d.iter_mut().zip(row).for_each(|(x, y)| *x += *y);
                        }
                    });
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let bsz = self.shape(*x)[0];
                let (dx, dw, db) = kernels::conv2d_backward(self.data(*x), self.data(*w), &g, geom, bsz, self.wants(*x), self.wants(*w));
                if let Some(dx) = dx {
                    acc!(*x, |d: &mut [T]| d.iter_mut().zip(dx).for_each(|(a, v)| *a += v));
                }
                if let Some(dw) = dw {
                    acc!(*w, |d: &mut [T]| d.iter_mut().zip(dw).for_each(|(a, v)| *a += v));
                }
                if let Some(b) = b {
                    acc!(*b, |d: &mut [T]| d.iter_mut().zip(db).for_each(|(a, v)| *a += v));
                }
            }
            Op::ConvT2d { x, w, b, geom } => {
                let bsz = self.shape(*x)[0];
                let (dx, dw, db) = kernels::conv_transpose2d_backward(self.data(*x), self.data(*w), &g, geom, bsz, self.wants(*x), self.wants(*w));
                if let Some(dx) = dx {
                    acc!(*x, |d: &mut [T]| d.iter_mut().zip(dx).for_each(|(a, v)| *a += v));
                }
                if let Some(dw) = dw {
                    acc!(*w, |d: &mut [T]| d.iter_mut().zip(dw).for_each(|(a, v)| *a += v));
                }
                if let Some(b) = b {
                    acc!(*b, |d: &mut [T]| d.iter_mut().zip(db).for_each(|(a, v)| *a += v));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                acc!(*x, |d: &mut [T]| {
                    for (gi, src) in g.iter().zip(argmax) {
                        d[*src] += *gi;
                    }
                });
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let s = self.shape(*x);
                let (bsz, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let m = T::lit((bsz * inner) as f64);
                let gd = self.data(*gamma);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..bsz {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        for i in off..off + inner {
                            dgamma[ch] += g[i] * xhat[i];
                            dbeta[ch] += g[i];
                        }
                    }
                }
                acc!(*x, |d: &mut [T]| {
                    for b in 0..bsz {
                        for ch in 0..c {
                            let off = (b * c + ch) * inner;
                            let k = gd[ch] * inv_std[ch];
                            for i in off..off + inner {
                                d[i] += if *train {
                                    k * (g[i] - dbeta[ch] / m - xhat[i] * dgamma[ch] / m)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                });
                acc!(*gamma, |d: &mut [T]| d.iter_mut().zip(&dgamma).for_each(|(a, v)| *a += *v));
                acc!(*beta, |d: &mut [T]| d.iter_mut().zip(&dbeta).for_each(|(a, v)| *a += *v));
            }
            Op::Relu(a) => {
                let y = node.value.data();
                acc!(*a, |d: &mut [T]| d.iter_mut().zip(&g).zip(y).for_each(|((x, gi), yi)| {
                    if *yi > T::zero() {
                        *x += *gi
                    }
                }));
            }
            Op::LeakyRelu(a, s) => {
                let av = self.data(*a);
                let s = *s;
                acc!(*a, |d: &mut [T]| d.iter_mut().zip(&g).zip(av).for_each(|((x, gi), ai)| {
                    *x += if *ai > T::zero() { *gi } else { *gi * s }
                }));
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                acc!(*a, |d: &mut [T]| d.iter_mut().zip(&g).zip(y).for_each(|((x, gi), yi)| *x += *gi * (T::one() - *yi * *yi)));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc!(*a, |d: &mut [T]| d.iter_mut().zip(&g).zip(y).for_each(|((x, gi), yi)| *x += *gi * *yi * (T::one() - *yi)));
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc!(*a, |d: &mut [T]| d.iter_mut().zip(&g).zip(y).for_each(|((x, gi), yi)| *x += *gi * *yi));
            }
            Op::Log(a) => {
                let av = self.data(*a);
                acc!(*a, |d: &mut [T]| d.iter_mut().zip(&g).zip(av).for_each(|((x, gi), ai)| *x += *gi / *ai));
            }
            Op::Abs(a) => {
                let av = self.data(*a);
                acc!(*a, |d: &mut [T]| d.iter_mut().zip(&g).zip(av).for_each(|((x, gi), ai)| {
                    if *ai > T::zero() {
                        *x += *gi
                    } else if *ai < T::zero() {
                        *x -= *gi
                    }
                }));
            }
            Op::ClampMin(a, m) => {
                let av = self.data(*a);
                let m = *m;
                acc!(*a, |d: &mut [T]| d.iter_mut().zip(&g).zip(av).for_each(|((x, gi), ai)| {
                    if *ai > m {
                        *x += *gi
                    }
                }));
            }
            Op::Sum(a) => {
                let g0 = g[0];
                acc!(*a, |d: &mut [T]| d.iter_mut().for_each(|x| *x += g0));
            }
            Op::Mean(a) => {
                let g0 = g[0] / T::lit(len(*a) as f64);
                acc!(*a, |d: &mut [T]| d.iter_mut().for_each(|x| *x += g0));
            }
            Op::MeanPerSample(a) => {
                let inner = len(*a) / g.len();
                let scale = T::one() / T::lit(inner as f64);
                acc!(*a, |d: &mut [T]| {
                    for (chunk, gi) in d.chunks_mut(inner.max(1)).zip(&g) {
                        chunk.iter_mut().for_each(|x| *x += *gi * scale);
                    }
                });
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for v in inputs {
                    let w = self.shape(*v)[*axis] * inner;
                    acc!(*v, |d: &mut [T]| {
                        for o in 0..outer {
                            let src = &g[o * total + offset..o * total + offset + w];
                            d[o * w..(o + 1) * w].iter_mut().zip(src).for_each(|(a, b)| *a += *b);
                        }
                    });
                    offset += w;
                }
            }
            Op::Narrow { x, axis, start } => {
                let s = self.shape(*x);
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let w = node.value.shape()[*axis] * inner;
                let full = s[*axis];
                acc!(*x, |d: &mut [T]| {
                    for o in 0..outer {
                        let base = (o * full + start) * inner;
                        d[base..base + w].iter_mut().zip(&g[o * w..(o + 1) * w]).for_each(|(a, b)| *a += *b);
                    }
                });
            }
            Op::WarpGrid { theta, basis, base, mode } => {
                let plen = self.shape(*theta)[1];
                let npts = base.len() * 2;
                let th = self.data(*theta);
                acc!(*theta, |d: &mut [T]| {
                    for (b, (tc, dc)) in th.chunks(plen).zip(d.chunks_mut(plen)).enumerate() {
                        warp_grid_backward(tc, basis, base, *mode, &g[b * npts..(b + 1) * npts], dc);
                    }
                });
            }
            Op::BilinearSample { img, grid, border } => {
                let si = self.shape(*img);
                let (bsz, c, h, w) = (si[0], si[1], si[2], si[3]);
                let sg = self.shape(*grid);
                let npts = sg[1] * sg[2];
                let (iv, gv) = (self.data(*img), self.data(*grid));
                let (want_i, want_g) = (self.wants(*img), self.wants(*grid));
                let mut dimg = want_i.then(|| vec![T::zero(); iv.len()]);
                let mut dgrid = want_g.then(|| vec![T::zero(); gv.len()]);
                for b in 0..bsz {
                    let isz = c * h * w;
                    sample_backward(
                        &iv[b * isz..(b + 1) * isz],
                        c,
                        h,
                        w,
                        &gv[b * npts * 2..(b + 1) * npts * 2],
                        *border,
                        &g[b * c * npts..(b + 1) * c * npts],
                        dimg.as_mut().map(|d| &mut d[b * isz..(b + 1) * isz]),
                        dgrid.as_mut().map(|d| &mut d[b * npts * 2..(b + 1) * npts * 2]),
                    );
                }
                if let Some(di) = dimg {
                    acc!(*img, |d: &mut [T]| d.iter_mut().zip(di).for_each(|(a, v)| *a += v));
                }
                if let Some(dg) = dgrid {
                    acc!(*grid, |d: &mut [T]| d.iter_mut().zip(dg).for_each(|(a, v)| *a += v));
                }
            }
        }
        Ok(())
    }
}
