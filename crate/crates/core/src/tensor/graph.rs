use super::kernels::{batched_to_mat, col2im_add, im2col, mat_to_batched, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Variance floor inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Relu(Var),
    Square(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    WeightedSum(Vec<(Var, f64)>),
    Softmax(Var),
    LogSoftmax(Var),
    MatMul(Var, Var),
    Conv1d {
        x: Var,
        w: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    ChannelBias(Var, Var),
    WeightNorm {
        v: Var,
        g: Var,
        norms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<f64>,
    },
    Concat(Vec<Var>),
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    RepeatTime(Var),
    GatherChannels {
        x: Var,
        indices: Vec<usize>,
    },
    Reshape(Var),
}

impl<T: Real> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Abs(..) => "abs",
            Op::Relu(..) => "relu",
            Op::Square(..) => "square",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::WeightedSum(..) => "weighted_sum",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::MatMul(..) => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::ChannelBias(..) => "channel_bias",
            Op::WeightNorm { .. } => "weight_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat(..) => "concat_channels",
            Op::Embedding { .. } => "embedding",
            Op::RepeatTime(..) => "repeat_time",
            Op::GatherChannels { .. } => "gather_channels",
            Op::Reshape(..) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::ChannelBias(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Abs(a)
            | Op::Relu(a)
            | Op::Square(a)
            | Op::Clamp(a, ..)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::RepeatTime(a)
            | Op::Reshape(a) => vec![*a],
            Op::WeightedSum(terms) => terms.iter().map(|(v, _)| *v).collect(),
            Op::Conv1d { x, w, .. } => vec![*x, *w],
            Op::WeightNorm { v, g, .. } => vec![*v, *g],
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Concat(vs) => vs.clone(),
            Op::Embedding { table, .. } => vec![*table],
            Op::GatherChannels { x, .. } => vec![*x],
        }
    }
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    /// 64-bit value of scalar reductions.
    exact: Option<f64>,
    op: Op<T>,
    requires_grad: bool,
}

/// A dynamically built computation graph, rebuilt for every step.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and backward is a single reverse sweep.
#[derive(Debug)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Graph { nodes: Vec::new() }
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` does not require
    /// gradients or does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

/// `(batch, channels, time)` view of a rank-2 `[C, T]` or rank-3 `[B, C, T]` shape.
fn bct(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, t] => Ok((1, c, t)),
        [b, c, t] => Ok((b, c, t)),
        _ => Err(Error::dim(format!(
            "{what}: expected [C, T] or [B, C, T], got {shape:?}"
        ))),
    }
}

fn same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{what}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn map<T: Real>(t: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
    Tensor {
        shape: t.shape.clone(),
        data: t.data.iter().map(|&v| f(v)).collect(),
    }
}

fn zip<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

fn sum64<T: Real>(xs: &[T]) -> f64 {
    xs.iter().map(|v| v.as_f64()).sum()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Every node in creation order.
    pub fn vars(&self) -> impl Iterator<Item = Var> {
        (0..self.nodes.len()).map(Var)
    }

    fn push(&mut self, value: Tensor<T>, exact: Option<f64>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() || exact.is_some_and(|e| !e.is_finite()) {
            return Err(Error::NonFinite(op.name().to_string()));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            exact,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node {
            value,
            exact: None,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the op that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Direct inputs of the op that produced `v`.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    /// Value of a one-element tensor, in 64-bit precision when the node
    /// is a reduction.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        if node.value.len() != 1 {
            return Err(Error::Usage(format!(
                "scalar requested from tensor of shape {:?}",
                node.value.shape()
            )));
        }
        Ok(node.exact.unwrap_or(node.value.data[0].as_f64()))
    }

    // ── elementwise ────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "add")?;
        let out = zip(ta, tb, |x, y| x + y);
        self.push(out, None, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "sub")?;
        let out = zip(ta, tb, |x, y| x - y);
        self.push(out, None, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "mul")?;
        let out = zip(ta, tb, |x, y| x * y);
        self.push(out, None, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape(ta, tb, "div")?;
        let out = zip(ta, tb, |x, y| x / y);
        self.push(out, None, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let out = map(self.value(a), |x| x * c);
        self.push(out, None, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::of(c);
        let out = map(self.value(a), |x| x + c);
        self.push(out, None, Op::AddScalar(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), T::exp);
        self.push(out, None, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), T::ln);
        self.push(out, None, Op::Log(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), T::abs);
        self.push(out, None, Op::Abs(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), |x| x.max(T::zero()));
        self.push(out, None, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let out = map(self.value(a), |x| x * x);
        self.push(out, None, Op::Square(a))
    }

    /// Elementwise clamp into `[lo, hi]`; gradient passes where
    /// `lo <= x <= hi`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo >= hi || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::config(format!("clamp range [{lo}, {hi}] is empty")));
        }
        let (lo, hi) = (T::of(lo), T::of(hi));
        let out = map(self.value(a), |x| x.max(lo).min(hi));
        self.push(out, None, Op::Clamp(a, lo, hi))
    }

    // ── reductions ─────────────────────────────────────────────────────

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = sum64(&self.value(a).data);
        self.push(Tensor::scalar(T::of(s)), Some(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = sum64(&t.data) / t.len() as f64;
        self.push(Tensor::scalar(T::of(s)), Some(s), Op::Mean(a))
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes, accumulated from their 64-bit values.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        if terms.is_empty() {
            return Err(Error::Usage("weighted_sum of no terms".into()));
        }
        let mut s = 0.0f64;
        for &(v, w) in terms {
            s += w * self.scalar(v)?;
        }
        self.push(Tensor::scalar(T::of(s)), Some(s), Op::WeightedSum(terms.to_vec()))
    }

    // ── channel-axis ops on [C, T] / [B, C, T] ────────────────────────

    /// Softmax over the channel axis, independently for every frame.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (b, c, n) = bct(t.shape(), "softmax")?;
        let mut out = t.clone();
        let mut e = vec![0.0f64; c];
        for bi in 0..b {
            for ti in 0..n {
                let idx = |ci: usize| (bi * c + ci) * n + ti;
                let max = (0..c)
                    .map(|ci| t.data[idx(ci)].as_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0f64;
                for (ci, ev) in e.iter_mut().enumerate() {
                    *ev = (t.data[idx(ci)].as_f64() - max).exp();
                    z += *ev;
                }
                for (ci, ev) in e.iter().enumerate() {
                    out.data[idx(ci)] = T::of(ev / z);
                }
            }
        }
        self.push(out, None, Op::Softmax(a))
    }

    /// Log-softmax over the channel axis, independently for every frame.
    pub fn log_softmax_channels(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (b, c, n) = bct(t.shape(), "log_softmax")?;
        let mut out = t.clone();
        for bi in 0..b {
            for ti in 0..n {
                let idx = |ci: usize| (bi * c + ci) * n + ti;
                let max = (0..c)
                    .map(|ci| t.data[idx(ci)].as_f64())
                    .fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c)
                    .map(|ci| (t.data[idx(ci)].as_f64() - max).exp())
                    .sum();
                let lse = max + z.ln();
                for ci in 0..c {
                    out.data[idx(ci)] = T::of(t.data[idx(ci)].as_f64() - lse);
                }
            }
        }
        self.push(out, None, Op::LogSoftmax(a))
    }

    /// Gumbel-softmax relaxation of a categorical draw over the channel axis:
    /// `softmax((logits + g) / tau)` with fresh standard Gumbel noise `g`.
    pub fn gumbel_softmax(&mut self, logits: Var, tau: f64, rng: &mut Rng) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::config(format!(
                "gumbel temperature must be > 0, got {tau}"
            )));
        }
        let shape = self.value(logits).shape().to_vec();
        bct(&shape, "gumbel_softmax")?;
        let numel: usize = shape.iter().product();
        let noise: Vec<T> = (0..numel).map(|_| T::of(rng.gumbel())).collect();
        let noise = self.constant(Tensor::new(shape, noise)?)?;
        let perturbed = self.add(logits, noise)?;
        let scaled = self.scale(perturbed, 1.0 / tau)?;
        self.softmax_channels(scaled)
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let rank = self.value(first).rank();
        let (b, _, n) = bct(self.value(first).shape(), "concat")?;
        let mut total_c = 0;
        for &p in parts {
            let t = self.value(p);
            let (pb, pc, pn) = bct(t.shape(), "concat")?;
            if pb != b || pn != n || t.rank() != rank {
                return Err(Error::dim(format!(
                    "concat: part shape {:?} incompatible with {:?}",
                    t.shape(),
                    self.value(first).shape()
                )));
            }
            total_c += pc;
        }
        let mut data = Vec::with_capacity(b * total_c * n);
        for bi in 0..b {
            for &p in parts {
                let t = self.value(p);
                let pc = t.len() / (b * n);
                data.extend_from_slice(&t.data[bi * pc * n..(bi + 1) * pc * n]);
            }
        }
        let shape = if rank == 2 {
            vec![total_c, n]
        } else {
            vec![b, total_c, n]
        };
        self.push(Tensor::new(shape, data)?, None, Op::Concat(parts.to_vec()))
    }

    /// Adds `bias[c]` to every frame of channel `c`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (b, c, n) = bct(self.value(x).shape(), "channel_bias")?;
        if self.value(bias).shape() != [c] {
            return Err(Error::dim(format!(
                "channel_bias: bias {:?} for {c} channels",
                self.value(bias).shape()
            )));
        }
        let bv = self.value(bias).data.clone();
        let mut out = self.value(x).clone();
        for bi in 0..b {
            for (ci, &bc) in bv.iter().enumerate() {
                for v in &mut out.data[(bi * c + ci) * n..(bi * c + ci + 1) * n] {
                    *v = *v + bc;
                }
            }
        }
        self.push(out, None, Op::ChannelBias(x, bias))
    }

    /// Per-frame normalization over channels to zero mean and unit variance
    /// (variance floored by [`LAYER_NORM_EPS`]), then a per-channel affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let t = self.value(x);
        let (b, c, n) = bct(t.shape(), "layer_norm")?;
        for p in [gain, bias] {
            if self.value(p).shape() != [c] {
                return Err(Error::dim(format!(
                    "layer_norm: affine shape {:?} for {c} channels",
                    self.value(p).shape()
                )));
            }
        }
        let g = &self.value(gain).data;
        let be = &self.value(bias).data;
        let mut xhat = vec![T::zero(); t.len()];
        let mut inv_std = vec![0.0f64; b * n];
        let mut out = t.clone();
        for bi in 0..b {
            for ti in 0..n {
                let idx = |ci: usize| (bi * c + ci) * n + ti;
                let mean = (0..c).map(|ci| t.data[idx(ci)].as_f64()).sum::<f64>() / c as f64;
                let var = (0..c)
                    .map(|ci| (t.data[idx(ci)].as_f64() - mean).powi(2))
                    .sum::<f64>()
                    / c as f64;
                let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                inv_std[bi * n + ti] = is;
                for ci in 0..c {
                    let h = T::of((t.data[idx(ci)].as_f64() - mean) * is);
                    xhat[idx(ci)] = h;
                    out.data[idx(ci)] = g[ci] * h + be[ci];
                }
            }
        }
        self.push(
            out,
            None,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// `out[b, t] = x[b, indices[b], t]` for `x` of shape `[B, C, T]`.
    pub fn gather_channels(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let [b, c, n] = *t.shape() else {
            return Err(Error::dim(format!(
                "gather_channels: need [B, C, T], got {:?}",
                t.shape()
            )));
        };
        if indices.len() != b {
            return Err(Error::dim(format!(
                "gather_channels: {} indices for batch {b}",
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= c) {
            return Err(Error::Domain(format!(
                "channel index {bad} out of range 0..{c}"
            )));
        }
        let mut data = Vec::with_capacity(b * n);
        for (bi, &ci) in indices.iter().enumerate() {
            data.extend_from_slice(&t.data[(bi * c + ci) * n..(bi * c + ci + 1) * n]);
        }
        self.push(
            Tensor::new(vec![b, n], data)?,
            None,
            Op::GatherChannels {
                x,
                indices: indices.to_vec(),
            },
        )
    }

    // ── linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ([m, k], [k2, n]) = (ta.shape(), tb.shape()) else {
            return Err(Error::dim(format!(
                "matmul needs rank-2 operands, got {:?} and {:?}",
                ta.shape(),
                tb.shape()
            )));
        };
        let (m, k, n) = (*m, *k, *n);
        if k != *k2 {
            return Err(Error::dim(format!("matmul inner dims {k} vs {k2}")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &ta.data, k as isize, 1, &tb.data, n as isize, 1, &mut out, false);
        self.push(Tensor::new(vec![m, n], out)?, None, Op::MatMul(a, b))
    }

    /// 1-D cross-correlation along time. `x` is `[C_in, T]` or `[B, C_in, T]`,
    /// `w` is `[C_out, C_in, K]`; output frames
    /// `T' = floor((T + 2·pad − K) / stride) + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let tx = self.value(x);
        let tw = self.value(w);
        let (batch, c_in, t_in) = bct(tx.shape(), "conv1d input")?;
        let [c_out, wc_in, kernel] = *tw.shape() else {
            return Err(Error::dim(format!(
                "conv1d weight must be [C_out, C_in, K], got {:?}",
                tw.shape()
            )));
        };
        if wc_in != c_in {
            return Err(Error::dim(format!(
                "conv1d: weight expects {wc_in} input channels, got {c_in}"
            )));
        }
        if stride == 0 {
            return Err(Error::config("conv1d stride must be positive"));
        }
        let span = (t_in + 2 * pad) as isize - kernel as isize;
        if span < 0 {
            return Err(Error::dim(format!(
                "conv1d: {t_in} frames with pad {pad} shorter than kernel {kernel}"
            )));
        }
        let t_out = span as usize / stride + 1;
        let geom = ConvGeom {
            batch,
            c_in,
            t_in,
            c_out,
            kernel,
            stride,
            pad,
            t_out,
        };
        let cols = im2col(&tx.data, &geom);
        let rows = geom.cols_rows();
        let width = geom.cols_width();
        let mut mat = vec![T::zero(); c_out * width];
        T::gemm(
            c_out,
            rows,
            width,
            &tw.data,
            rows as isize,
            1,
            &cols,
            width as isize,
            1,
            &mut mat,
            false,
        );
        let data = mat_to_batched(&mat, batch, c_out, t_out);
        let shape = if tx.rank() == 2 {
            vec![c_out, t_out]
        } else {
            vec![batch, c_out, t_out]
        };
        self.push(Tensor::new(shape, data)?, None, Op::Conv1d { x, w, geom, cols })
    }

    /// Weight normalization: `w[o] = g[o] · v[o] / ‖v[o]‖` over the leading axis.
    pub fn weight_norm(&mut self, v: Var, g: Var) -> Result<Var> {
        let tv = self.value(v);
        let out_ch = tv.shape()[0];
        if self.value(g).shape() != [out_ch] {
            return Err(Error::dim(format!(
                "weight_norm: gain {:?} for {out_ch} output channels",
                self.value(g).shape()
            )));
        }
        let inner = tv.len() / out_ch;
        let gv = &self.value(g).data;
        let mut norms = Vec::with_capacity(out_ch);
        let mut out = tv.clone();
        for o in 0..out_ch {
            let row = &tv.data[o * inner..(o + 1) * inner];
            let norm = row.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Domain(format!(
                    "weight_norm: zero direction for channel {o}"
                )));
            }
            norms.push(norm);
            let s = gv[o].as_f64() / norm;
            for (dst, &src) in out.data[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                *dst = T::of(src.as_f64() * s);
            }
        }
        self.push(out, None, Op::WeightNorm { v, g, norms })
    }

    // ── indexing and shape ─────────────────────────────────────────────

    /// Rows `table[indices[r]]`, giving `[indices.len(), D]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let [rows, dim] = *t.shape() else {
            return Err(Error::dim(format!(
                "embedding table must be rank 2, got {:?}",
                t.shape()
            )));
        };
        if indices.is_empty() {
            return Err(Error::dim("embedding lookup of zero indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Domain(format!(
                "embedding index {bad} out of range 0..{rows}"
            )));
        }
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(&t.data[i * dim..(i + 1) * dim]);
        }
        self.push(
            Tensor::new(vec![indices.len(), dim], data)?,
            None,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
        )
    }

    /// `[N, D]` -> `[N, D, frames]` by repeating every entry over time.
    pub fn repeat_time(&mut self, x: Var, frames: usize) -> Result<Var> {
        let t = self.value(x);
        let [n, d] = *t.shape() else {
            return Err(Error::dim(format!(
                "repeat_time needs [N, D], got {:?}",
                t.shape()
            )));
        };
        if frames == 0 {
            return Err(Error::dim("repeat_time to zero frames"));
        }
        let data: Vec<T> = t
            .data
            .iter()
            .flat_map(|&v| std::iter::repeat(v).take(frames))
            .collect();
        self.push(Tensor::new(vec![n, d, frames], data)?, None, Op::RepeatTime(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(out, None, Op::Reshape(x))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse-mode gradients of a scalar `loss` for every node that requires
    /// gradients and influences it.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backward_node(node, &gout, &mut grads);
            grads[i] = Some(gout);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad).map(|data| Tensor {
                    shape: node.value.shape.clone(),
                    data,
                })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, gout: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value.data;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        let y = &node.value.data;

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gout));
                acc(*b, &mut |gb| add_into(gb, gout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, gout));
                acc(*b, &mut |gb| {
                    for (d, &g) in gb.iter_mut().zip(gout) {
                        *d = *d - g;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + gout[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] = gb[i] + gout[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + gout[i] / bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] = gb[i] - gout[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |ga| {
                    for (d, &g) in ga.iter_mut().zip(gout) {
                        *d = *d + *c * g;
                    }
                });
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                acc(*a, &mut |ga| add_into(ga, gout));
            }
            Op::Exp(a) => {
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + gout[i] * y[i];
                    }
                });
            }
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + gout[i] / av[i];
                    }
                });
            }
            Op::Abs(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av[i] > T::zero() {
                            ga[i] = ga[i] + gout[i];
                        } else if av[i] < T::zero() {
                            ga[i] = ga[i] - gout[i];
                        }
                    }
                });
            }
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av[i] > T::zero() {
                            ga[i] = ga[i] + gout[i];
                        }
                    }
                });
            }
            Op::Square(a) => {
                let av = val(*a);
                let two = T::of(2.0);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] = ga[i] + two * av[i] * gout[i];
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if av[i] >= *lo && av[i] <= *hi {
                            ga[i] = ga[i] + gout[i];
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let g = gout[0];
                acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d = *d + g));
            }
            Op::Mean(a) => {
                let n = nodes[a.0].value.len();
                let g = T::of(gout[0].as_f64() / n as f64);
                acc(*a, &mut |ga| ga.iter_mut().for_each(|d| *d = *d + g));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    let g = T::of(gout[0].as_f64() * w);
                    acc(v, &mut |gv| gv[0] = gv[0] + g);
                }
            }
            Op::Softmax(a) => {
                let (b, c, n) = bct(node.value.shape(), "softmax").expect("checked in forward");
                acc(*a, &mut |ga| {
                    for bi in 0..b {
                        for ti in 0..n {
                            let idx = |ci: usize| (bi * c + ci) * n + ti;
                            let dot: f64 = (0..c)
                                .map(|ci| (gout[idx(ci)] * y[idx(ci)]).as_f64())
                                .sum();
                            let dot = T::of(dot);
                            for ci in 0..c {
                                ga[idx(ci)] = ga[idx(ci)] + y[idx(ci)] * (gout[idx(ci)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let (b, c, n) =
                    bct(node.value.shape(), "log_softmax").expect("checked in forward");
                acc(*a, &mut |ga| {
                    for bi in 0..b {
                        for ti in 0..n {
                            let idx = |ci: usize| (bi * c + ci) * n + ti;
                            let total: f64 = (0..c).map(|ci| gout[idx(ci)].as_f64()).sum();
                            for ci in 0..c {
                                let p = y[idx(ci)].as_f64().exp();
                                ga[idx(ci)] =
                                    ga[idx(ci)] + T::of(gout[idx(ci)].as_f64() - p * total);
                            }
                        }
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k, n) = (ta.shape[0], ta.shape[1], tb.shape[1]);
                // da = g · bᵀ
                acc(*a, &mut |ga| {
                    T::gemm(m, n, k, gout, n as isize, 1, &tb.data, 1, n as isize, ga, true);
                });
                // db = aᵀ · g
                acc(*b, &mut |gb| {
                    T::gemm(k, m, n, &ta.data, 1, k as isize, gout, n as isize, 1, gb, true);
                });
            }
            Op::Conv1d { x, w, geom, cols } => {
                let g = geom;
                let rows = g.cols_rows();
                let width = g.cols_width();
                let gmat = batched_to_mat(gout, g.batch, g.c_out, g.t_out);
                // dW = G · colsᵀ
                acc(*w, &mut |gw| {
                    T::gemm(
                        g.c_out,
                        width,
                        rows,
                        &gmat,
                        width as isize,
                        1,
                        cols,
                        1,
                        width as isize,
                        gw,
                        true,
                    );
                });
                if nodes[x.0].requires_grad {
                    // dcols = Wᵀ · G
                    let wv = val(*w);
                    let mut dcols = vec![T::zero(); rows * width];
                    T::gemm(
                        rows,
                        g.c_out,
                        width,
                        wv,
                        1,
                        rows as isize,
                        &gmat,
                        width as isize,
                        1,
                        &mut dcols,
                        false,
                    );
                    acc(*x, &mut |gx| col2im_add(&dcols, g, gx));
                }
            }
            Op::ChannelBias(x, bias) => {
                let (b, c, n) =
                    bct(node.value.shape(), "channel_bias").expect("checked in forward");
                acc(*x, &mut |gx| add_into(gx, gout));
                acc(*bias, &mut |gb| {
                    for bi in 0..b {
                        for (ci, d) in gb.iter_mut().enumerate() {
                            let s = sum64(&gout[(bi * c + ci) * n..(bi * c + ci + 1) * n]);
                            *d = *d + T::of(s);
                        }
                    }
                });
            }
            Op::WeightNorm { v, g, norms } => {
                let vv = val(*v);
                let gv = val(*g);
                let out_ch = norms.len();
                let inner = vv.len() / out_ch;
                let dots: Vec<f64> = (0..out_ch)
                    .map(|o| {
                        (o * inner..(o + 1) * inner)
                            .map(|i| gout[i].as_f64() * vv[i].as_f64())
                            .sum()
                    })
                    .collect();
                acc(*g, &mut |gg| {
                    for o in 0..out_ch {
                        gg[o] = gg[o] + T::of(dots[o] / norms[o]);
                    }
                });
                acc(*v, &mut |gvv| {
                    for o in 0..out_ch {
                        let n = norms[o];
                        let a = gv[o].as_f64() / n;
                        let c = gv[o].as_f64() * dots[o] / (n * n * n);
                        for i in o * inner..(o + 1) * inner {
                            gvv[i] = gvv[i] + T::of(a * gout[i].as_f64() - c * vv[i].as_f64());
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (b, c, n) =
                    bct(node.value.shape(), "layer_norm").expect("checked in forward");
                let gv = val(*gain);
                acc(*gain, &mut |gg| {
                    for (i, &g) in gout.iter().enumerate() {
                        let ci = (i / n) % c;
                        gg[ci] = gg[ci] + g * xhat[i];
                    }
                });
                acc(*bias, &mut |gb| {
                    for (i, &g) in gout.iter().enumerate() {
                        let ci = (i / n) % c;
                        gb[ci] = gb[ci] + g;
                    }
                });
                acc(*x, &mut |gx| {
                    for bi in 0..b {
                        for ti in 0..n {
                            let idx = |ci: usize| (bi * c + ci) * n + ti;
                            let mut mean_d = 0.0f64;
                            let mut mean_dx = 0.0f64;
                            for ci in 0..c {
                                let d = (gout[idx(ci)] * gv[ci]).as_f64();
                                mean_d += d;
                                mean_dx += d * xhat[idx(ci)].as_f64();
                            }
                            mean_d /= c as f64;
                            mean_dx /= c as f64;
                            let is = inv_std[bi * n + ti];
                            for ci in 0..c {
                                let d = (gout[idx(ci)] * gv[ci]).as_f64();
                                let dx = is * (d - mean_d - xhat[idx(ci)].as_f64() * mean_dx);
                                gx[idx(ci)] = gx[idx(ci)] + T::of(dx);
                            }
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let (b, total_c, n) =
                    bct(node.value.shape(), "concat").expect("checked in forward");
                let mut offset = 0;
                for &p in parts {
                    let pc = nodes[p.0].value.len() / (b * n);
                    acc(p, &mut |gp| {
                        for bi in 0..b {
                            let src =
                                &gout[(bi * total_c + offset) * n..(bi * total_c + offset + pc) * n];
                            add_into(&mut gp[bi * pc * n..(bi + 1) * pc * n], src);
                        }
                    });
                    offset += pc;
                }
            }
            Op::Embedding { table, indices } => {
                let dim = nodes[table.0].value.shape[1];
                acc(*table, &mut |gt| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut gt[i * dim..(i + 1) * dim], &gout[r * dim..(r + 1) * dim]);
                    }
                });
            }
            Op::RepeatTime(x) => {
                let frames = node.value.shape[2];
                acc(*x, &mut |gx| {
                    for (i, d) in gx.iter_mut().enumerate() {
                        *d = *d + T::of(sum64(&gout[i * frames..(i + 1) * frames]));
                    }
                });
            }
            Op::GatherChannels { x, indices } => {
                let [_, c, n] = *nodes[x.0].value.shape() else {
                    unreachable!("checked in forward")
                };
                acc(*x, &mut |gx| {
                    for (bi, &ci) in indices.iter().enumerate() {
                        add_into(
                            &mut gx[(bi * c + ci) * n..(bi * c + ci + 1) * n],
                            &gout[bi * n..(bi + 1) * n],
                        );
                    }
                });
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}
