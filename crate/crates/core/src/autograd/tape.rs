use std::collections::HashMap;

use rayon::prelude::*;

use crate::autograd::conv::{self, ConvGeom};
use crate::autograd::tensor::split_axis;
use crate::autograd::{ParamId, ParamStore, Tensor, TensorError};
use crate::scalar::Scalar;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-supplied backward rule for [`Tape::custom`].
pub trait CustomOp<T>: Send {
    fn name(&self) -> &'static str;
    /// Gradients with respect to each input, in input order.
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Tensor<T>>;
}

/// Batch-norm behaviour: batch statistics (training) or fixed running statistics (inference).
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    Train,
    Infer { mean: &'a Tensor<T>, var: &'a Tensor<T> },
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BnStats<T> {
    pub mean: Tensor<T>,
    /// Unbiased variance, as accumulated into running statistics.
    pub var: Tensor<T>,
}

pub const BN_EPS: f64 = 1e-5;
pub const LN_EPS: f64 = 1e-5;

/// Per-sample input and weight gradients of a convolution.
type ConvGrads<T> = (Option<Vec<T>>, Option<Vec<T>>);

/// Probabilities are clamped to `[BCE_CLAMP, 1 - BCE_CLAMP]` inside the BCE loss.
pub const BCE_CLAMP: f64 = 1e-7;

enum Op<T> {
    Leaf,
    Param,
    Add(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
    },
    AvgPool2d {
        x: Var,
        kh: usize,
        kw: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    Relu(Var),
    Sigmoid(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Bce {
        p: Var,
        targets: Tensor<T>,
    },
    Mse {
        pred: Var,
        target: Tensor<T>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`]; retained for leaf and parameter nodes.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient per store entry, `None` for buffers and unused parameters.
    pub fn param_grads(&self, store_len: usize) -> Vec<Option<Tensor<T>>> {
        let mut out = vec![None; store_len];
        for &(id, var) in &self.params {
            out[id.0] = self.get(var).cloned();
        }
        out
    }
}

/// Single-threaded recording of a forward computation.
///
/// Nodes are appended in evaluation order, so reverse insertion order is a
/// reverse topological order for the backward sweep.
#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, detail: String) -> TensorError {
    TensorError::Shape { op, detail }
}

/// `c = op(a)·op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
fn mm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    let a_strides = if trans_a { (1, m) } else { (k, 1) };
    let b_strides = if trans_b { (1, k) } else { (n, 1) };
    T::gemm(m, k, n, a, a_strides, b, b_strides, c, (n, 1), accumulate);
}

fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out_shape, out)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
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

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a store entry; repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let entry = store.entry(id);
        self.nodes.push(Node {
            value: entry.value.clone(),
            op: Op::Param,
            needs_grad: entry.trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("add", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let ng = self.needs(a) || self.needs(b);
        self.push("add", out, Op::Add(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| v * c);
        let ng = self.needs(x);
        self.push("scale", out, Op::Scale(x, c), ng)
    }

    /// Plain 2-D product `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        mm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let ng = self.needs(a) || self.needs(b);
        self.push("matmul", Tensor::new(&[m, n], out)?, Op::MatMul(a, b), ng)
    }

    /// Batched product `[g,m,k]·[g,k,n]`, or `[g,m,k]·[g,n,k]ᵀ` when `trans_b`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err(
                "batch_matmul",
                format!("{sa:?} x {sb:?} (trans_b = {trans_b})"),
            ));
        }
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); g * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for gi in 0..g {
            mm(
                m,
                k,
                n,
                &da[gi * m * k..(gi + 1) * m * k],
                false,
                &db[gi * k * n..(gi + 1) * k * n],
                trans_b,
                &mut out[gi * m * n..(gi + 1) * m * n],
                false,
            );
        }
        let ng = self.needs(a) || self.needs(b);
        self.push(
            "batch_matmul",
            Tensor::new(&[g, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            ng,
        )
    }

    /// Affine map over the last axis: `x·w + b` with `w: [in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let in_dim = *sx.last().unwrap_or(&0);
        if sw.len() != 2 || sw[0] != in_dim {
            return Err(shape_err("linear", format!("input {sx:?}, weight {sw:?}")));
        }
        let out_dim = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [out_dim] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?}, expected [{out_dim}]", self.shape(b)),
                ));
            }
        }
        let rows = self.value(x).len() / in_dim;
        let mut out = vec![T::zero(); rows * out_dim];
        mm(
            rows,
            in_dim,
            out_dim,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(out_dim) {
                for (o, &bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = sx.clone();
        *shape.last_mut().unwrap() = out_dim;
        let ng = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push("linear", Tensor::new(&shape, out)?, Op::Linear { x, w, b }, ng)
    }

    /// Same-padded, stride-1 2-D convolution. `x: [b, c_in, h, w]`,
    /// `weight: [c_out, c_in, kh, kw]` with odd kernel sides.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(weight).to_vec();
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] || sw[2].is_multiple_of(2) || sw[3].is_multiple_of(2) {
            return Err(shape_err("conv2d", format!("input {sx:?}, weight {sw:?}")));
        }
        let (bsz, cin, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(shape_err("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let hw = h * w;
        let xd = self.value(x).data();
        let wd = self.value(weight).data();
        let bd = bias.map(|b| self.value(b).data());
        let geom = ConvGeom {
            cin,
            cout,
            h,
            w,
            kh,
            kw,
        };
        let mut out = vec![T::zero(); bsz * cout * hw];
        out.par_chunks_mut(cout * hw)
            .zip(xd.par_chunks(cin * hw))
            .for_each(|(o, xs)| {
                conv::forward(xs, wd, &geom, o);
                if let Some(bd) = bd {
                    for (co, plane) in o.chunks_mut(hw).enumerate() {
                        for v in plane {
                            *v += bd[co];
                        }
                    }
                }
            });
        let ng = self.needs(x) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        self.push(
            "conv2d",
            Tensor::new(&[bsz, cout, h, w], out)?,
            Op::Conv2d { x, w: weight, b: bias },
            ng,
        )
    }

    /// Batch normalization over axis 1 of `[b, c, ...]`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BnStats<T>>), TensorError> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 {
            return Err(shape_err("batch_norm", format!("input {sx:?}")));
        }
        let (bsz, c) = (sx[0], sx[1]);
        let inner: usize = sx[2..].iter().product();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [c] {
                return Err(shape_err(
                    "batch_norm",
                    format!("{name} {:?}, expected [{c}]", self.shape(v)),
                ));
            }
        }
        let xd = self.value(x).data();
        let count = bsz * inner;
        let eps = T::lit(BN_EPS);
        let (mean, var, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..bsz {
                        let off = (b * c + ch) * inner;
                        for &v in &xd[off..off + inner] {
                            s += v;
                        }
                    }
                    let m = s / T::lit(count as f64);
                    let mut q = T::zero();
                    for b in 0..bsz {
                        let off = (b * c + ch) * inner;
                        for &v in &xd[off..off + inner] {
                            q += (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q / T::lit(count as f64);
                }
                let unbiased = if count > 1 {
                    T::lit(count as f64 / (count - 1) as f64)
                } else {
                    T::one()
                };
                let stats = BnStats {
                    mean: Tensor::new(&[c], mean.clone())?,
                    var: Tensor::new(&[c], var.iter().map(|&v| v * unbiased).collect())?,
                };
                (mean, var, Some(stats))
            }
            BnMode::Infer { mean, var } => {
                if mean.shape() != [c] || var.shape() != [c] {
                    return Err(shape_err("batch_norm", "running statistics shape".into()));
                }
                (mean.data().to_vec(), var.data().to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let off = (b * c + ch) * inner;
                for i in off..off + inner {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = g[ch] * h + bt[ch];
                }
            }
        }
        let train = stats.is_some();
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let v = self.push(
            "batch_norm",
            Tensor::new(&sx, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::new(&sx, xhat)?,
                inv_std,
                train,
            },
            ng,
        )?;
        Ok((v, stats))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let d = *sx.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", format!("input {sx:?}")));
        }
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let eps = T::lit(LN_EPS);
        let rows = xd.len() / d;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let m = row.iter().copied().sum::<T>() / T::lit(d as f64);
            let v = row.iter().map(|&a| (a - m) * (a - m)).sum::<T>() / T::lit(d as f64);
            let is = T::one() / (v + eps).sqrt();
            inv_std.push(is);
            for i in 0..d {
                let h = (row[i] - m) * is;
                xhat[r * d + i] = h;
                out[r * d + i] = g[i] * h + bt[i];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            "layer_norm",
            Tensor::new(&sx, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::new(&sx, xhat)?,
                inv_std,
            },
            ng,
        )
    }

    /// Non-overlapping average pooling over the last two axes.
    pub fn avg_pool2d(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let nd = sx.len();
        if nd < 2 || kh == 0 || kw == 0 || sx[nd - 2] < kh || sx[nd - 1] < kw {
            return Err(shape_err("avg_pool2d", format!("input {sx:?}, kernel {kh}x{kw}")));
        }
        let (h, w) = (sx[nd - 2], sx[nd - 1]);
        let (oh, ow) = (h / kh, w / kw);
        let planes: usize = sx[..nd - 2].iter().product();
        let xd = self.value(x).data();
        let norm = T::one() / T::lit((kh * kw) as f64);
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            let src = &xd[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = T::zero();
                    for i in 0..kh {
                        for j in 0..kw {
                            s += src[(oy * kh + i) * w + ox * kw + j];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = s * norm;
                }
            }
        }
        let mut shape = sx.clone();
        shape[nd - 2] = oh;
        shape[nd - 1] = ow;
        let ng = self.needs(x);
        self.push("avg_pool2d", Tensor::new(&shape, out)?, Op::AvgPool2d { x, kh, kw }, ng)
    }

    /// Mean over one axis, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(shape_err("mean", format!("axis {axis} of {sx:?}")));
        }
        let (outer, n, inner) = split_axis(&sx, axis);
        let xd = self.value(x).data();
        let norm = T::one() / T::lit(n as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        for v in &mut out {
            *v *= norm;
        }
        let mut shape: Vec<usize> = sx.clone();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let ng = self.needs(x);
        self.push("mean", Tensor::new(&shape, out)?, Op::Mean { x, axis }, ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let ng = self.needs(x);
        self.push("relu", out, Op::Relu(x), ng)
    }

    /// Hash of the sign pattern of every ReLU input on the tape. Two evaluations
    /// with equal patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for node in &self.nodes {
            if let Op::Relu(x) = node.op {
                for &v in self.value(x).data() {
                    h ^= u64::from(v > T::zero());
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, TensorError> {
        let out = self.value(x).map(sigmoid);
        let ng = self.needs(x);
        self.push("sigmoid", out, Op::Sigmoid(x), ng)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(shape_err("softmax", format!("axis {axis} of {sx:?}")));
        }
        let (outer, n, inner) = split_axis(&sx, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * n + a) * inner + i;
                let mut mx = T::neg_infinity();
                for a in 0..n {
                    mx = mx.max(xd[at(a)]);
                }
                let mut s = T::zero();
                for a in 0..n {
                    let e = (xd[at(a)] - mx).exp();
                    out[at(a)] = e;
                    s += e;
                }
                for a in 0..n {
                    out[at(a)] /= s;
                }
            }
        }
        let ng = self.needs(x);
        self.push("softmax", Tensor::new(&sx, out)?, Op::Softmax { x, axis }, ng)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var, TensorError> {
        let first = self
            .nodes
            .get(xs.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?.0)
            .map(|n| n.value.shape().to_vec())
            .unwrap_or_default();
        if axis >= first.len() {
            return Err(shape_err("concat", format!("axis {axis} of {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let ng = xs.iter().any(|&v| self.needs(v));
        self.push(
            "concat",
            Tensor::new(&shape, out)?,
            Op::Concat { xs: xs.to_vec(), axis },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let out = self.value(x).clone().reshaped(shape)?;
        let ng = self.needs(x);
        self.push("reshape", out, Op::Reshape(x), ng)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, TensorError> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        let valid = perm.len() == sx.len()
            && perm
                .iter()
                .all(|&p| p < sx.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(shape_err("permute", format!("{perm:?} of {sx:?}")));
        }
        let (shape, data) = permute_data(self.value(x).data(), &sx, perm);
        let ng = self.needs(x);
        self.push(
            "permute",
            Tensor::new(&shape, data)?,
            Op::Permute { x, perm: perm.to_vec() },
            ng,
        )
    }

    /// Mean binary cross-entropy of probabilities against 0/1 targets.
    pub fn bce_loss(&mut self, p: Var, targets: &Tensor<T>) -> Result<Var, TensorError> {
        if self.shape(p) != targets.shape() {
            return Err(shape_err(
                "bce_loss",
                format!("{:?} vs {:?}", self.shape(p), targets.shape()),
            ));
        }
        if let Some(bad) = targets.data().iter().find(|&&y| y != T::zero() && y != T::one()) {
            return Err(TensorError::Input {
                op: "bce_loss",
                detail: format!("label {bad} is not 0 or 1"),
            });
        }
        let lo = T::lit(BCE_CLAMP);
        let hi = T::one() - lo;
        let pd = self.value(p).data();
        let mut s = T::zero();
        for (&pv, &y) in pd.iter().zip(targets.data()) {
            let pc = pv.max(lo).min(hi);
            s += if y == T::one() { -pc.ln() } else { -(T::one() - pc).ln() };
        }
        let loss = s / T::lit(pd.len() as f64);
        let ng = self.needs(p);
        self.push(
            "bce_loss",
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.clone(),
            },
            ng,
        )
    }

    pub fn mse_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var, TensorError> {
        if self.value(pred).len() != target.len() {
            return Err(shape_err(
                "mse_loss",
                format!("{:?} vs {:?}", self.shape(pred), target.shape()),
            ));
        }
        let pd = self.value(pred).data();
        let s: T = pd.iter().zip(target.data()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        let loss = s / T::lit(pd.len() as f64);
        let ng = self.needs(pred);
        self.push(
            "mse_loss",
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            ng,
        )
    }

    /// `w_ssc·l_ssc + w_arp·l_arp`; unit weights record a plain sum.
    pub fn joint_loss(&mut self, l_ssc: Var, l_arp: Var, w_ssc: T, w_arp: T) -> Result<Var, TensorError> {
        let a = if w_ssc == T::one() {
            l_ssc
        } else {
            self.scale(l_ssc, w_ssc)?
        };
        let b = if w_arp == T::one() {
            l_arp
        } else {
            self.scale(l_arp, w_arp)?
        };
        self.add(a, b)
    }

    /// Records an externally computed value with its own backward rule.
    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var, TensorError> {
        let name = op.name();
        let ng = inputs.iter().any(|&v| self.needs(v));
        self.push(
            name,
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            ng,
        )
    }

    /// Reverse sweep from a one-element output.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, TensorError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            if matches!(node.op, Op::Leaf | Op::Param) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.iter().map(|(&id, &v)| (id, v)).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), TensorError> {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.needs(*a) {
                    let mut da = vec![T::zero(); m * k];
                    mm(m, n, k, gd, false, self.value(*b).data(), true, &mut da, false);
                    self.accumulate(grads, *a, Tensor::new(sa, da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); k * n];
                    mm(k, m, n, self.value(*a).data(), true, gd, false, &mut db, false);
                    self.accumulate(grads, *b, Tensor::new(sb, db)?);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (gs, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                if self.needs(*a) {
                    let mut da = vec![T::zero(); gs * m * k];
                    for gi in 0..gs {
                        let gsl = &gd[gi * m * n..(gi + 1) * m * n];
                        let bsl = &bd[gi * k * n..(gi + 1) * k * n];
                        // Y = A·B -> dA = dY·Bᵀ ; Y = A·Bᵀ -> dA = dY·B
                        mm(
                            m,
                            n,
                            k,
                            gsl,
                            false,
                            bsl,
                            !*trans_b,
                            &mut da[gi * m * k..(gi + 1) * m * k],
                            false,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(&sa, da)?);
                }
                if self.needs(*b) {
                    let mut db = vec![T::zero(); gs * k * n];
                    for gi in 0..gs {
                        let gsl = &gd[gi * m * n..(gi + 1) * m * n];
                        let asl = &ad[gi * m * k..(gi + 1) * m * k];
                        let dst = &mut db[gi * k * n..(gi + 1) * k * n];
                        if *trans_b {
                            // dB[n,k] = dYᵀ·A
                            mm(n, m, k, gsl, true, asl, false, dst, false);
                        } else {
                            // dB[k,n] = Aᵀ·dY
                            mm(k, m, n, asl, true, gsl, false, dst, false);
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(&sb, db)?);
                }
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (in_dim, out_dim) = (sw[0], sw[1]);
                let rows = gd.len() / out_dim;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); rows * in_dim];
                    mm(
                        rows,
                        out_dim,
                        in_dim,
                        gd,
                        false,
                        self.value(*w).data(),
                        true,
                        &mut dx,
                        false,
                    );
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); in_dim * out_dim];
                    mm(
                        in_dim,
                        rows,
                        out_dim,
                        self.value(*x).data(),
                        true,
                        gd,
                        false,
                        &mut dw,
                        false,
                    );
                    self.accumulate(grads, *w, Tensor::new(sw, dw)?);
                }
                if let Some(b) = b {
                    if self.needs(*b) {
                        let mut db = vec![T::zero(); out_dim];
                        for row in gd.chunks(out_dim) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::new(&[out_dim], db)?);
                    }
                }
            }
            Op::Conv2d { x, w, b } => self.conv2d_backward(*x, *w, *b, g, grads)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let sx = self.shape(*x);
                let (bsz, c) = (sx[0], sx[1]);
                let inner: usize = sx[2..].iter().product();
                let hd = xhat.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for b in 0..bsz {
                    for ch in 0..c {
                        let off = (b * c + ch) * inner;
                        for i in off..off + inner {
                            dgamma[ch] += gd[i] * hd[i];
                            dbeta[ch] += gd[i];
                        }
                    }
                }
                if self.needs(*x) {
                    let gam = self.value(*gamma).data();
                    let count = T::lit((bsz * inner) as f64);
                    let mut dx = vec![T::zero(); gd.len()];
                    for b in 0..bsz {
                        for ch in 0..c {
                            let off = (b * c + ch) * inner;
                            let scale = gam[ch] * inv_std[ch];
                            for i in off..off + inner {
                                dx[i] = if *train {
                                    scale / count * (count * gd[i] - dbeta[ch] - hd[i] * dgamma[ch])
                                } else {
                                    scale * gd[i]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new(sx, dx)?);
                }
                self.accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(&[c], dbeta)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let sx = self.shape(*x);
                let d = *sx.last().unwrap();
                let hd = xhat.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let mut dx = vec![T::zero(); gd.len()];
                let dn = T::lit(d as f64);
                for (r, &is) in inv_std.iter().enumerate() {
                    let range = r * d..(r + 1) * d;
                    let mut sum_g = T::zero();
                    let mut sum_gh = T::zero();
                    for i in range.clone() {
                        let j = i - r * d;
                        dgamma[j] += gd[i] * hd[i];
                        dbeta[j] += gd[i];
                        let gg = gd[i] * gam[j];
                        sum_g += gg;
                        sum_gh += gg * hd[i];
                    }
                    for i in range {
                        let gg = gd[i] * gam[i - r * d];
                        dx[i] = is / dn * (dn * gg - sum_g - hd[i] * sum_gh);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(sx, dx)?);
                self.accumulate(grads, *gamma, Tensor::new(&[d], dgamma)?);
                self.accumulate(grads, *beta, Tensor::new(&[d], dbeta)?);
            }
            Op::AvgPool2d { x, kh, kw } => {
                let sx = self.shape(*x);
                let nd = sx.len();
                let (h, w) = (sx[nd - 2], sx[nd - 1]);
                let (oh, ow) = (h / kh, w / kw);
                let planes: usize = sx[..nd - 2].iter().product();
                let norm = T::one() / T::lit((kh * kw) as f64);
                let mut dx = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gd[(p * oh + oy) * ow + ox] * norm;
                            for i in 0..*kh {
                                for j in 0..*kw {
                                    dx[p * h * w + (oy * kh + i) * w + ox * kw + j] = gv;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(sx, dx)?);
            }
            Op::Mean { x, axis } => {
                let sx = self.shape(*x);
                let (outer, n, inner) = split_axis(sx, *axis);
                let norm = T::one() / T::lit(n as f64);
                let mut dx = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    for a in 0..n {
                        for i in 0..inner {
                            dx[(o * n + a) * inner + i] = gd[o * inner + i] * norm;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(sx, dx)?);
            }
            Op::Relu(x) => {
                let xd = self.value(*x).data();
                let dx = xd
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::Sigmoid(x) => {
                let yd = node.value.data();
                let dx = yd.iter().zip(gd).map(|(&y, &gv)| gv * y * (T::one() - y)).collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::Softmax { x, axis } => {
                let sx = self.shape(*x);
                let (outer, n, inner) = split_axis(sx, *axis);
                let yd = node.value.data();
                let mut dx = vec![T::zero(); yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * n + a) * inner + i;
                        let mut dot = T::zero();
                        for a in 0..n {
                            dot += gd[at(a)] * yd[at(a)];
                        }
                        for a in 0..n {
                            dx[at(a)] = yd[at(a)] * (gd[at(a)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(sx, dx)?);
            }
            Op::Concat { xs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut start = 0;
                for &v in xs {
                    let n = self.shape(v)[*axis];
                    if self.needs(v) {
                        let mut dx = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let base = (o * total + start) * inner;
                            dx.extend_from_slice(&gd[base..base + n * inner]);
                        }
                        self.accumulate(grads, v, Tensor::new(self.shape(v), dx)?);
                    }
                    start += n;
                }
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.clone().reshaped(self.shape(*x))?);
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (shape, data) = permute_data(gd, g.shape(), &inv);
                self.accumulate(grads, *x, Tensor::new(&shape, data)?);
            }
            Op::Bce { p, targets } => {
                let lo = T::lit(BCE_CLAMP);
                let hi = T::one() - lo;
                let pd = self.value(*p).data();
                let norm = gd[0] / T::lit(pd.len() as f64);
                let dx = pd
                    .iter()
                    .zip(targets.data())
                    .map(|(&pv, &y)| {
                        if pv <= lo || pv >= hi {
                            T::zero()
                        } else {
                            norm * (pv - y) / (pv * (T::one() - pv))
                        }
                    })
                    .collect();
                self.accumulate(grads, *p, Tensor::new(self.shape(*p), dx)?);
            }
            Op::Mse { pred, target } => {
                let pd = self.value(*pred).data();
                let norm = gd[0] * T::lit(2.0) / T::lit(pd.len() as f64);
                let dx = pd.iter().zip(target.data()).map(|(&a, &b)| norm * (a - b)).collect();
                self.accumulate(grads, *pred, Tensor::new(self.shape(*pred), dx)?);
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|&v| self.value(v)).collect();
                let dxs = op.backward(&vals, &node.value, g);
                if dxs.len() != inputs.len() {
                    return Err(shape_err(op.name(), "backward arity mismatch".into()));
                }
                for (&v, dx) in inputs.iter().zip(dxs) {
                    if dx.shape() != self.shape(v) {
                        return Err(shape_err(op.name(), "backward gradient shape".into()));
                    }
                    self.accumulate(grads, v, dx);
                }
            }
        }
        Ok(())
    }

    fn conv2d_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<(), TensorError> {
        let sx = self.shape(x);
        let sw = self.shape(w);
        let (bsz, cin, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (cout, kh, kw) = (sw[0], sw[2], sw[3]);
        let hw = h * wd;
        let kdim = cin * kh * kw;
        let xd = self.value(x).data();
        let wdata = self.value(w).data();
        let gd = g.data();
        let need_x = self.needs(x);
        let need_w = self.needs(w);
        // Per-sample partial results, reduced below in sample order.
        let geom = ConvGeom {
            cin,
            cout,
            h,
            w: wd,
            kh,
            kw,
        };
        let parts: Vec<ConvGrads<T>> = (0..bsz)
            .into_par_iter()
            .map(|s| {
                let gs = &gd[s * cout * hw..(s + 1) * cout * hw];
                let xs = &xd[s * cin * hw..(s + 1) * cin * hw];
                let mut dx = need_x.then(|| vec![T::zero(); cin * hw]);
                let mut dw = need_w.then(|| vec![T::zero(); cout * kdim]);
                conv::backward(xs, wdata, gs, &geom, dx.as_deref_mut(), dw.as_deref_mut());
                (dx, dw)
            })
            .collect();
        if need_x {
            let mut dx = Vec::with_capacity(bsz * cin * hw);
            for (p, _) in &parts {
                dx.extend_from_slice(p.as_ref().unwrap());
            }
            self.accumulate(grads, x, Tensor::new(sx, dx)?);
        }
        if need_w {
            let mut dw = vec![T::zero(); cout * kdim];
            for (_, p) in &parts {
                for (a, &v) in dw.iter_mut().zip(p.as_ref().unwrap()) {
                    *a += v;
                }
            }
            self.accumulate(grads, w, Tensor::new(sw, dw)?);
        }
        if let Some(b) = b {
            if self.needs(b) {
                let mut db = vec![T::zero(); cout];
                for s in 0..bsz {
                    for (co, d) in db.iter_mut().enumerate() {
                        let off = (s * cout + co) * hw;
                        for &v in &gd[off..off + hw] {
                            *d += v;
                        }
                    }
                }
                self.accumulate(grads, b, Tensor::new(&[cout], db)?);
            }
        }
        Ok(())
    }
}
