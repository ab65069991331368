//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] is the computation record for one forward pass. Every op
//! appends a node holding its output value, so node order is a topological
//! order and [`Graph::backward`] simply walks the nodes in reverse.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::kernels::{axis_split, gemm, gemm_strided, ConvGeometry, Strided};
use crate::tensor::Tensor;

/// Epsilon added to the variance in [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-6;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Tanh approximation `0.5x(1 + tanh(√(2/π)(x + 0.044715x³)))`.
    Gelu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Gelu => {
                let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                0.5 * x * (1.0 + libm::tanh(inner))
            }
        }
    }

    /// Derivative given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Gelu => {
                let inner = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
                let t = libm::tanh(inner);
                let dinner = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `b` broadcasts over the leading axes of `a` (its shape is a suffix of `a`'s).
    Add(Var, Var),
    Mul(Var, Var),
    /// `b` has `a`'s shape with the last axis collapsed to 1.
    MulLastBroadcast(Var, Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Conv2d {
        x: Var,
        kernel: Var,
        geom: ConvGeometry,
        batch: usize,
    },
    Activation(Var, Activation),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        axis: usize,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    ConcatLast(Vec<Var>),
    MaxLast {
        x: Var,
        argmax: Vec<usize>,
    },
    PrependToken(Var, Var),
    SelectToken(Var, usize),
    AttentionScores {
        q: Var,
        k: Var,
        heads: usize,
        scale: f64,
    },
    AttentionApply {
        attn: Var,
        v: Var,
        heads: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    grad: Option<Vec<f64>>,
    param: Option<usize>,
}

/// Computation record for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input tensor; gradients are tracked when `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad;
        self.push_leaf(tensor, needs_grad, None)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push_leaf(tensor, false, None)
    }

    /// Records trainable parameter `id`; its gradient is reported by [`param_grads`](Self::param_grads).
    pub fn param(&mut self, id: usize, tensor: &Tensor) -> Var {
        let mut value = tensor.clone();
        value.grad = None;
        self.push_leaf(value, true, Some(id))
    }

    fn push_leaf(&mut self, mut value: Tensor, needs_grad: bool, param: Option<usize>) -> Var {
        value.grad = None;
        value.requires_grad = needs_grad;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            grad: None,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`backward`](Self::backward) root with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::new(node.value.shape(), g.clone()).expect("grad shape"))
    }

    /// `(param id, gradient)` for every parameter leaf after backward.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.nodes
            .iter()
            .filter_map(|n| Some((n.param?, n.grad.as_deref()?)))
    }

    // ---- forward ops --------------------------------------------------------

    /// `a[m×n] · b[n×p]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            false,
            false,
            m,
            n,
            k,
            1.0,
            self.value(a).data(),
            self.value(b).data(),
            0.0,
            &mut out,
        );
        let value = Tensor::new(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum. `b` may have fewer axes, matching `a`'s trailing axes
    /// (biases, position embeddings).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", sa, sb));
        }
        let bd = self.value(b).data();
        let inner = bd.len().max(1);
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(inner) {
            chunk.iter_mut().zip(bd).for_each(|(o, b)| *o += b);
        }
        let value = Tensor::new(self.shape(a), out)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape("mul", sa, sb));
        }
        let out = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::new(sa, out)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    /// `x[..., c] ⊙ m[..., 1]`, broadcasting `m` over the last axis.
    pub fn mul_last_broadcast(&mut self, x: Var, m: Var) -> Result<Var> {
        let (sx, sm) = (self.shape(x), self.shape(m));
        let ok = sx.len() == sm.len()
            && !sx.is_empty()
            && sm[sm.len() - 1] == 1
            && sx[..sx.len() - 1] == sm[..sm.len() - 1];
        if !ok {
            return Err(Error::shape("mul_last_broadcast", sx, sm));
        }
        let c = sx[sx.len() - 1];
        let md = self.value(m).data();
        let mut out = self.value(x).data().to_vec();
        for (row, &s) in out.chunks_mut(c.max(1)).zip(md) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let value = Tensor::new(sx, out)?;
        Ok(self.push(value, Op::MulLastBroadcast(x, m), &[x, m]))
    }

    /// Multiplies by a fixed mask; no gradient flows into the mask.
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let sx = self.shape(x);
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("mul_const", sx, &[mask.len()]));
        }
        let out = zip_map(self.value(x).data(), &mask, |a, m| a * m);
        let value = Tensor::new(sx, out)?;
        Ok(self.push(value, Op::MulConst(x, mask), &[x]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push(value, Op::Scale(x, factor), &[x])
    }

    /// Cross-correlation of `x[h×w×c_in]` (or a batch `x[n×h×w×c_in]`) with
    /// `kernel[k×k×c_in×c_out]`. Bias is added separately.
    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        let (batch, h, w, c_in) = match sx[..] {
            [h, w, c] => (None, h, w, c),
            [n, h, w, c] => (Some(n), h, w, c),
            _ => return Err(Error::shape("conv2d", &sx, &sk)),
        };
        if sk.len() != 4 || sk[0] != sk[1] || sk[2] != c_in {
            return Err(Error::shape("conv2d", &sx, &sk));
        }
        let geom = ConvGeometry::new(h, w, c_in, sk[0], stride, padding)?;
        let c_out = sk[3];
        let n = batch.unwrap_or(1);
        let rows = n * geom.out_pixels();
        let mut out = vec![0.0; rows * c_out];
        let xv = self.value(x).data();
        let kv = self.value(kernel).data();
        if geom.is_pointwise() {
            gemm(false, false, rows, c_out, c_in, 1.0, xv, kv, 0.0, &mut out);
        } else {
            let cols = im2col_batch(&geom, n, xv);
            gemm(false, false, rows, c_out, geom.patch_len(), 1.0, &cols, kv, 0.0, &mut out);
        }
        let shape: Vec<usize> = match batch {
            Some(n) => vec![n, geom.out_h, geom.out_w, c_out],
            None => vec![geom.out_h, geom.out_w, c_out],
        };
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Conv2d { x, kernel, geom, batch: n }, &[x, kernel]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        self.push(value, Op::Activation(x, kind), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Gelu)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let max = (0..len)
                    .map(|j| xv[base + j * inner])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..len {
                    let e = libm::exp(xv[base + j * inner] - max);
                    out[base + j * inner] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[base + j * inner] /= sum;
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes along `axis` to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of that axis' length).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("layer_norm", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        for p in [gain, bias] {
            if self.value(p).len() != len {
                return Err(Error::shape("layer_norm", &shape, self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data();
        let bv = self.value(bias).data();
        let mut normalized = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; outer * inner];
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mean = (0..len).map(|j| xv[base + j * inner]).sum::<f64>() / len as f64;
                let var = (0..len)
                    .map(|j| {
                        let d = xv[base + j * inner] - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / len as f64;
                let istd = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
                inv_std[o * inner + i] = istd;
                for j in 0..len {
                    let idx = base + j * inner;
                    let xh = (xv[idx] - mean) * istd;
                    normalized[idx] = xh;
                    out[idx] = gv[j] * xh + bv[j];
                }
            }
        }
        let value = Tensor::new(&shape, out)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            axis,
            normalized,
            inv_std,
        };
        Ok(self.push(value, op, &[x, gain, bias]))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || shape[0] == 0 {
            return Err(Error::shape("cross_entropy", &shape, &[labels.len()]));
        }
        let (n, classes) = (shape[0], shape[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Index {
                index: bad,
                len: classes,
            });
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = &lv[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&z| libm::exp(z - max)).sum();
            let log_z = max + libm::log(sum);
            loss += log_z - row[label];
            for (p, &z) in probs[r * classes..].iter_mut().zip(row) {
                *p = libm::exp(z - log_z);
            }
        }
        let value = Tensor::scalar(loss / n as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(value, op, &[logits]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", &s, &[]));
        }
        let value = Tensor::new(&[s[1], s[0]], transpose(self.value(x).data(), s[0], s[1]))?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// Concatenates along the last axis; all other axes must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::usage("concat_last of an empty list"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(Error::shape("concat_last", self.shape(*first), s));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &wd) in parts.iter().zip(&widths) {
            let pv = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..][..wd].copy_from_slice(&pv[r * wd..(r + 1) * wd]);
            }
            offset += wd;
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Maximum over the last axis, kept as a size-1 axis.
    pub fn max_last(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let width = *s.last().ok_or_else(|| Error::shape("max_last", &s, &[]))?;
        if width == 0 {
            return Err(Error::usage("max over an empty axis"));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len() / width);
        let mut argmax = Vec::with_capacity(xv.len() / width);
        for row in xv.chunks(width) {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(row[best]);
            argmax.push(best);
        }
        let mut shape = s;
        *shape.last_mut().unwrap() = 1;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::MaxLast { x, argmax }, &[x]))
    }

    /// `x[n×L×d]` → `[n×(L+1)×d]` with `token[d]` (or `[1×d]`) at index 0 of every sample.
    pub fn prepend_token(&mut self, x: Var, token: Var) -> Result<Var> {
        let (sx, st) = (self.shape(x).to_vec(), self.shape(token).to_vec());
        if sx.len() != 3 || self.value(token).len() != sx[2] {
            return Err(Error::shape("prepend_token", &sx, &st));
        }
        let (n, l, d) = (sx[0], sx[1], sx[2]);
        let xv = self.value(x).data();
        let tv = self.value(token).data();
        let mut out = Vec::with_capacity(n * (l + 1) * d);
        for s in 0..n {
            out.extend_from_slice(tv);
            out.extend_from_slice(&xv[s * l * d..(s + 1) * l * d]);
        }
        let value = Tensor::new(&[n, l + 1, d], out)?;
        Ok(self.push(value, Op::PrependToken(x, token), &[x, token]))
    }

    /// Row `index` of every sample: `x[n×N×d]` → `[n×d]`.
    pub fn select_token(&mut self, x: Var, index: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || index >= s[1] {
            return Err(Error::shape("select_token", &s, &[index]));
        }
        let (n, len, d) = (s[0], s[1], s[2]);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * d);
        for b in 0..n {
            out.extend_from_slice(&xv[(b * len + index) * d..][..d]);
        }
        let value = Tensor::new(&[n, d], out)?;
        Ok(self.push(value, Op::SelectToken(x, index), &[x]))
    }

    /// Per-head scaled dot products `q_h·k_hᵀ/√d_k` for `q, k: [n×N×d]`,
    /// heads packed along `d`. Output is `[n×heads×N×N]`.
    pub fn attention_scores(&mut self, q: Var, k: Var, heads: usize) -> Result<Var> {
        let (sq, sk) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if sq.len() != 3 || sq != sk || heads == 0 || sq[2] % heads != 0 {
            return Err(Error::shape("attention_scores", &sq, &sk));
        }
        let (n, len, d) = (sq[0], sq[1], sq[2]);
        let dk = d / heads;
        let scale = 1.0 / libm::sqrt(dk as f64);
        let (qv, kv) = (self.value(q).data(), self.value(k).data());
        let mut out = vec![0.0; n * heads * len * len];
        for b in 0..n {
            for h in 0..heads {
                let off = b * len * d + h * dk;
                gemm_strided(
                    len,
                    len,
                    dk,
                    scale,
                    Strided::new(&qv[off..], d, 1),
                    Strided::new(&kv[off..], 1, d),
                    0.0,
                    &mut out[(b * heads + h) * len * len..],
                    len,
                );
            }
        }
        let value = Tensor::new(&[n, heads, len, len], out)?;
        let op = Op::AttentionScores { q, k, heads, scale };
        Ok(self.push(value, op, &[q, k]))
    }

    /// Per-head weighted sums `A_h·v_h`, concatenated back to `[n×N×d]`.
    pub fn attention_apply(&mut self, attn: Var, v: Var) -> Result<Var> {
        let (sa, sv) = (self.shape(attn).to_vec(), self.shape(v).to_vec());
        let ok = sa.len() == 4
            && sv.len() == 3
            && sa[0] == sv[0]
            && sa[2] == sv[1]
            && sa[3] == sv[1]
            && sa[1] > 0
            && sv[2] % sa[1] == 0;
        if !ok {
            return Err(Error::shape("attention_apply", &sa, &sv));
        }
        let (n, heads, len, d) = (sa[0], sa[1], sa[2], sv[2]);
        let dk = d / heads;
        let (av, vv) = (self.value(attn).data(), self.value(v).data());
        let mut out = vec![0.0; n * len * d];
        for b in 0..n {
            for h in 0..heads {
                let off = b * len * d + h * dk;
                gemm_strided(
                    len,
                    dk,
                    len,
                    1.0,
                    Strided::new(&av[(b * heads + h) * len * len..], len, 1),
                    Strided::new(&vv[off..], d, 1),
                    0.0,
                    &mut out[off..],
                    d,
                );
            }
        }
        let value = Tensor::new(&[n, len, d], out)?;
        Ok(self.push(value, Op::AttentionApply { attn, v, heads }, &[attn, v]))
    }

    // ---- reverse pass -------------------------------------------------------

    /// Back-propagates from scalar `loss`, leaving `∂loss/∂leaf` on every
    /// leaf that requires gradients (zeros when the leaf is unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::usage(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.input_grads(i, &grad);
            for (input, delta) in contributions {
                let node = &mut self.nodes[input.0];
                match &mut node.grad {
                    Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
                    None => node.grad = Some(delta),
                }
            }
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf) && node.needs_grad && node.grad.is_none() {
                node.grad = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn input_grads(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(false, true, m, k, n, 1.0, g, self.value(*b).data(), 0.0, &mut da);
                    res.push((*a, da));
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(true, false, k, n, m, 1.0, self.value(*a).data(), g, 0.0, &mut db);
                    res.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    res.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    let inner = self.value(*b).len().max(1);
                    let mut db = vec![0.0; inner];
                    for chunk in g.chunks(inner) {
                        db.iter_mut().zip(chunk).for_each(|(d, c)| *d += c);
                    }
                    res.push((*b, db));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    res.push((*a, zip_map(g, self.value(*b).data(), |g, y| g * y)));
                }
                if self.wants(*b) {
                    res.push((*b, zip_map(g, self.value(*a).data(), |g, x| g * x)));
                }
            }
            Op::MulLastBroadcast(x, m) => {
                let c = *self.shape(*x).last().unwrap();
                let (xv, mv) = (self.value(*x).data(), self.value(*m).data());
                if self.wants(*x) {
                    let mut dx = g.to_vec();
                    for (row, &s) in dx.chunks_mut(c.max(1)).zip(mv) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    res.push((*x, dx));
                }
                if self.wants(*m) {
                    let dm = g
                        .chunks(c.max(1))
                        .zip(xv.chunks(c.max(1)))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                        .collect();
                    res.push((*m, dm));
                }
            }
            Op::MulConst(x, mask) => res.push((*x, zip_map(g, mask, |g, m| g * m))),
            Op::Scale(x, f) => res.push((*x, g.iter().map(|v| v * f).collect())),
            Op::Conv2d {
                x,
                kernel,
                geom,
                batch,
            } => {
                let c_out = self.shape(*kernel)[3];
                let rows = batch * geom.out_pixels();
                let plen = geom.patch_len();
                let xv = self.value(*x).data();
                let kv = self.value(*kernel).data();
                if geom.is_pointwise() {
                    if self.wants(*kernel) {
                        let mut dk = vec![0.0; plen * c_out];
                        gemm(true, false, plen, c_out, rows, 1.0, xv, g, 0.0, &mut dk);
                        res.push((*kernel, dk));
                    }
                    if self.wants(*x) {
                        let mut dx = vec![0.0; rows * plen];
                        gemm(false, true, rows, plen, c_out, 1.0, g, kv, 0.0, &mut dx);
                        res.push((*x, dx));
                    }
                } else {
                    if self.wants(*kernel) {
                        let cols = im2col_batch(geom, *batch, xv);
                        let mut dk = vec![0.0; plen * c_out];
                        gemm(true, false, plen, c_out, rows, 1.0, &cols, g, 0.0, &mut dk);
                        res.push((*kernel, dk));
                    }
                    if self.wants(*x) {
                        let mut dcols = vec![0.0; rows * plen];
                        gemm(false, true, rows, plen, c_out, 1.0, g, kv, 0.0, &mut dcols);
                        let img = geom.h * geom.w * geom.c_in;
                        let mut dx = vec![0.0; batch * img];
                        for b in 0..*batch {
                            geom.col2im_add(
                                &dcols[b * geom.out_pixels() * plen..][..geom.out_pixels() * plen],
                                &mut dx[b * img..(b + 1) * img],
                            );
                        }
                        res.push((*x, dx));
                    }
                }
            }
            Op::Activation(x, kind) => {
                let xv = self.value(*x).data();
                let dx = g
                    .iter()
                    .zip(xv.iter().zip(out))
                    .map(|(g, (&x, &y))| g * kind.derivative(x, y))
                    .collect();
                res.push((*x, dx));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..len)
                            .map(|j| g[base + j * inner] * out[base + j * inner])
                            .sum();
                        for j in 0..len {
                            let idx = base + j * inner;
                            dx[idx] = out[idx] * (g[idx] - dot);
                        }
                    }
                }
                res.push((*x, dx));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                axis,
                normalized,
                inv_std,
            } => {
                let (outer, len, inner) = axis_split(node.value.shape(), *axis);
                let gv = self.value(*gain).data();
                let mut dgain = vec![0.0; len];
                let mut dbias = vec![0.0; len];
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..len {
                            let idx = base + j * inner;
                            dgain[j] += g[idx] * normalized[idx];
                            dbias[j] += g[idx];
                            let dxh = g[idx] * gv[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * normalized[idx];
                        }
                        mean_dxh /= len as f64;
                        mean_dxh_xh /= len as f64;
                        let istd = inv_std[o * inner + i];
                        for j in 0..len {
                            let idx = base + j * inner;
                            let dxh = g[idx] * gv[j];
                            dx[idx] = istd * (dxh - mean_dxh - normalized[idx] * mean_dxh_xh);
                        }
                    }
                }
                if self.wants(*x) {
                    res.push((*x, dx));
                }
                if self.wants(*gain) {
                    res.push((*gain, dgain));
                }
                if self.wants(*bias) {
                    res.push((*bias, dbias));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let classes = probs.len() / labels.len();
                let scale = g[0] / labels.len() as f64;
                let mut dz: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dz[r * classes + l] -= scale;
                }
                res.push((*logits, dz));
            }
            Op::Sum(x) => res.push((*x, vec![g[0]; self.value(*x).len()])),
            Op::Reshape(x) => res.push((*x, g.to_vec())),
            Op::Transpose(x) => {
                let s = node.value.shape();
                res.push((*x, transpose(g, s[0], s[1])));
            }
            Op::ConcatLast(parts) => {
                let total = *node.value.shape().last().unwrap();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let wd = *self.shape(p).last().unwrap();
                    if self.wants(p) {
                        let mut dp = vec![0.0; rows * wd];
                        for r in 0..rows {
                            dp[r * wd..(r + 1) * wd]
                                .copy_from_slice(&g[r * total + offset..][..wd]);
                        }
                        res.push((p, dp));
                    }
                    offset += wd;
                }
            }
            Op::MaxLast { x, argmax } => {
                let width = *self.shape(*x).last().unwrap();
                let mut dx = vec![0.0; self.value(*x).len()];
                for (r, (&j, &gv)) in argmax.iter().zip(g).enumerate() {
                    dx[r * width + j] = gv;
                }
                res.push((*x, dx));
            }
            Op::PrependToken(x, token) => {
                let s = node.value.shape();
                let (n, l1, d) = (s[0], s[1], s[2]);
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(n * (l1 - 1) * d);
                    for b in 0..n {
                        dx.extend_from_slice(&g[(b * l1 + 1) * d..(b + 1) * l1 * d]);
                    }
                    res.push((*x, dx));
                }
                if self.wants(*token) {
                    let mut dt = vec![0.0; d];
                    for b in 0..n {
                        dt.iter_mut()
                            .zip(&g[b * l1 * d..][..d])
                            .for_each(|(t, v)| *t += v);
                    }
                    res.push((*token, dt));
                }
            }
            Op::SelectToken(x, index) => {
                let s = self.shape(*x);
                let (n, len, d) = (s[0], s[1], s[2]);
                let mut dx = vec![0.0; n * len * d];
                for b in 0..n {
                    dx[(b * len + index) * d..][..d].copy_from_slice(&g[b * d..(b + 1) * d]);
                }
                res.push((*x, dx));
            }
            Op::AttentionScores { q, k, heads, scale } => {
                let s = self.shape(*q);
                let (n, len, d) = (s[0], s[1], s[2]);
                let dk = d / heads;
                let (qv, kv) = (self.value(*q).data(), self.value(*k).data());
                let mut dq = vec![0.0; qv.len()];
                let mut dkey = vec![0.0; kv.len()];
                for b in 0..n {
                    for h in 0..*heads {
                        let off = b * len * d + h * dk;
                        let gs = &g[(b * heads + h) * len * len..][..len * len];
                        // dQ_h = scale · dS · K_h ;  dK_h = scale · dSᵀ · Q_h
                        gemm_strided(
                            len,
                            dk,
                            len,
                            *scale,
                            Strided::new(gs, len, 1),
                            Strided::new(&kv[off..], d, 1),
                            0.0,
                            &mut dq[off..],
                            d,
                        );
                        gemm_strided(
                            len,
                            dk,
                            len,
                            *scale,
                            Strided::new(gs, 1, len),
                            Strided::new(&qv[off..], d, 1),
                            0.0,
                            &mut dkey[off..],
                            d,
                        );
                    }
                }
                res.push((*q, dq));
                res.push((*k, dkey));
            }
            Op::AttentionApply { attn, v, heads } => {
                let s = self.shape(*v);
                let (n, len, d) = (s[0], s[1], s[2]);
                let dk = d / heads;
                let (av, vv) = (self.value(*attn).data(), self.value(*v).data());
                let mut da = vec![0.0; av.len()];
                let mut dv = vec![0.0; vv.len()];
                for b in 0..n {
                    for h in 0..*heads {
                        let off = b * len * d + h * dk;
                        let aoff = (b * heads + h) * len * len;
                        // dA_h = dO_h · V_hᵀ ;  dV_h = A_hᵀ · dO_h
                        gemm_strided(
                            len,
                            len,
                            dk,
                            1.0,
                            Strided::new(&g[off..], d, 1),
                            Strided::new(&vv[off..], 1, d),
                            0.0,
                            &mut da[aoff..],
                            len,
                        );
                        gemm_strided(
                            len,
                            dk,
                            len,
                            1.0,
                            Strided::new(&av[aoff..], 1, len),
                            Strided::new(&g[off..], d, 1),
                            0.0,
                            &mut dv[off..],
                            d,
                        );
                    }
                }
                res.push((*attn, da));
                res.push((*v, dv));
            }
        }
        res.retain(|(v, _)| self.wants(*v));
        res
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn im2col_batch(geom: &ConvGeometry, batch: usize, images: &[f64]) -> Vec<f64> {
    let img = geom.h * geom.w * geom.c_in;
    let block = geom.out_pixels() * geom.patch_len();
    let mut cols = vec![0.0; batch * block];
    for b in 0..batch {
        geom.im2col(&images[b * img..(b + 1) * img], &mut cols[b * block..(b + 1) * block]);
    }
    cols
}
