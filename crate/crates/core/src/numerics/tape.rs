//! Reverse-mode differentiation over dense tensors.
//!
//! Every forward op appends a node holding its output and enough saved state
//! to run its backward rule. [`Tape::backward`] walks the nodes in reverse
//! recording order and accumulates (`+=`) gradients into per-node buffers.
//! Nodes created from [`Tape::constant`] and everything computed only from
//! constants never receive gradients.

use super::tensor::{gemm, gemm_view, Tensor, View};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous block of rows belonging to one sequence inside a batched matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Self { start, len }
    }

    /// `count` back-to-back segments of equal length.
    pub fn uniform(count: usize, len: usize) -> Vec<Segment> {
        (0..count).map(|i| Segment::new(i * len, len)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMask {
    None,
    /// Query `i` sees keys `0..=i` of its own sequence.
    Causal,
}

/// Pairs each query sequence with the key/value sequence it attends over.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub queries: Vec<Segment>,
    pub keys: Vec<Segment>,
}

impl AttentionLayout {
    pub fn new(queries: Vec<Segment>, keys: Vec<Segment>) -> Result<Self> {
        if queries.len() != keys.len() {
            return Err(Error::invalid(
                "attention",
                format!(
                    "{} query segments but {} key segments",
                    queries.len(),
                    keys.len()
                ),
            ));
        }
        Ok(Self { queries, keys })
    }

    pub fn self_attention(segments: Vec<Segment>) -> Self {
        Self {
            keys: segments.clone(),
            queries: segments,
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    MaskedSoftmax(Var),
    ConcatCols(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    SegmentMean {
        x: Var,
        seg_len: usize,
    },
    StridedMeanPool {
        x: Var,
        seg_len: usize,
        window: usize,
        stride: usize,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
    Mse(Var, Var),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Probabilities are clamped into this range before taking logarithms.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `var` (if any reached it) into `target`'s buffer.
    pub fn accumulate_into(&self, var: Var, target: &mut Tensor) -> Result<()> {
        match self.get(var) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn ensure_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::invalid(
            op,
            format!("expected a 2-D tensor, got shape {other:?}"),
        )),
    }
}

fn vector_len(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape() {
        [n] => Ok(*n),
        [1, n] => Ok(*n),
        other => Err(Error::invalid(
            op,
            format!("expected a vector, got shape {other:?}"),
        )),
    }
}

fn scalar_of(op: &'static str, t: &Tensor) -> Result<f64> {
    if t.numel() != 1 {
        return Err(Error::invalid(
            op,
            format!("expected a scalar, got shape {:?}", t.shape()),
        ));
    }
    Ok(t.data()[0])
}

fn grad_slot<'a>(grads: &'a mut [Option<Vec<f64>>], var: Var, len: usize) -> &'a mut Vec<f64> {
    grads[var.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    /// Records a leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    fn leaf(&mut self, mut t: Tensor, needs_grad: bool) -> Var {
        t.clear_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.value(a).shape().to_vec(),
                rhs: self.value(b).shape().to_vec(),
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
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
        self.push("matmul", Tensor::raw(vec![m, n], out), Op::MatMul(a, b), &[a, b])
    }

    /// `x w + b` with the bias vector broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (r, a) = matrix_dims("linear", self.value(x))?;
        let (a2, c) = matrix_dims("linear", self.value(w))?;
        let blen = vector_len("linear", self.value(b))?;
        if a != a2 || blen != c {
            return Err(Error::Shape {
                op: "linear",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(w).shape().to_vec(),
            });
        }
        let bias = self.value(b).data();
        let mut out: Vec<f64> = (0..r).flat_map(|_| bias.iter().copied()).collect();
        gemm(
            r,
            a,
            c,
            self.value(x).data(),
            false,
            self.value(w).data(),
            false,
            &mut out,
            true,
        );
        self.push(
            "linear",
            Tensor::raw(vec![r, c], out),
            Op::Linear { x, w, b },
            &[x, w, b],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape("add", self.value(a), self.value(b))?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push("add", Tensor::raw(shape, out), Op::Add(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        ensure_same_shape("mul", self.value(a), self.value(b))?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push("mul", Tensor::raw(shape, out), Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v * factor).collect();
        let shape = t.shape().to_vec();
        self.push("scale", Tensor::raw(shape, out), Op::Scale(x, factor), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix_dims("transpose", self.value(x))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", Tensor::raw(vec![c, r], out), Op::Transpose(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|v| v.max(0.0)).collect();
        let shape = t.shape().to_vec();
        self.push("relu", Tensor::raw(shape, out), Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = t.data().iter().map(|&v| sigmoid(v)).collect();
        let shape = t.shape().to_vec();
        self.push("sigmoid", Tensor::raw(shape, out), Op::Sigmoid(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Per-row standardisation followed by `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (rows, d) = matrix_dims("layer_norm", self.value(x))?;
        if d < 2 {
            return Err(Error::invalid("layer_norm", "feature dimension must be >= 2"));
        }
        if vector_len("layer_norm", self.value(gain))? != d
            || vector_len("layer_norm", self.value(bias))? != d
        {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: self.value(x).shape().to_vec(),
                rhs: self.value(gain).shape().to_vec(),
            });
        }
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; rows * d];
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            rstd[r] = inv;
            for c in 0..d {
                let h = (row[c] - mean) * inv;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        self.push(
            "layer_norm",
            Tensor::raw(vec![rows, d], out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Softmax over the last axis after adding `mask` (entries `0` or `-inf`).
    ///
    /// `mask` must have the shape of `x` or of a trailing part of it, in which
    /// case it repeats over the leading axes.
    pub fn masked_softmax(&mut self, x: Var, mask: &Tensor) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let ms = mask.shape();
        if ms.len() > shape.len() || shape[shape.len() - ms.len()..] != *ms {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: shape,
                rhs: ms.to_vec(),
            });
        }
        if mask.data().iter().any(|m| m.is_nan() || *m == f64::INFINITY) {
            return Err(Error::invalid("masked_softmax", "mask entries must be 0 or -inf"));
        }
        let width = *shape.last().unwrap();
        let src = t.data();
        let mdata = mask.data();
        let mut out = vec![0.0; src.len()];
        for (row, chunk) in src.chunks(width).enumerate() {
            let moff = (row * width) % mdata.len();
            let m = &mdata[moff..moff + width];
            let max = chunk
                .iter()
                .zip(m)
                .filter(|(_, m)| m.is_finite())
                .map(|(v, m)| v + m)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMaskedRow { row });
            }
            let dst = &mut out[row * width..(row + 1) * width];
            let mut total = 0.0;
            for c in 0..width {
                let e = if m[c].is_finite() {
                    (chunk[c] + m[c] - max).exp()
                } else {
                    0.0
                };
                dst[c] = e;
                total += e;
            }
            for v in dst.iter_mut() {
                *v /= total;
            }
        }
        self.push(
            "masked_softmax",
            Tensor::raw(shape, out),
            Op::MaskedSoftmax(x),
            &[x],
        )
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat_cols", "no inputs"))?;
        let (rows, _) = matrix_dims("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = matrix_dims("concat_cols", self.value(p))?;
            if r != rows {
                return Err(Error::Shape {
                    op: "concat_cols",
                    lhs: self.value(*first).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        self.push(
            "concat_cols",
            Tensor::raw(vec![rows, total], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Scaled dot-product attention for every (query segment, key segment)
    /// pair and every head.
    ///
    /// `q` is `rows_q x D`, `k` and `v` are `rows_kv x D`; head `h` owns
    /// columns `h*F..(h+1)*F` with `F = D / heads`. The output has the shape
    /// of `q` with heads already concatenated.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &AttentionLayout,
        mask: AttentionMask,
    ) -> Result<Var> {
        let (rq, d) = matrix_dims("attention", self.value(q))?;
        let (rk, dk) = matrix_dims("attention", self.value(k))?;
        ensure_same_shape("attention", self.value(k), self.value(v))?;
        if d != dk {
            return Err(Error::Shape {
                op: "attention",
                lhs: self.value(q).shape().to_vec(),
                rhs: self.value(k).shape().to_vec(),
            });
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::invalid(
                "attention",
                format!("model width {d} is not divisible by {heads} heads"),
            ));
        }
        for (qs, ks) in layout.queries.iter().zip(&layout.keys) {
            if qs.len == 0 || ks.len == 0 || qs.start + qs.len > rq || ks.start + ks.len > rk {
                return Err(Error::invalid("attention", "segment out of range"));
            }
            if mask == AttentionMask::Causal && qs.len != ks.len {
                return Err(Error::invalid(
                    "attention",
                    "causal attention needs equal query and key lengths",
                ));
            }
        }
        let f = d / heads;
        let scale = 1.0 / (f as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; rq * d];
        let total: usize = layout
            .queries
            .iter()
            .zip(&layout.keys)
            .map(|(a, b)| a.len * b.len * heads)
            .sum();
        let mut probs = vec![0.0; total];
        let mut offset = 0;
        for (qs, ks) in layout.queries.iter().zip(&layout.keys) {
            let (lq, lk) = (qs.len, ks.len);
            for h in 0..heads {
                let col = h * f;
                let qv = View::rows(qs.start * d + col, lq, f, d);
                let kv = View::rows(ks.start * d + col, lk, f, d);
                let pv = View::rows(offset, lq, lk, lk);
                gemm_view(scale, qd, qv, kd, kv.t(), 0.0, &mut probs, pv);
                for i in 0..lq {
                    let row = &mut probs[offset + i * lk..offset + (i + 1) * lk];
                    let visible = match mask {
                        AttentionMask::None => lk,
                        AttentionMask::Causal => i + 1,
                    };
                    let max = row[..visible].iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
                    let mut denom = 0.0;
                    for s in row[..visible].iter_mut() {
                        *s = (*s - max).exp();
                        denom += *s;
                    }
                    let inv = 1.0 / denom;
                    row[..visible].iter_mut().for_each(|s| *s *= inv);
                    row[visible..].fill(0.0);
                }
                let vv = View::rows(ks.start * d + col, lk, f, d);
                let ov = View::rows(qs.start * d + col, lq, f, d);
                gemm_view(1.0, &probs, pv, vd, vv, 1.0, &mut out, ov);
                offset += lq * lk;
            }
        }
        self.push(
            "attention",
            Tensor::raw(vec![rq, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout: layout.clone(),
                probs,
            },
            &[q, k, v],
        )
    }

    /// Mean over each block of `seg_len` consecutive rows.
    pub fn segment_mean(&mut self, x: Var, seg_len: usize) -> Result<Var> {
        let (rows, d) = matrix_dims("segment_mean", self.value(x))?;
        if seg_len == 0 || rows % seg_len != 0 {
            return Err(Error::invalid(
                "segment_mean",
                format!("{rows} rows do not split into segments of {seg_len}"),
            ));
        }
        let n = rows / seg_len;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * d];
        for s in 0..n {
            for r in 0..seg_len {
                let row = &src[(s * seg_len + r) * d..(s * seg_len + r + 1) * d];
                for c in 0..d {
                    out[s * d + c] += row[c];
                }
            }
            for c in 0..d {
                out[s * d + c] /= seg_len as f64;
            }
        }
        self.push(
            "segment_mean",
            Tensor::raw(vec![n, d], out),
            Op::SegmentMean { x, seg_len },
            &[x],
        )
    }

    /// Strided window mean within each block of `seg_len` rows.
    ///
    /// Each block of length `L` becomes `(L - window) / stride + 1` rows.
    pub fn strided_mean_pool(
        &mut self,
        x: Var,
        seg_len: usize,
        window: usize,
        stride: usize,
    ) -> Result<Var> {
        let (rows, d) = matrix_dims("strided_mean_pool", self.value(x))?;
        if window == 0 || stride == 0 {
            return Err(Error::invalid("strided_mean_pool", "window and stride must be >= 1"));
        }
        if seg_len == 0 || rows % seg_len != 0 {
            return Err(Error::invalid(
                "strided_mean_pool",
                format!("{rows} rows do not split into segments of {seg_len}"),
            ));
        }
        if seg_len < window {
            return Err(Error::invalid(
                "strided_mean_pool",
                format!("sequence length {seg_len} is shorter than window {window}"),
            ));
        }
        let n = rows / seg_len;
        let out_len = (seg_len - window) / stride + 1;
        let src = self.value(x).data();
        let mut out = vec![0.0; n * out_len * d];
        for s in 0..n {
            for o in 0..out_len {
                let dst = (s * out_len + o) * d;
                for w in 0..window {
                    let r = s * seg_len + o * stride + w;
                    for c in 0..d {
                        out[dst + c] += src[r * d + c];
                    }
                }
                for c in 0..d {
                    out[dst + c] /= window as f64;
                }
            }
        }
        self.push(
            "strided_mean_pool",
            Tensor::raw(vec![n * out_len, d], out),
            Op::StridedMeanPool {
                x,
                seg_len,
                window,
                stride,
            },
            &[x],
        )
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let probs = self.value(p).data();
        if probs.len() != targets.len() || targets.is_empty() {
            return Err(Error::Shape {
                op: "bce",
                lhs: self.value(p).shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let loss = probs
            .iter()
            .zip(targets)
            .map(|(&p, &y)| bce_term(p, y))
            .sum::<f64>()
            / targets.len() as f64;
        self.push(
            "bce",
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            &[p],
        )
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        ensure_same_shape("mse", self.value(pred), self.value(target))?;
        let a = self.value(pred).data();
        let b = self.value(target).data();
        let loss = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
        self.push("mse", Tensor::scalar(loss), Op::Mse(pred, target), &[pred, target])
    }

    /// `sum_i w_i * s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            total += w * scalar_of("weighted_sum", self.value(v))?;
        }
        let inputs: Vec<Var> = terms.iter().map(|t| t.0).collect();
        self.push(
            "weighted_sum",
            Tensor::scalar(total),
            Op::WeightedSum(terms.to_vec()),
            &inputs,
        )
    }

    /// Propagates `d loss / d node` to every node that needs a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        scalar_of("backward", self.value(loss))?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = node.value.shape()[1];
                if wants(*a) {
                    let ga = grad_slot(grads, *a, m * k);
                    gemm(m, n, k, g, false, self.value(*b).data(), true, ga, true);
                }
                if wants(*b) {
                    let gb = grad_slot(grads, *b, k * n);
                    gemm(k, m, n, self.value(*a).data(), true, g, false, gb, true);
                }
            }
            Op::Linear { x, w, b } => {
                let (r, a) = self.value(*x).dims2().unwrap();
                let c = node.value.shape()[1];
                if wants(*x) {
                    let gx = grad_slot(grads, *x, r * a);
                    gemm(r, c, a, g, false, self.value(*w).data(), true, gx, true);
                }
                if wants(*w) {
                    let gw = grad_slot(grads, *w, a * c);
                    gemm(a, r, c, self.value(*x).data(), true, g, false, gw, true);
                }
                if wants(*b) {
                    let gb = grad_slot(grads, *b, c);
                    for row in g.chunks(c) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        let gv = grad_slot(grads, v, g.len());
                        for (acc, d) in gv.iter_mut().zip(g) {
                            *acc += d;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if wants(v) {
                        let od = self.value(other).data();
                        let gv = grad_slot(grads, v, g.len());
                        for i in 0..g.len() {
                            gv[i] += g[i] * od[i];
                        }
                    }
                }
            }
            Op::Scale(x, f) => {
                if wants(*x) {
                    let gx = grad_slot(grads, *x, g.len());
                    for (acc, d) in gx.iter_mut().zip(g) {
                        *acc += f * d;
                    }
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    let (r, c) = self.value(*x).dims2().unwrap();
                    let gx = grad_slot(grads, *x, r * c);
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xd = self.value(*x).data();
                    let gx = grad_slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        if xd[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    let gx = grad_slot(grads, *x, g.len());
                    for i in 0..g.len() {
                        gx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let n = self.value(*x).numel();
                    let gx = grad_slot(grads, *x, n);
                    for acc in gx.iter_mut() {
                        *acc += g[0];
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let (rows, d) = self.value(*x).dims2().unwrap();
                let gn = self.value(*gain).data();
                if wants(*gain) {
                    let gg = grad_slot(grads, *gain, d);
                    for r in 0..rows {
                        for c in 0..d {
                            gg[c] += g[r * d + c] * xhat[r * d + c];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = grad_slot(grads, *bias, d);
                    for r in 0..rows {
                        for c in 0..d {
                            gb[c] += g[r * d + c];
                        }
                    }
                }
                if wants(*x) {
                    let gx = grad_slot(grads, *x, rows * d);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..rows {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..d {
                            dxhat[c] = g[r * d + c] * gn[c];
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat[r * d + c];
                        }
                        mean_d /= d as f64;
                        mean_dx /= d as f64;
                        for c in 0..d {
                            gx[r * d + c] +=
                                rstd[r] * (dxhat[c] - mean_d - xhat[r * d + c] * mean_dx);
                        }
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    let width = *node.value.shape().last().unwrap();
                    let gx = grad_slot(grads, *x, g.len());
                    for (row, (yr, gr)) in y.chunks(width).zip(g.chunks(width)).enumerate() {
                        let dotp: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..width {
                            gx[row * width + c] += yr[c] * (gr[c] - dotp);
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2().unwrap();
                    if wants(p) {
                        let gp = grad_slot(grads, p, rows * w);
                        for r in 0..rows {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                layout,
                probs,
            } => self.backward_attention(*q, *k, *v, *heads, layout, probs, g, grads),
            Op::SegmentMean { x, seg_len } => {
                if wants(*x) {
                    let (rows, d) = self.value(*x).dims2().unwrap();
                    let gx = grad_slot(grads, *x, rows * d);
                    let inv = 1.0 / *seg_len as f64;
                    for r in 0..rows {
                        let s = r / seg_len;
                        for c in 0..d {
                            gx[r * d + c] += g[s * d + c] * inv;
                        }
                    }
                }
            }
            Op::StridedMeanPool {
                x,
                seg_len,
                window,
                stride,
            } => {
                if wants(*x) {
                    let (rows, d) = self.value(*x).dims2().unwrap();
                    let n = rows / seg_len;
                    let out_len = (seg_len - window) / stride + 1;
                    let gx = grad_slot(grads, *x, rows * d);
                    let inv = 1.0 / *window as f64;
                    for s in 0..n {
                        for o in 0..out_len {
                            let src = (s * out_len + o) * d;
                            for w in 0..*window {
                                let r = s * seg_len + o * stride + w;
                                for c in 0..d {
                                    gx[r * d + c] += g[src + c] * inv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Bce { p, targets } => {
                if wants(*p) {
                    let pd = self.value(*p).data();
                    let n = targets.len() as f64;
                    let gp = grad_slot(grads, *p, pd.len());
                    for i in 0..pd.len() {
                        let pi = pd[i];
                        if pi > BCE_CLAMP && pi < 1.0 - BCE_CLAMP {
                            let y = targets[i];
                            gp[i] += g[0] * (-y / pi + (1.0 - y) / (1.0 - pi)) / n;
                        }
                    }
                }
            }
            Op::Mse(a, b) => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                let scale = 2.0 * g[0] / ad.len() as f64;
                for (v, sign) in [(*a, 1.0), (*b, -1.0)] {
                    if wants(v) {
                        let gv = grad_slot(grads, v, ad.len());
                        for i in 0..ad.len() {
                            gv[i] += sign * scale * (ad[i] - bd[i]);
                        }
                    }
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    if wants(v) {
                        grad_slot(grads, v, 1)[0] += w * g[0];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        layout: &AttentionLayout,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (rq, d) = self.value(q).dims2().unwrap();
        let (rk, _) = self.value(k).dims2().unwrap();
        let f = d / heads;
        let scale = 1.0 / (f as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut gq = vec![0.0; rq * d];
        let mut gk = vec![0.0; rk * d];
        let mut gv = vec![0.0; rk * d];
        let (want_q, want_k, want_v) = (
            self.nodes[q.0].needs_grad,
            self.nodes[k.0].needs_grad,
            self.nodes[v.0].needs_grad,
        );
        let mut offset = 0;
        let mut ds = Vec::new();
        for (qs, ks) in layout.queries.iter().zip(&layout.keys) {
            let (lq, lk) = (qs.len, ks.len);
            ds.resize(lq * lk, 0.0);
            let sv = View::rows(0, lq, lk, lk);
            let pv = View::rows(offset, lq, lk, lk);
            for h in 0..heads {
                let col = h * f;
                let qv = View::rows(qs.start * d + col, lq, f, d);
                let kv = View::rows(ks.start * d + col, lk, f, d);
                let gv_ = View::rows(qs.start * d + col, lq, f, d);
                let pv = View { offset: pv.offset + h * lq * lk, ..pv };
                if want_v {
                    gemm_view(1.0, probs, pv.t(), g, gv_, 1.0, &mut gv, kv);
                }
                // dP = G V^T, then the softmax Jacobian row by row
                gemm_view(1.0, g, gv_, vd, kv.t(), 0.0, &mut ds, sv);
                for i in 0..lq {
                    let p = &probs[pv.offset + i * lk..pv.offset + (i + 1) * lk];
                    let row = &mut ds[i * lk..(i + 1) * lk];
                    let weighted: f64 = p.iter().zip(row.iter()).map(|(a, b)| a * b).sum();
                    for (r, &pj) in row.iter_mut().zip(p) {
                        *r = pj * (*r - weighted) * scale;
                    }
                }
                if want_q {
                    gemm_view(1.0, &ds, sv, kd, kv, 1.0, &mut gq, qv);
                }
                if want_k {
                    gemm_view(1.0, &ds, sv.t(), qd, qv, 1.0, &mut gk, kv);
                }
            }
            offset += heads * lq * lk;
        }
        for (var, buf) in [(q, gq), (k, gk), (v, gv)] {
            if self.nodes[var.0].needs_grad {
                let slot = grad_slot(grads, var, buf.len());
                for (acc, d) in slot.iter_mut().zip(&buf) {
                    *acc += d;
                }
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary cross-entropy of one probability with clamping.
pub fn bce_term(p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}
