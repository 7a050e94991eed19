//! Transformer building blocks expressed as tape operations.

use rand::{Rng, RngCore};

use crate::error::{Error, Result};
use crate::numerics::{AttentionLayout, AttentionMask, Segment, Tape, Tensor, Var};

/// Fixed sinusoidal table: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`,
/// `PE[pos, 2i+1] = cos(pos / 10000^(2i/d))`.
pub fn positional_encoding(t_max: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; t_max * d];
    for pos in 0..t_max {
        for c in 0..d {
            let pair = (c / 2) * 2;
            let angle = pos as f64 / 10000f64.powf(pair as f64 / d as f64);
            data[pos * d + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::raw(vec![t_max, d], data)
}

/// Rows of `table` for positions `0..len` of every segment, stacked.
pub(crate) fn positions_for(table: &Tensor, segments: &[Segment]) -> Result<Tensor> {
    let (t_max, d) = table.dims2()?;
    let total: usize = segments.iter().map(|s| s.len).sum();
    let mut data = Vec::with_capacity(total * d);
    for s in segments {
        if s.len > t_max {
            return Err(Error::invalid(
                "positional_encoding",
                format!("sequence of {} exceeds the {t_max}-position table", s.len),
            ));
        }
        data.extend_from_slice(&table.data()[..s.len * d]);
    }
    Ok(Tensor::raw(vec![total, d], data))
}

/// `x W_e + b_e + PE`, with positions restarting at each segment.
pub fn embed_input(
    tape: &mut Tape,
    x: Var,
    w: Var,
    b: Var,
    pe: &Tensor,
    segments: &[Segment],
) -> Result<Var> {
    let projected = tape.linear(x, w, b)?;
    let pos = tape.constant(positions_for(pe, segments)?);
    tape.add(projected, pos)
}

/// Single-sequence `softmax(q k^T / sqrt(d_k) + mask) v` built from primitive
/// ops; `mask` is `rows_q x rows_k` with entries `0` or `-inf`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var, mask: &Tensor) -> Result<Var> {
    let (_, dk) = tape.value(k).dims2()?;
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let probs = tape.masked_softmax(scaled, mask)?;
    tape.matmul(probs, v)
}

/// `rows x rows` additive mask hiding future positions.
pub fn causal_mask(rows: usize) -> Tensor {
    let mut data = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in i + 1..rows {
            data[i * rows + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::raw(vec![rows, rows], data)
}

/// Per-head projections `D x F` and the output projection `D x D`.
#[derive(Clone, Debug)]
pub struct AttentionVars {
    pub wq: Vec<Var>,
    pub wk: Vec<Var>,
    pub wv: Vec<Var>,
    pub wo: Var,
}

/// `Concat(head_1..head_H) W^O` with `head_i = Attention(q W_i^Q, kv W_i^K, kv W_i^V)`.
///
/// Queries and keys may have different lengths; `layout` pairs them up per
/// sequence in the batch.
pub fn multi_head_attention(
    tape: &mut Tape,
    q_in: Var,
    kv_in: Var,
    w: &AttentionVars,
    layout: &AttentionLayout,
    mask: AttentionMask,
) -> Result<Var> {
    let heads = w.wq.len();
    if heads == 0 || w.wk.len() != heads || w.wv.len() != heads {
        return Err(Error::invalid("multi_head_attention", "inconsistent head count"));
    }
    let wq = tape.concat_cols(&w.wq)?;
    let wk = tape.concat_cols(&w.wk)?;
    let wv = tape.concat_cols(&w.wv)?;
    let q = tape.matmul(q_in, wq)?;
    let k = tape.matmul(kv_in, wk)?;
    let v = tape.matmul(kv_in, wv)?;
    let heads_out = tape.attention(q, k, v, heads, layout, mask)?;
    tape.matmul(heads_out, w.wo)
}

#[derive(Clone, Copy, Debug)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Position-wise `relu(x W1 + b1) W2 + b2`.
pub fn feed_forward(tape: &mut Tape, x: Var, w: &FfnVars) -> Result<Var> {
    let hidden = tape.linear(x, w.w1, w.b1)?;
    let hidden = tape.relu(hidden)?;
    tape.linear(hidden, w.w2, w.b2)
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    pub gain: Var,
    pub bias: Var,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerVars {
    pub mha: AttentionVars,
    pub ln1: NormVars,
    pub ffn: FfnVars,
    pub ln2: NormVars,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerVars {
    pub self_attn: AttentionVars,
    pub ln1: NormVars,
    pub cross_attn: AttentionVars,
    pub ln2: NormVars,
    pub ffn: FfnVars,
    pub ln3: NormVars,
}

/// Inverted dropout; a no-op when `rng` is `None` or `rate` is zero.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: Option<&'a mut dyn RngCore>,
}

impl Dropout<'_> {
    pub fn disabled() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_mut() else {
            return Ok(x);
        };
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = tape.value(x).shape().to_vec();
        let n = tape.value(x).numel();
        let mask = (0..n)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let mask = tape.constant(Tensor::raw(shape, mask));
        tape.mul(x, mask)
    }
}

/// Residual sub-block `LayerNorm(residual + sublayer)`.
fn add_norm(tape: &mut Tape, residual: Var, sub: Var, ln: &NormVars, eps: f64) -> Result<Var> {
    let sum = tape.add(residual, sub)?;
    tape.layer_norm(sum, ln.gain, ln.bias, eps)
}

/// `h = LN(h + MHA(h, h)); h = LN(h + FFN(h))` over `batch` sequences of `len`.
pub fn encoder_layer(
    tape: &mut Tape,
    h: Var,
    w: &EncoderLayerVars,
    batch: usize,
    len: usize,
    eps: f64,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let layout = AttentionLayout::self_attention(Segment::uniform(batch, len));
    let att = multi_head_attention(tape, h, h, &w.mha, &layout, AttentionMask::None)?;
    let att = dropout.apply(tape, att)?;
    let h = add_norm(tape, h, att, &w.ln1, eps)?;
    let ff = feed_forward(tape, h, &w.ffn)?;
    let ff = dropout.apply(tape, ff)?;
    add_norm(tape, h, ff, &w.ln2, eps)
}

/// Encoder layer whose queries are strided-mean-pooled while keys and values
/// stay at full length. The residual runs along the pooled stream. Returns
/// the new tensor and its per-sequence length; pooling is skipped (plain
/// encoder layer) when the pooled length would drop below `min_len` or the
/// window does not fit.
#[allow(clippy::too_many_arguments)]
pub fn encoder_pooling_layer(
    tape: &mut Tape,
    h: Var,
    w: &EncoderLayerVars,
    batch: usize,
    len: usize,
    window: usize,
    stride: usize,
    min_len: usize,
    eps: f64,
    dropout: &mut Dropout<'_>,
) -> Result<(Var, usize)> {
    let pooled_len = if len >= window {
        Some((len - window) / stride + 1).filter(|&l| l >= min_len)
    } else {
        None
    };
    let Some(pooled_len) = pooled_len else {
        let out = encoder_layer(tape, h, w, batch, len, eps, dropout)?;
        return Ok((out, len));
    };
    let query = tape.strided_mean_pool(h, len, window, stride)?;
    let layout = AttentionLayout::new(
        Segment::uniform(batch, pooled_len),
        Segment::uniform(batch, len),
    )?;
    let att = multi_head_attention(tape, query, h, &w.mha, &layout, AttentionMask::None)?;
    let att = dropout.apply(tape, att)?;
    let h = add_norm(tape, query, att, &w.ln1, eps)?;
    let ff = feed_forward(tape, h, &w.ffn)?;
    let ff = dropout.apply(tape, ff)?;
    Ok((add_norm(tape, h, ff, &w.ln2, eps)?, pooled_len))
}

/// Causal self-attention over the target stream, cross-attention into the
/// encoder memory, then the feed-forward block; post-norm residuals.
#[allow(clippy::too_many_arguments)]
pub fn decoder_layer(
    tape: &mut Tape,
    h: Var,
    memory: Var,
    w: &DecoderLayerVars,
    targets: &[Segment],
    memory_segments: &[Segment],
    eps: f64,
    dropout: &mut Dropout<'_>,
) -> Result<Var> {
    let self_layout = AttentionLayout::self_attention(targets.to_vec());
    let att = multi_head_attention(tape, h, h, &w.self_attn, &self_layout, AttentionMask::Causal)?;
    let att = dropout.apply(tape, att)?;
    let h = add_norm(tape, h, att, &w.ln1, eps)?;
    let cross_layout = AttentionLayout::new(targets.to_vec(), memory_segments.to_vec())?;
    let cross = multi_head_attention(
        tape,
        h,
        memory,
        &w.cross_attn,
        &cross_layout,
        AttentionMask::None,
    )?;
    let cross = dropout.apply(tape, cross)?;
    let h = add_norm(tape, h, cross, &w.ln2, eps)?;
    let ff = feed_forward(tape, h, &w.ffn)?;
    let ff = dropout.apply(tape, ff)?;
    add_norm(tape, h, ff, &w.ln3, eps)
}
