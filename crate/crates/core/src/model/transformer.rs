use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{Architecture, ModelConfig};
use super::layers::{
    decoder_layer, embed_input, encoder_layer, encoder_pooling_layer, positional_encoding,
    AttentionVars, DecoderLayerVars, Dropout, EncoderLayerVars, FfnVars, NormVars,
};
use super::params::{Binding, ModelParams, ParamId};
use crate::error::{Error, Result};
use crate::numerics::{Segment, Tape, Tensor, Var};

/// Width of one bounding box `(x1, y1, x2, y2)`.
pub const BOX_DIM: usize = 4;

#[derive(Clone, Debug)]
struct AttentionIds {
    wq: Vec<ParamId>,
    wk: Vec<ParamId>,
    wv: Vec<ParamId>,
    wo: ParamId,
}

impl AttentionIds {
    fn register(p: &mut ModelParams, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d, f) = (cfg.d_model, cfg.head_dim());
        let mut wq = Vec::new();
        let mut wk = Vec::new();
        let mut wv = Vec::new();
        for h in 0..cfg.n_heads {
            wq.push(p.matrix(format!("{prefix}.h{h}.wq"), d, f, rng));
            wk.push(p.matrix(format!("{prefix}.h{h}.wk"), d, f, rng));
            wv.push(p.matrix(format!("{prefix}.h{h}.wv"), d, f, rng));
        }
        let wo = p.matrix(format!("{prefix}.wo"), d, d, rng);
        Self { wq, wk, wv, wo }
    }

    fn vars(&self, b: &Binding) -> AttentionVars {
        AttentionVars {
            wq: self.wq.iter().map(|&id| b.var(id)).collect(),
            wk: self.wk.iter().map(|&id| b.var(id)).collect(),
            wv: self.wv.iter().map(|&id| b.var(id)).collect(),
            wo: b.var(self.wo),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

impl NormIds {
    fn register(p: &mut ModelParams, prefix: &str, d: usize) -> Self {
        Self {
            gain: p.constant_vector(format!("{prefix}.gain"), d, 1.0),
            bias: p.constant_vector(format!("{prefix}.bias"), d, 0.0),
        }
    }

    fn vars(&self, b: &Binding) -> NormVars {
        NormVars {
            gain: b.var(self.gain),
            bias: b.var(self.bias),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FfnIds {
    fn register(p: &mut ModelParams, prefix: &str, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let (d, h) = (cfg.d_model, cfg.d_ffn);
        Self {
            w1: p.matrix(format!("{prefix}.w1"), d, h, rng),
            b1: p.bias(format!("{prefix}.b1"), h, d, rng),
            w2: p.matrix(format!("{prefix}.w2"), h, d, rng),
            b2: p.bias(format!("{prefix}.b2"), d, h, rng),
        }
    }

    fn vars(&self, b: &Binding) -> FfnVars {
        FfnVars {
            w1: b.var(self.w1),
            b1: b.var(self.b1),
            w2: b.var(self.w2),
            b2: b.var(self.b2),
        }
    }
}

#[derive(Clone, Debug)]
struct EncoderIds {
    mha: AttentionIds,
    ln1: NormIds,
    ffn: FfnIds,
    ln2: NormIds,
}

#[derive(Clone, Debug)]
struct DecoderIds {
    self_attn: AttentionIds,
    ln1: NormIds,
    cross_attn: AttentionIds,
    ln2: NormIds,
    ffn: FfnIds,
    ln3: NormIds,
}

#[derive(Clone, Copy, Debug)]
struct LinearIds {
    w: ParamId,
    b: ParamId,
}

impl LinearIds {
    fn register(
        p: &mut ModelParams,
        prefix: &str,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: p.matrix(format!("{prefix}.w"), rows, cols, rng),
            b: p.bias(format!("{prefix}.b"), cols, rows, rng),
        }
    }
}

/// Decoder input for a batch: target boxes shifted right by one step.
#[derive(Clone, Copy, Debug)]
pub struct DecoderInput<'a> {
    /// Stacked `sum(C_i) x 4` box rows.
    pub boxes: &'a Tensor,
    /// One segment per sample, in batch order.
    pub segments: &'a [Segment],
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `batch x 1` crossing probabilities.
    pub prob: Var,
    /// `sum(C_i) x 4` next-step box predictions (TED with decoder input only).
    pub traj: Option<Var>,
    /// Sequence length after each encoder layer.
    pub encoder_lengths: Vec<usize>,
}

/// A TEO, TEP or TED model: configuration, named parameters and the fixed
/// positional table.
#[derive(Clone, Debug)]
pub struct Transformer {
    config: ModelConfig,
    params: ModelParams,
    embed: LinearIds,
    decoder_embed: Option<LinearIds>,
    encoder: Vec<EncoderIds>,
    decoder: Vec<DecoderIds>,
    traj_out: Option<LinearIds>,
    cls_hidden: LinearIds,
    cls_out: LinearIds,
    pe: Tensor,
}

impl Transformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ModelParams::new();
        let d = config.d_model;
        let embed = LinearIds::register(&mut p, "emb", BOX_DIM, d, &mut rng);
        let encoder = (0..config.n_layers)
            .map(|l| EncoderIds {
                mha: AttentionIds::register(&mut p, &format!("enc.{l}.mha"), &config, &mut rng),
                ln1: NormIds::register(&mut p, &format!("enc.{l}.ln1"), d),
                ffn: FfnIds::register(&mut p, &format!("enc.{l}.ffn"), &config, &mut rng),
                ln2: NormIds::register(&mut p, &format!("enc.{l}.ln2"), d),
            })
            .collect();
        let is_ted = config.architecture == Architecture::Ted;
        let decoder_embed = (is_ted && !config.share_decoder_embedding)
            .then(|| LinearIds::register(&mut p, "dec_emb", BOX_DIM, d, &mut rng));
        let decoder = if is_ted {
            (0..config.n_layers)
                .map(|l| DecoderIds {
                    self_attn: AttentionIds::register(
                        &mut p,
                        &format!("dec.{l}.self"),
                        &config,
                        &mut rng,
                    ),
                    ln1: NormIds::register(&mut p, &format!("dec.{l}.ln1"), d),
                    cross_attn: AttentionIds::register(
                        &mut p,
                        &format!("dec.{l}.cross"),
                        &config,
                        &mut rng,
                    ),
                    ln2: NormIds::register(&mut p, &format!("dec.{l}.ln2"), d),
                    ffn: FfnIds::register(&mut p, &format!("dec.{l}.ffn"), &config, &mut rng),
                    ln3: NormIds::register(&mut p, &format!("dec.{l}.ln3"), d),
                })
                .collect()
        } else {
            Vec::new()
        };
        let traj_out = is_ted.then(|| LinearIds::register(&mut p, "traj", d, BOX_DIM, &mut rng));
        let cls_hidden = LinearIds::register(&mut p, "cls.hidden", d, config.cls_dim(), &mut rng);
        let cls_out = LinearIds::register(&mut p, "cls.out", config.cls_dim(), 1, &mut rng);
        let pe = positional_encoding(config.max_positions, d);
        Ok(Self {
            config,
            params: p,
            embed,
            decoder_embed,
            encoder,
            decoder,
            traj_out,
            cls_hidden,
            cls_out,
            pe,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ModelParams {
        &mut self.params
    }

    /// Whether `name` belongs to the classification head.
    pub fn is_head_param(name: &str) -> bool {
        name.starts_with("cls.")
    }

    /// Runs the model on `x`, a stack of `batch` windows of `obs_len x 4`
    /// rows. With `decoder` (TED only) the trajectory branch is evaluated as
    /// well. Dropout is active only when `rng` is given.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binding: &Binding,
        x: &Tensor,
        decoder: Option<DecoderInput<'_>>,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<ForwardOutput> {
        let (rows, cols) = x.dims2()?;
        let t = self.config.obs_len;
        if cols != BOX_DIM || rows == 0 || rows % t != 0 {
            return Err(Error::Shape {
                op: "forward",
                lhs: x.shape().to_vec(),
                rhs: vec![t, BOX_DIM],
            });
        }
        if decoder.is_some() && self.config.architecture != Architecture::Ted {
            return Err(Error::Config(format!(
                "{} has no decoder",
                self.config.architecture
            )));
        }
        let batch = rows / t;
        let eps = self.config.layer_norm_eps;
        let mut dropout = Dropout {
            rate: self.config.dropout,
            rng,
        };

        let xv = tape.constant(x.clone());
        let enc_segments = Segment::uniform(batch, t);
        let mut h = embed_input(
            tape,
            xv,
            binding.var(self.embed.w),
            binding.var(self.embed.b),
            &self.pe,
            &enc_segments,
        )?;
        let mut len = t;
        let mut lengths = Vec::with_capacity(self.encoder.len());
        for ids in &self.encoder {
            let w = EncoderLayerVars {
                mha: ids.mha.vars(binding),
                ln1: ids.ln1.vars(binding),
                ffn: ids.ffn.vars(binding),
                ln2: ids.ln2.vars(binding),
            };
            if self.config.architecture == Architecture::Tep {
                (h, len) = encoder_pooling_layer(
                    tape,
                    h,
                    &w,
                    batch,
                    len,
                    self.config.pool_window,
                    self.config.pool_stride,
                    self.config.min_pooled_len,
                    eps,
                    &mut dropout,
                )?;
            } else {
                h = encoder_layer(tape, h, &w, batch, len, eps, &mut dropout)?;
            }
            lengths.push(len);
        }
        let prob = self.classify(tape, binding, h, len)?;

        let traj = match decoder {
            Some(dec) => Some(self.decode(tape, binding, h, batch, len, dec, &mut dropout)?),
            None => None,
        };
        Ok(ForwardOutput {
            prob,
            traj,
            encoder_lengths: lengths,
        })
    }

    /// Global average over time, hidden projection with ReLU, sigmoid output.
    fn classify(&self, tape: &mut Tape, b: &Binding, enc: Var, len: usize) -> Result<Var> {
        let pooled = tape.segment_mean(enc, len)?;
        let hidden = tape.linear(pooled, b.var(self.cls_hidden.w), b.var(self.cls_hidden.b))?;
        let hidden = tape.relu(hidden)?;
        let logit = tape.linear(hidden, b.var(self.cls_out.w), b.var(self.cls_out.b))?;
        tape.sigmoid(logit)
    }

    #[allow(clippy::too_many_arguments)]
    fn decode(
        &self,
        tape: &mut Tape,
        b: &Binding,
        memory: Var,
        batch: usize,
        memory_len: usize,
        dec: DecoderInput<'_>,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var> {
        let (rows, cols) = dec.boxes.dims2()?;
        let expected: usize = dec.segments.iter().map(|s| s.len).sum();
        if cols != BOX_DIM || rows != expected || dec.segments.len() != batch {
            return Err(Error::Shape {
                op: "decode",
                lhs: dec.boxes.shape().to_vec(),
                rhs: vec![expected, BOX_DIM],
            });
        }
        let mut start = 0;
        for s in dec.segments {
            if s.start != start || s.len == 0 {
                return Err(Error::invalid("decode", "segments must be contiguous and non-empty"));
            }
            start += s.len;
        }
        let emb = self.decoder_embed.unwrap_or(self.embed);
        let yv = tape.constant(dec.boxes.clone());
        let mut h = embed_input(tape, yv, b.var(emb.w), b.var(emb.b), &self.pe, dec.segments)?;
        let memory_segments = Segment::uniform(batch, memory_len);
        for ids in &self.decoder {
            let w = DecoderLayerVars {
                self_attn: ids.self_attn.vars(b),
                ln1: ids.ln1.vars(b),
                cross_attn: ids.cross_attn.vars(b),
                ln2: ids.ln2.vars(b),
                ffn: ids.ffn.vars(b),
                ln3: ids.ln3.vars(b),
            };
            h = decoder_layer(
                tape,
                h,
                memory,
                &w,
                dec.segments,
                &memory_segments,
                self.config.layer_norm_eps,
                dropout,
            )?;
        }
        let out = self
            .traj_out
            .ok_or_else(|| Error::Config("model has no trajectory head".into()))?;
        tape.linear(h, b.var(out.w), b.var(out.b))
    }

    fn frozen_binding(&self, tape: &mut Tape) -> Binding {
        self.params.bind(tape, |_| false)
    }

    /// Crossing probabilities for a batch of `obs_len x 4` windows, using
    /// the encoder and classification head only.
    pub fn predict(&self, windows: &[Tensor]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(256) {
            let mut data = Vec::with_capacity(chunk.len() * self.config.obs_len * BOX_DIM);
            for w in chunk {
                if w.shape() != [self.config.obs_len, BOX_DIM] {
                    return Err(Error::Shape {
                        op: "predict",
                        lhs: w.shape().to_vec(),
                        rhs: vec![self.config.obs_len, BOX_DIM],
                    });
                }
                data.extend_from_slice(w.data());
            }
            let x = Tensor::new(vec![chunk.len() * self.config.obs_len, BOX_DIM], data)?;
            let mut tape = Tape::new();
            let b = self.frozen_binding(&mut tape);
            let fwd = self.forward(&mut tape, &b, &x, None, None)?;
            out.extend_from_slice(tape.value(fwd.prob).data());
        }
        Ok(out)
    }

    /// Probability for one window regardless of architecture.
    pub fn probability(&self, x: &Tensor) -> Result<f64> {
        Ok(self.predict(std::slice::from_ref(x))?[0])
    }

    fn expect(&self, arch: Architecture) -> Result<()> {
        if self.config.architecture != arch {
            return Err(Error::Config(format!(
                "model is {}, not {arch}",
                self.config.architecture
            )));
        }
        Ok(())
    }

    pub fn forward_teo(&self, x: &Tensor) -> Result<f64> {
        self.expect(Architecture::Teo)?;
        self.probability(x)
    }

    pub fn forward_tep(&self, x: &Tensor) -> Result<f64> {
        self.expect(Architecture::Tep)?;
        self.probability(x)
    }

    /// Probability from the encoder and next-step boxes for each row of `y_in`.
    pub fn forward_ted(&self, x: &Tensor, y_in: &Tensor) -> Result<(f64, Tensor)> {
        self.expect(Architecture::Ted)?;
        let (c, _) = y_in.dims2()?;
        let segments = [Segment::new(0, c)];
        let mut tape = Tape::new();
        let b = self.frozen_binding(&mut tape);
        let fwd = self.forward(
            &mut tape,
            &b,
            x,
            Some(DecoderInput {
                boxes: y_in,
                segments: &segments,
            }),
            None,
        )?;
        let prob = tape.value(fwd.prob).data()[0];
        let traj = tape.value(fwd.traj.expect("decoder output")).clone();
        Ok((prob, traj))
    }

    /// TED probability without running the decoder.
    pub fn forward_ted_encoder_only(&self, x: &Tensor) -> Result<f64> {
        self.expect(Architecture::Ted)?;
        self.probability(x)
    }

    /// Feeds the decoder its own predictions, starting from the last observed
    /// box, for `steps` future boxes.
    pub fn rollout_trajectory(&self, x: &Tensor, steps: usize) -> Result<Tensor> {
        self.expect(Architecture::Ted)?;
        let (t, _) = x.dims2()?;
        let mut inputs: Vec<f64> = x.row(t - 1).to_vec();
        let mut predicted = Vec::with_capacity(steps * BOX_DIM);
        for step in 0..steps {
            let y_in = Tensor::new(vec![step + 1, BOX_DIM], inputs.clone())?;
            let (_, traj) = self.forward_ted(x, &y_in)?;
            let next = traj.row(step);
            predicted.extend_from_slice(next);
            inputs.extend_from_slice(next);
        }
        Tensor::new(vec![steps, BOX_DIM], predicted)
    }
}
