use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{make_batch, Batch};
use super::loss::{objective, LossWeights};
use super::optim::{clip_grad_norm, AdamConfig, OptimizerState};
use crate::data::NormalizedWindow;
use crate::error::{Error, Result};
use crate::metrics::{classification_metrics, MetricsReport};
use crate::model::{Architecture, DecoderInput, ModelConfig, ModelParams, Transformer};
use crate::numerics::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub loss: LossWeights,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop after this many epochs without a better validation F1.
    pub patience: Option<usize>,
    /// Hard cap on optimizer steps across all epochs.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Decision threshold for accuracy and F1.
    pub threshold: f64,
    /// Parameters whose name starts with one of these are not updated.
    pub frozen: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            optimizer: AdamConfig::default(),
            loss: LossWeights::default(),
            clip_norm: Some(1.0),
            patience: Some(10),
            max_steps: None,
            seed: 0,
            threshold: 0.5,
            frozen: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} not in [0, 1]", self.threshold)));
        }
        Ok(())
    }

    fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub acc: f64,
    pub f1: f64,
    pub auc: Option<f64>,
    pub wall_ms: u64,
    /// Steps whose gradient norm was clipped (training split only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clipped: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// Epoch (1-based) whose weights were kept; the last one without validation data.
    pub best_epoch: usize,
    pub best_val_f1: Option<f64>,
    pub steps: u64,
    pub stopped_early: bool,
    pub optimizer: OptimizerState,
}

impl TrainOutcome {
    /// Log records as line-delimited JSON.
    pub fn log_jsonl(&self) -> String {
        self.log
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn last(&self, split: &str) -> Option<&EpochRecord> {
        self.log.iter().rev().find(|r| r.split == split)
    }
}

/// Loss and metrics of a model on a window set.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub report: MetricsReport,
    pub probs: Vec<f64>,
}

fn uses_decoder(model: &Transformer, windows: &[NormalizedWindow]) -> bool {
    model.config().architecture == Architecture::Ted && windows.iter().all(|w| w.target.is_some())
}

pub(crate) fn batch_objective(
    model: &Transformer,
    tape: &mut Tape,
    params: &ModelParams,
    batch: &Batch,
    cfg: &TrainConfig,
    trainable: &dyn Fn(&str) -> bool,
    rng: Option<&mut dyn RngCore>,
) -> Result<(crate::model::Binding, crate::numerics::Var, Vec<f64>)> {
    let binding = params.bind(tape, trainable);
    let decoder = batch.decoder.as_ref().map(|d| DecoderInput {
        boxes: &d.inputs,
        segments: &d.segments,
    });
    let out = model.forward(tape, &binding, &batch.x, decoder, rng)?;
    let traj = match (out.traj, &batch.decoder) {
        (Some(pred), Some(d)) => Some((pred, tape.constant(d.targets.clone()))),
        _ => None,
    };
    let loss = objective(tape, out.prob, &batch.labels, traj, cfg.loss)?;
    let probs = tape.value(out.prob).data().to_vec();
    Ok((binding, loss, probs))
}

/// Objective and metrics without updating the model. TED windows with
/// targets include the trajectory term.
pub fn evaluate(
    model: &Transformer,
    windows: &[NormalizedWindow],
    cfg: &TrainConfig,
) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let with_decoder = uses_decoder(model, windows);
    let mut loss_sum = 0.0;
    let mut probs = Vec::with_capacity(windows.len());
    let refs: Vec<&NormalizedWindow> = windows.iter().collect();
    for chunk in refs.chunks(cfg.batch_size.max(1)) {
        let batch = make_batch(chunk, with_decoder)?;
        let mut tape = Tape::new();
        let (_, loss, p) = batch_objective(model, &mut tape, model.params(), &batch, cfg, &|_| false, None)?;
        loss_sum += tape.value(loss).data()[0] * chunk.len() as f64;
        probs.extend(p);
    }
    let labels: Vec<u8> = windows.iter().map(|w| w.label as u8).collect();
    let report = classification_metrics(&probs, &labels, cfg.threshold)?;
    Ok(Evaluation {
        loss: loss_sum / windows.len() as f64,
        report,
        probs,
    })
}

pub fn train(
    model: &mut Transformer,
    train: &[NormalizedWindow],
    val: &[NormalizedWindow],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, train, val, cfg, None, &mut |_| {})
}

/// Mini-batch Adam on `train`, keeping the weights with the best validation
/// F1 (the last weights when `val` is empty). `optimizer` resumes a previous
/// state; `observer` sees each log record as it is produced.
pub fn train_with(
    model: &mut Transformer,
    train: &[NormalizedWindow],
    val: &[NormalizedWindow],
    cfg: &TrainConfig,
    optimizer: Option<OptimizerState>,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("empty training set".into()));
    }
    let mut opt = match optimizer {
        Some(mut o) => {
            o.config = cfg.optimizer;
            o
        }
        None => OptimizerState::new(cfg.optimizer, model.params()),
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d20f);
    let with_decoder = uses_decoder(model, train);
    let trainable = |name: &str| !cfg.is_frozen(name);
    let labels: Vec<u8> = train.iter().map(|w| w.label as u8).collect();

    let mut log = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut steps_this_run = 0usize;
    let mut last_epoch = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();

    'epochs: for epoch in 1..=cfg.epochs {
        let started = Instant::now();
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        let mut probs = vec![0.0; train.len()];
        let mut clipped = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| steps_this_run >= m) {
                break;
            }
            let windows: Vec<&NormalizedWindow> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = make_batch(&windows, with_decoder)?;
            let mut tape = Tape::new();
            let rng: Option<&mut dyn RngCore> =
                (model.config().dropout > 0.0).then_some(&mut dropout_rng as &mut dyn RngCore);
            let (binding, loss, p) =
                batch_objective(model, &mut tape, model.params(), &batch, cfg, &trainable, rng)?;
            let grads = tape.backward(loss)?;
            let params = model.params_mut();
            params.zero_grad();
            params.accumulate_grads(&binding, &grads)?;
            if let Some(max) = cfg.clip_norm {
                let norm = clip_grad_norm(params, max);
                if !norm.is_finite() {
                    return Err(Error::NonFinite { op: "gradient" });
                }
                if norm > max {
                    clipped += 1;
                }
            }
            opt.step(params)?;
            steps_this_run += 1;
            loss_sum += tape.value(loss).data()[0] * chunk.len() as f64;
            for (&i, pi) in chunk.iter().zip(p) {
                probs[i] = pi;
            }
            seen += chunk.len();
        }
        if seen == 0 {
            break;
        }
        last_epoch = epoch;
        let (seen_probs, seen_labels): (Vec<f64>, Vec<u8>) = if seen == train.len() {
            (probs, labels.clone())
        } else {
            order[..seen].iter().map(|&i| (probs[i], labels[i])).unzip()
        };
        let report = classification_metrics(&seen_probs, &seen_labels, cfg.threshold)?;
        let record = EpochRecord {
            epoch,
            split: "train".into(),
            loss: loss_sum / seen as f64,
            acc: report.accuracy,
            f1: report.f1,
            auc: report.auc,
            wall_ms: started.elapsed().as_millis() as u64,
            clipped: Some(clipped),
        };
        observer(&record);
        log.push(record);

        if !val.is_empty() {
            let started = Instant::now();
            let eval = evaluate(model, val, cfg)?;
            let record = EpochRecord {
                epoch,
                split: "val".into(),
                loss: eval.loss,
                acc: eval.report.accuracy,
                f1: eval.report.f1,
                auc: eval.report.auc,
                wall_ms: started.elapsed().as_millis() as u64,
                clipped: None,
            };
            observer(&record);
            log.push(record);
            if best.as_ref().map_or(true, |(f1, _, _)| eval.report.f1 > *f1) {
                best = Some((eval.report.f1, epoch, model.params().clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience.is_some_and(|p| since_best >= p) {
                    stopped_early = true;
                    break 'epochs;
                }
            }
        }
        if cfg.max_steps.is_some_and(|m| steps_this_run >= m) {
            break;
        }
    }

    let (best_epoch, best_val_f1) = match best {
        Some((f1, epoch, params)) => {
            *model.params_mut() = params;
            (epoch, Some(f1))
        }
        None => (last_epoch, None),
    };
    model.params_mut().clear_grad();
    Ok(TrainOutcome {
        log,
        best_epoch,
        best_val_f1,
        steps: opt.step,
        stopped_early,
        optimizer: opt,
    })
}

/// Prefixes frozen by `freeze_layers = k`: the input embedding and the
/// first `k` encoder layers.
pub fn frozen_prefixes(freeze_layers: usize) -> Vec<String> {
    if freeze_layers == 0 {
        return Vec::new();
    }
    std::iter::once("emb.".to_string())
        .chain((0..freeze_layers).map(|l| format!("enc.{l}.")))
        .collect()
}

/// Fresh model for `config` carrying over every parameter of `source` with
/// the same name and shape. Classification-head parameters that do not
/// match are re-initialised from `seed`; any other mismatch, in either
/// direction, is an [`Error::Incompatible`] listing the names.
pub fn transfer_weights(source: &Transformer, config: &ModelConfig, seed: u64) -> Result<Transformer> {
    let mut target = Transformer::new(config.clone(), seed)?;
    let mut mismatched = Vec::new();
    let names: Vec<String> = target.params().names().map(str::to_string).collect();
    for name in &names {
        match source.params().get(name) {
            Some(t) if Some(t.shape()) == target.params().get(name).map(|x| x.shape()) => {
                let mut t = t.clone();
                t.clear_grad();
                target.params_mut().set(name, t)?;
            }
            _ if Transformer::is_head_param(name) => {}
            _ => mismatched.push(name.clone()),
        }
    }
    for name in source.params().names() {
        if target.params().get(name).is_none() && !Transformer::is_head_param(name) {
            mismatched.push(name.to_string());
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::Incompatible { names: mismatched });
    }
    Ok(target)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FineTuneOptions {
    /// Freeze the embedding and this many leading encoder layers.
    pub freeze_layers: usize,
    /// Target configuration; defaults to the source model's.
    pub config: Option<ModelConfig>,
    /// Seed for re-initialised head parameters.
    pub head_seed: u64,
}

/// Transfers `source` into a new model and trains it on `train`.
pub fn fine_tune(
    source: &Transformer,
    train: &[NormalizedWindow],
    val: &[NormalizedWindow],
    options: &FineTuneOptions,
    cfg: &TrainConfig,
) -> Result<(Transformer, TrainOutcome)> {
    fine_tune_with(source, train, val, options, cfg, &mut |_| {})
}

/// [`fine_tune`] with a log observer.
pub fn fine_tune_with(
    source: &Transformer,
    train: &[NormalizedWindow],
    val: &[NormalizedWindow],
    options: &FineTuneOptions,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<(Transformer, TrainOutcome)> {
    let config = options.config.clone().unwrap_or_else(|| source.config().clone());
    if options.freeze_layers > config.n_layers {
        return Err(Error::Config(format!(
            "cannot freeze {} of {} encoder layers",
            options.freeze_layers, config.n_layers
        )));
    }
    let mut model = transfer_weights(source, &config, options.head_seed)?;
    let mut cfg = cfg.clone();
    cfg.frozen.extend(frozen_prefixes(options.freeze_layers));
    let outcome = train_with(&mut model, train, val, &cfg, None, observer)?;
    Ok((model, outcome))
}
