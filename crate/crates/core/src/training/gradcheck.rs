use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::batch::{make_batch, Batch};
use super::loss::LossWeights;
use super::trainer::{batch_objective, TrainConfig};
use crate::data::NormalizedWindow;
use crate::error::Result;
use crate::model::{Architecture, ModelConfig, Transformer, BOX_DIM};
use crate::numerics::{central_difference, relative_error, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GroupError {
    /// `emb`, `enc.0`, `dec.1`, `cls`, ...
    pub group: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelGradCheck {
    pub architecture: Architecture,
    pub eps: f64,
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
}

/// Small float64 configurations used by the model gradient check:
/// 4-layer 8-head TEO and TEP, 2+2-layer TED.
pub fn gradcheck_config(architecture: Architecture) -> ModelConfig {
    ModelConfig {
        architecture,
        d_model: 16,
        n_heads: 8,
        n_layers: if architecture == Architecture::Ted { 2 } else { 4 },
        d_ffn: 32,
        pool_window: 2,
        pool_stride: 2,
        ..ModelConfig::new(architecture)
    }
}

fn group_of(name: &str) -> String {
    let mut parts = name.split('.');
    let head = parts.next().unwrap_or(name);
    match (head, parts.next()) {
        ("enc" | "dec", Some(layer)) => format!("{head}.{layer}"),
        _ => head.to_string(),
    }
}

fn random_batch(config: &ModelConfig, batch: usize, rng: &mut ChaCha8Rng) -> Result<Batch> {
    let mut boxes = |n: usize| {
        let mut data = Vec::with_capacity(n * BOX_DIM);
        for _ in 0..n {
            let (x, y) = (rng.gen_range(0.1..0.8), rng.gen_range(0.2..0.6));
            data.extend([x, y, x + rng.gen_range(0.02..0.1), y + rng.gen_range(0.1..0.3)]);
        }
        Tensor::new(vec![n, BOX_DIM], data)
    };
    let ted = config.architecture == Architecture::Ted;
    let mut windows = Vec::with_capacity(batch);
    for i in 0..batch {
        windows.push(NormalizedWindow {
            obs: boxes(config.obs_len)?,
            target: if ted { Some(boxes(3 + i)?) } else { None },
            label: (i % 2) as f64,
            tte: 3 + i,
        });
    }
    let refs: Vec<&NormalizedWindow> = windows.iter().collect();
    make_batch(&refs, ted)
}

/// Compares backpropagated parameter gradients of the full training
/// objective with central differences at `samples` random coordinates per
/// tensor. Errors are reported per layer group.
pub fn model_grad_check(
    config: &ModelConfig,
    seed: u64,
    eps: f64,
    samples: usize,
) -> Result<ModelGradCheck> {
    let mut model = Transformer::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9c4e_c4ec);
    let batch = random_batch(config, 3, &mut rng)?;
    let cfg = TrainConfig {
        loss: LossWeights::default(),
        ..TrainConfig::default()
    };

    let mut tape = Tape::new();
    let (binding, loss, _) =
        batch_objective(&model, &mut tape, model.params(), &batch, &cfg, &|_| true, None)?;
    let grads = tape.backward(loss)?;
    model.params_mut().zero_grad();
    model.params_mut().accumulate_grads(&binding, &grads)?;
    let analytic: Vec<Vec<f64>> = model
        .params()
        .iter()
        .map(|p| p.tensor.grad().map(<[f64]>::to_vec).unwrap_or_default())
        .collect();
    model.params_mut().clear_grad();

    let mut groups: Vec<GroupError> = Vec::new();
    let names: Vec<String> = model.params().names().map(str::to_string).collect();
    for (pi, name) in names.iter().enumerate() {
        let numel = model.params().iter().nth(pi).map_or(0, |p| p.tensor.numel());
        let picks = sample(&mut rng, numel, samples.min(numel));
        let mut worst = 0.0f64;
        for idx in picks.iter() {
            let base = model.params().get(name).map_or(0.0, |t| t.data()[idx]);
            let numeric = central_difference(
                |delta| {
                    if let Some(t) = model.params_mut().get_mut(name) {
                        t.data_mut()[idx] = base + delta;
                    }
                    let mut tape = Tape::new();
                    let (_, loss, _) = batch_objective(
                        &model,
                        &mut tape,
                        model.params(),
                        &batch,
                        &cfg,
                        &|_| false,
                        None,
                    )?;
                    Ok(tape.value(loss).data()[0])
                },
                eps,
            );
            if let Some(t) = model.params_mut().get_mut(name) {
                t.data_mut()[idx] = base;
            }
            let numeric = numeric?;
            worst = worst.max(relative_error(analytic[pi][idx], numeric));
        }
        let group = group_of(name);
        match groups.iter_mut().find(|g| g.group == group) {
            Some(g) => {
                g.checked += picks.len();
                g.max_rel_error = g.max_rel_error.max(worst);
            }
            None => groups.push(GroupError {
                group,
                checked: picks.len(),
                max_rel_error: worst,
            }),
        }
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(ModelGradCheck {
        architecture: config.architecture,
        eps,
        groups,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_follow_layer_prefixes() {
        assert_eq!(group_of("enc.3.mha.h2.wq"), "enc.3");
        assert_eq!(group_of("dec.0.cross.wo"), "dec.0");
        assert_eq!(group_of("cls.hidden.w"), "cls");
        assert_eq!(group_of("emb.b"), "emb");
    }

    #[test]
    fn tiny_teo_gradients_match() {
        let cfg = ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            d_ffn: 8,
            ..ModelConfig::new(Architecture::Teo)
        };
        let r = model_grad_check(&cfg, 3, 1e-5, 3).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.groups.iter().any(|g| g.group == "enc.0"));
    }
}
