//! Trains the encoder-decoder jointly on crossing labels and future boxes,
//! then rolls a trajectory forward from its own predictions.
//!
//! cargo run --release --example trajectory_rollout

use pedformer::data::{build_splits, generate_synthetic, Domain, ScenarioConfig, SliceConfig, SplitConfig};
use pedformer::model::{Architecture, ModelConfig, Transformer};
use pedformer::training::{evaluate, train, AdamConfig, TrainConfig};

fn main() -> pedformer::Result<()> {
    let tracks = generate_synthetic(&ScenarioConfig::new(Domain::A, 600, 3))?;
    let splits = build_splits(&tracks, &SliceConfig::default(), &SplitConfig::default())?;
    let train_set: Vec<_> = splits.train.iter().map(|w| w.normalized()).collect();
    let val: Vec<_> = splits.val.iter().map(|w| w.normalized()).collect();

    let config = ModelConfig { d_model: 32, n_heads: 4, n_layers: 2, d_ffn: 64, ..ModelConfig::new(Architecture::Ted) };
    let mut model = Transformer::new(config, 0)?;
    let cfg = TrainConfig {
        epochs: 10,
        patience: None,
        optimizer: AdamConfig { lr: 5e-4, ..AdamConfig::default() },
        ..TrainConfig::default()
    };
    let outcome = train(&mut model, &train_set, &val, &cfg)?;
    let last = outcome.last("val").unwrap();
    println!("val loss {:.4} (classification + trajectory) acc {:.3} f1 {:.3}", last.loss, last.acc, last.f1);
    println!("val {}", evaluate(&model, &val, &cfg)?.report.summary());

    let w = &val[0];
    let truth = w.target.as_ref().unwrap();
    let steps = truth.shape()[0].min(10);
    let rollout = model.rollout_trajectory(&w.obs, steps)?;
    println!("\np(crossing) {:.3}, label {}", model.probability(&w.obs)?, w.label);
    println!("step   predicted x1,y1,x2,y2             true");
    for i in 0..steps {
        let fmt = |r: &[f64]| r.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(",");
        println!("{i:>4}   {:<32} {}", fmt(rollout.row(i)), fmt(truth.row(i)));
    }
    Ok(())
}
