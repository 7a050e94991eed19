//! Pretrains on domain A, fine-tunes on a small domain-B subset and
//! compares with training on that subset from scratch.
//!
//! cargo run --release --example transfer_learning -- [freeze_layers]

use pedformer::data::{build_splits, generate_synthetic, Domain, ObservationWindow, ScenarioConfig, SliceConfig, SplitConfig};
use pedformer::model::{Architecture, ModelConfig, Transformer};
use pedformer::training::{fine_tune, train, AdamConfig, FineTuneOptions, TrainConfig};

fn main() -> pedformer::Result<()> {
    let freeze_layers: usize = std::env::args().nth(1).map_or(0, |s| s.parse().expect("freeze_layers"));
    let norm = |ws: &[ObservationWindow]| -> Vec<_> { ws.iter().map(|w| w.normalized()).collect() };
    let a = build_splits(&generate_synthetic(&ScenarioConfig::new(Domain::A, 1000, 1))?, &SliceConfig::default(), &SplitConfig::default())?;
    let b = build_splits(&generate_synthetic(&ScenarioConfig::new(Domain::B, 1000, 2))?, &SliceConfig::default(), &SplitConfig::default())?;
    let small_b: Vec<_> = norm(&b.train).into_iter().step_by(b.train.len() / 500).take(500).collect();
    let b_val = norm(&b.val);

    let config = ModelConfig { d_model: 32, n_heads: 4, n_layers: 2, d_ffn: 64, ..ModelConfig::new(Architecture::Teo) };
    let cfg = |epochs| TrainConfig {
        epochs,
        patience: None,
        optimizer: AdamConfig { lr: 5e-4, ..AdamConfig::default() },
        ..TrainConfig::default()
    };

    let mut source = Transformer::new(config.clone(), 0)?;
    let pre = train(&mut source, &norm(&a.train), &norm(&a.val), &cfg(12))?;
    println!("pretrained on A: val f1 {:.3}", pre.best_val_f1.unwrap_or(0.0));

    let options = FineTuneOptions { freeze_layers, config: None, head_seed: 1 };
    let (_, tuned) = fine_tune(&source, &small_b, &b_val, &options, &cfg(5))?;
    let mut fresh = Transformer::new(config, 1)?;
    let scratch = train(&mut fresh, &small_b, &b_val, &cfg(5))?;
    for (name, out) in [("fine-tuned", &tuned), ("from scratch", &scratch)] {
        let f1s: Vec<String> = out.log.iter().filter(|r| r.split == "val").map(|r| format!("{:.3}", r.f1)).collect();
        println!("{name:<13} val f1 by epoch: {}", f1s.join(" "));
    }
    Ok(())
}
