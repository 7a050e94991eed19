//! Trains one architecture on synthetic domain A and reports held-out
//! metrics, then saves the checkpoint.
//!
//! cargo run --release --example train_and_evaluate -- [teo|tep|ted] [n_pedestrians] [out.ckpt]

use pedformer::data::{build_splits, generate_synthetic, Domain, ScenarioConfig, SliceConfig, SplitConfig};
use pedformer::model::{Architecture, ModelConfig, Transformer};
use pedformer::training::{evaluate, save_checkpoint, train_with, AdamConfig, TrainConfig};

fn main() -> pedformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let arch: Architecture = args.next().map_or(Ok(Architecture::Teo), |s| s.parse())?;
    let n: usize = args.next().map_or(600, |s| s.parse().expect("n_pedestrians"));
    let out = args.next().unwrap_or_else(|| "model.ckpt".into());

    let tracks = generate_synthetic(&ScenarioConfig::new(Domain::A, n, 3))?;
    let splits = build_splits(&tracks, &SliceConfig::default(), &SplitConfig::default())?;
    let norm = |ws: &[_]| -> Vec<_> { ws.iter().map(pedformer::data::ObservationWindow::normalized).collect() };
    let (train, val, test) = (norm(&splits.train), norm(&splits.val), norm(&splits.test));

    // a small model; the defaults (D=128, 4 layers, 8 heads) work too but take minutes per epoch
    let config = ModelConfig { d_model: 32, n_heads: 4, n_layers: 2, d_ffn: 64, ..ModelConfig::new(arch) };
    let mut model = Transformer::new(config, 0)?;
    let cfg = TrainConfig {
        epochs: 12,
        patience: None,
        optimizer: AdamConfig { lr: 5e-4, ..AdamConfig::default() },
        ..TrainConfig::default()
    };
    let outcome = train_with(&mut model, &train, &val, &cfg, None, &mut |r| {
        println!("epoch {:>2} {:<5} loss {:.4} acc {:.3} f1 {:.3}", r.epoch, r.split, r.loss, r.acc, r.f1);
    })?;
    println!("kept epoch {} ({} steps)", outcome.best_epoch, outcome.steps);

    let test_eval = evaluate(&model, &test, &cfg)?;
    println!("test: {}", test_eval.report.summary());
    save_checkpoint(&out, &model, Some(&outcome.optimizer), cfg.seed)?;
    println!("saved {out}");
    Ok(())
}
