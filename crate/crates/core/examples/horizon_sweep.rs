//! Accuracy as a function of time-to-event: trains a small model, then
//! scores non-overlapping windows in 15-frame bands from 15 to 90 frames.
//!
//! cargo run --release --example horizon_sweep

use pedformer::data::{build_splits, generate_synthetic, split_tracks, tte_sweep_slices, Domain, ScenarioConfig, SliceConfig, SplitConfig, TteBand};
use pedformer::metrics::horizon_report;
use pedformer::model::{Architecture, ModelConfig, Transformer};
use pedformer::training::{evaluate, train, AdamConfig, TrainConfig};

fn main() -> pedformer::Result<()> {
    let tracks = generate_synthetic(&ScenarioConfig::new(Domain::B, 800, 5))?;
    let split = SplitConfig::default();
    let splits = build_splits(&tracks, &SliceConfig::default(), &split)?;
    let norm = |ws: &[_]| -> Vec<_> { ws.iter().map(pedformer::data::ObservationWindow::normalized).collect() };

    let config = ModelConfig { d_model: 32, n_heads: 4, n_layers: 2, d_ffn: 64, ..ModelConfig::new(Architecture::Tep) };
    let mut model = Transformer::new(config, 0)?;
    let cfg = TrainConfig {
        epochs: 12,
        patience: None,
        optimizer: AdamConfig { lr: 5e-4, ..AdamConfig::default() },
        ..TrainConfig::default()
    };
    train(&mut model, &norm(&splits.train), &norm(&splits.val), &cfg)?;

    // the same track partition as build_splits; sweep the held-out tracks only
    let (_, _, test_tracks) = split_tracks(&tracks, split.train_fraction, split.val_fraction, split.seed);
    let bands = TteBand::parse_list("15-30,30-45,45-60,60-75,75-90")?;
    let mut rows = Vec::new();
    for (band, windows) in tte_sweep_slices(&test_tracks, 16, &bands, false) {
        rows.push((band, evaluate(&model, &norm(&windows), &cfg)?.report));
    }
    print!("{}", horizon_report(rows).table());
    Ok(())
}
