//! Saves a model with its optimizer state, reloads it and checks that the
//! weights, the predictions and the file bytes are reproduced exactly.
//!
//! cargo run --release --example checkpoint_roundtrip

use pedformer::model::{Architecture, ModelConfig, Transformer};
use pedformer::numerics::Tensor;
use pedformer::training::{load_checkpoint, save_checkpoint, AdamConfig, OptimizerState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("pedformer-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("ted.ckpt");

    let model = Transformer::new(ModelConfig { n_layers: 2, ..ModelConfig::new(Architecture::Ted) }, 42)?;
    let optimizer = OptimizerState::new(AdamConfig::default(), model.params());
    save_checkpoint(&path, &model, Some(&optimizer), 42)?;
    let bytes = std::fs::read(&path)?;
    println!("{} bytes, {} tensors", bytes.len(), model.params().len());

    let back = load_checkpoint(&path)?;
    let x = Tensor::new(vec![16, 4], (0..64).map(|i| (i as f64 * 0.37).sin() * 0.5 + 0.5).collect())?;
    let (p0, p1) = (model.probability(&x)?, back.model.probability(&x)?);
    println!("probability {p0} / reloaded {p1}, bit-equal {}", p0.to_bits() == p1.to_bits());
    println!("bytes identical after re-save: {}", back.to_bytes() == bytes);
    for name in model.params().names().take(6) {
        println!("  {name}");
    }
    Ok(())
}
