//! Classification metrics at a threshold and rank-based ROC AUC.
//!
//! cargo run --example metrics

use pedformer::metrics::{auc_roc, classification_metrics};

fn main() -> pedformer::Result<()> {
    let probs = [0.9, 0.8, 0.8, 0.65, 0.4, 0.35, 0.3, 0.1];
    let labels = [1, 1, 0, 1, 0, 1, 0, 0];
    for threshold in [0.3, 0.5, 0.7] {
        println!("t={threshold}: {}", classification_metrics(&probs, &labels, threshold)?.summary());
    }
    // tied scores count half a win
    println!("auc {:.4}", auc_roc(&probs, &labels)?);
    Ok(())
}
