//! Reverse-mode gradients on the tape checked against central differences,
//! first for a small expression and then for every parameter group of the
//! three architectures.
//!
//! cargo run --release --example gradient_check

use pedformer::model::Architecture;
use pedformer::numerics::{grad_check_inputs, Tape, Tensor};
use pedformer::training::{gradcheck_config, model_grad_check};

fn main() -> pedformer::Result<()> {
    // sum(sigmoid(x W + b))
    let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![0.1, 0.3, -0.7]])?;
    let w = Tensor::from_rows(&[vec![0.2, -0.4], vec![1.1, 0.0], vec![-0.3, 0.8]])?;
    let b = Tensor::new(vec![2], vec![0.05, -0.2])?;
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.variable(x.clone()), tape.variable(w.clone()), tape.variable(b.clone()));
    let y = tape.linear(xv, wv, bv)?;
    let s = tape.sigmoid(y)?;
    let loss = tape.sum(s)?;
    let grads = tape.backward(loss)?;
    println!("loss {:.6}", tape.value(loss).data()[0]);
    println!("dW {:?}", grads.get(wv).unwrap());

    let report = grad_check_inputs(
        |t, v| {
            let y = t.linear(v[0], v[1], v[2])?;
            let s = t.sigmoid(y)?;
            t.sum(s)
        },
        &[x, w, b],
        1e-5,
    )?;
    println!("expression: {} coordinates, max rel error {:.2e}\n", report.checked, report.max_rel_error);

    for arch in [Architecture::Teo, Architecture::Tep, Architecture::Ted] {
        let r = model_grad_check(&gradcheck_config(arch), 1, 1e-5, 8)?;
        println!("{arch}: max rel error {:.2e}", r.max_rel_error);
        for g in &r.groups {
            println!("  {:<6} {:>4} coords {:.2e}", g.group, g.checked, g.max_rel_error);
        }
    }
    Ok(())
}
