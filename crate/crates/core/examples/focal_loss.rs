//! Shows how the focal modulation reshapes the loss on easy and hard
//! examples, and that gamma = 0 with unit weights is plain cross-entropy.
//!
//! cargo run --example focal_loss

use m3hg::numerics::{Tape, Tensor};
use m3hg::objective::{focal_binary, focal_multiclass};

const EPS: f64 = 1e-7;

fn binary(p: f64, gold: bool, gamma: f64) -> m3hg::Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![p]));
    let l = focal_binary(&mut tape, x, &[gold], [1.0, 1.0], gamma, EPS)?;
    Ok(tape.value(l).item())
}

fn main() -> m3hg::Result<()> {
    println!("binary loss on the gold class probability");
    println!("{:>8} {:>10} {:>10} {:>10}", "p_gold", "gamma=0", "gamma=1", "gamma=2");
    for p in [0.05, 0.25, 0.5, 0.75, 0.95] {
        let row: Vec<String> = [0.0, 1.0, 2.0]
            .iter()
            .map(|&g| binary(p, true, g).map(|v| format!("{v:>10.6}")))
            .collect::<m3hg::Result<_>>()?;
        println!("{p:>8.2} {}", row.join(" "));
    }

    // a negative at p = 0.9 is a confident mistake and keeps most of its loss
    println!("negative at p=0.9, gamma=2: {:.6}", binary(0.9, false, 2.0)?);

    let probs = Tensor::from_rows(&[[0.7, 0.2, 0.1], [0.1, 0.3, 0.6], [0.3, 0.3, 0.4]]);
    let gold = [0, 2, 1];
    let mut tape = Tape::new();
    let x = tape.constant(probs.clone());
    let l = focal_multiclass(&mut tape, x, &gold, &[1.0; 3], 0.0, EPS)?;
    let ce: f64 = gold.iter().enumerate().map(|(r, &g)| -probs.get(r, g).ln()).sum::<f64>() / 3.0;
    println!("multiclass, gamma=0: focal {:.6}  cross-entropy {ce:.6}", tape.value(l).item());
    Ok(())
}
