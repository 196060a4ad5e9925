//! Trains on a generated corpus and reports validation scores per epoch.
//!
//! cargo run --release --example train_synthetic -- [train_size] [epochs]

use std::time::Instant;

use m3hg::config::Config;
use m3hg::synth::{generate_splits, SynthConfig};
use m3hg::trainer::{evaluate, train_with};

fn main() -> m3hg::Result<()> {
    let mut args = std::env::args().skip(1);
    let train_size: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(120);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);

    let synth = SynthConfig::default();
    let splits = generate_splits(&synth, &[train_size, train_size / 4, train_size / 4])?;
    let (train, val, test) = (&splits[0], &splits[1], &splits[2]);

    let mut cfg = Config::default();
    cfg.train.epochs = epochs;
    let start = Instant::now();
    let out = train_with(train, val, &cfg, |l| {
        println!(
            "epoch {:>3}  loss {:.4}  val 6avg {:.4}  4avg {:.4}  ({:.1}s)",
            l.epoch,
            l.train_loss,
            l.val_6avg,
            l.val_4avg,
            start.elapsed().as_secs_f64()
        );
        Ok(())
    })?;
    let model = out.best_model()?;
    println!("best epoch {}", out.best.epoch);
    print!("{}", evaluate(&model, test)?.to_table());
    Ok(())
}
