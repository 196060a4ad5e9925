//! Trains one model per context window K on a small synthetic corpus and
//! reports test scores, mirroring the `sweep-k` command.
//!
//! cargo run --release --example sweep_k -- [epochs] [K ...]

use m3hg::config::Config;
use m3hg::synth::{generate_splits, SynthConfig};
use m3hg::trainer::{evaluate, train};

fn main() -> m3hg::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(10);
    let mut ks: Vec<usize> = args.filter_map(|a| a.parse().ok()).collect();
    if ks.is_empty() {
        ks = vec![1, 2, 3, 4, 5];
    }
    let splits = generate_splits(
        &SynthConfig {
            signal_strength: 1.5,
            ..SynthConfig::default()
        },
        &[200, 50, 100],
    )?;

    println!("{:>3} {:>8} {:>8} {:>10}", "K", "6 Avg", "4 Avg", "best epoch");
    for k in ks {
        let mut cfg = Config::default();
        cfg.model.k = k;
        cfg.model.d_h = 16;
        cfg.model.d_s = 16;
        cfg.train.epochs = epochs;
        let out = train(&splits[0], &splits[1], &cfg)?;
        let report = evaluate(&out.best_model()?, &splits[2])?;
        println!(
            "{k:>3} {:>8.4} {:>8.4} {:>10}",
            report.triplet.avg6, report.triplet.avg4, out.best.epoch
        );
    }
    Ok(())
}
