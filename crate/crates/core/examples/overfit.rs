//! Memorizes a small synthetic corpus with the default training profile and
//! prints the training-set report, a quick check that the whole pipeline
//! can fit its data.
//!
//! cargo run --release --example overfit -- [conversations] [epochs]

use m3hg::config::Config;
use m3hg::synth::{generate, SynthConfig};
use m3hg::trainer::{evaluate, train_with};

fn main() -> m3hg::Result<()> {
    let mut args = std::env::args().skip(1);
    let conversations: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(16);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(200);
    let data = generate(&SynthConfig {
        conversations,
        signal_strength: 3.0,
        noise_std: 1.0,
        seed: 16,
        ..SynthConfig::default()
    })?;
    let mut cfg = Config::default();
    cfg.train.epochs = epochs;
    for (k, v) in std::env::vars().filter(|(k, _)| k.starts_with("SET_")) {
        cfg = cfg.apply_override(&format!("{}={v}", k[4..].replace("__", ".")))?;
    }
    let out = train_with(&data, &data, &cfg, |l| {
        if l.epoch % 20 == 0 {
            println!("epoch {:>4}  loss {:.5}  6avg {:.4}", l.epoch, l.train_loss, l.val_6avg);
        }
        Ok(())
    })?;
    let report = evaluate(&out.best_model()?, &data)?;
    print!("{}", report.to_table());
    Ok(())
}
