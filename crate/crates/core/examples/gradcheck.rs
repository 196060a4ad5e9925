//! Compares the analytic gradient of the joint loss with central
//! differences for the full model and the ablated variants.
//!
//! cargo run --release --example gradcheck -- [seed] [coords]

use m3hg::config::{ModalitySet, ModelConfig};
use m3hg::model::loss_grad_check;

fn main() -> m3hg::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(7);
    let coords: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(50);
    let base = ModelConfig {
        d_h: 8,
        d_s: 8,
        fusion_layers: 2,
        ..ModelConfig::default()
    };
    let variants: [(&str, fn(&mut ModelConfig)); 5] = [
        ("full", |_| {}),
        ("no context nodes", |c| c.ablation.use_context_nodes = false),
        ("no intra fusion", |c| c.ablation.use_intra = false),
        ("no inter fusion", |c| c.ablation.use_inter = false),
        ("text only", |c| c.modalities = ModalitySet { audio: false, video: false }),
    ];
    for (name, tweak) in variants {
        let mut cfg = base.clone();
        tweak(&mut cfg);
        let r = loss_grad_check(&cfg, seed, 4, coords, 1e-5, 1e-4)?;
        println!(
            "{name:<18} {} coords  max rel error {:.2e}  {}",
            coords,
            r.max_rel_error,
            if r.passed { "ok" } else { "FAILED" }
        );
    }
    Ok(())
}
