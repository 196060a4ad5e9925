//! Trains the full model and each structural ablation on one synthetic
//! corpus and prints test scores side by side.
//!
//! cargo run --release --example ablation -- [epochs] [signal] [seeds]

use m3hg::config::{Config, ModalitySet};
use m3hg::data::{Conversation, Dataset, Triplet};
use m3hg::metrics::{majority_emotion, position_prior, triplet_f1};
use m3hg::model::Model;
use m3hg::synth::{generate_splits, SynthConfig};
use m3hg::trainer::{evaluate, train};

fn after_emotion_f1(model: &Model, test: &Dataset) -> m3hg::Result<f64> {
    let keep = |ts: Vec<Triplet>| ts.into_iter().filter(|t| t.cause_utt > t.emotion_utt).collect::<Vec<_>>();
    let mut gold = Vec::new();
    let mut pred = Vec::new();
    for c in &test.conversations {
        gold.push(keep(Conversation::gold_triplets(c)));
        pred.push(keep(model.predict(c, false)?.triplets));
    }
    Ok(triplet_f1(&gold, &pred)?.micro.f1)
}

fn main() -> m3hg::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(20);
    let signal: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(1.5);
    let seeds: u64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(1);

    let synth = SynthConfig {
        signal_strength: signal,
        ..SynthConfig::default()
    };
    let splits = generate_splits(&synth, &[600, 100, 100])?;
    let (tr, va, te) = (&splits[0], &splits[1], &splits[2]);
    let prior = triplet_f1(
        &te.conversations.iter().map(Conversation::gold_triplets).collect::<Vec<_>>(),
        &position_prior(majority_emotion(tr), te),
    )?;
    println!("position prior       6avg {:.4}", prior.avg6);

    let variants: [(&str, fn(&mut Config)); 5] = [
        ("full", |_| {}),
        ("no context nodes", |c| c.model.ablation.use_context_nodes = false),
        ("no intra fusion", |c| c.model.ablation.use_intra = false),
        ("no inter fusion", |c| c.model.ablation.use_inter = false),
        ("text only", |c| c.model.modalities = ModalitySet { audio: false, video: false }),
    ];
    for (name, tweak) in variants {
        for seed in 0..seeds {
            // narrow model: 13 trainings on 600 conversations add up
            let mut cfg = Config::default();
            cfg.model.d_h = 16;
            cfg.model.d_s = 16;
            cfg.train.epochs = epochs;
            cfg.train.seed = seed;
            tweak(&mut cfg);
            let model = train(tr, va, &cfg)?.best_model()?;
            let report = evaluate(&model, te)?;
            println!(
                "{name:<20} seed {seed}  6avg {:.4}  4avg {:.4}  after-emotion f1 {:.4}",
                report.triplet.avg6,
                report.triplet.avg4,
                after_emotion_f1(&model, te)?
            );
        }
    }
    Ok(())
}
