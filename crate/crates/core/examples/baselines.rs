//! Scores two reference predictors against gold triplets: the gold labels
//! themselves and the position prior (majority emotion caused by the
//! previous utterance).
//!
//! cargo run --example baselines

use m3hg::data::Conversation;
use m3hg::metrics::{majority_emotion, position_prior, triplet_f1, MetricsReport};
use m3hg::synth::{generate_splits, SynthConfig};

fn main() -> m3hg::Result<()> {
    let splits = generate_splits(&SynthConfig::default(), &[600, 100, 100])?;
    let (train, test) = (&splits[0], &splits[2]);
    let gold: Vec<_> = test.conversations.iter().map(Conversation::gold_triplets).collect();

    let oracle = triplet_f1(&gold, &gold)?;
    println!("gold vs gold: 6 Avg {:.4}", oracle.avg6);

    let majority = majority_emotion(train);
    let prior = MetricsReport {
        triplet: triplet_f1(&gold, &position_prior(majority, test))?,
        subtasks: None,
    };
    println!("position prior, majority emotion {}:", majority.as_str());
    print!("{}", prior.to_table());
    Ok(())
}
