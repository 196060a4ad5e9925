//! Seeded synthetic conversations with planted emotion-cause structure.
//!
//! Every modality vector is Gaussian noise plus a scaled code vector for the
//! utterance's own emotion; a cause utterance additionally carries a cause
//! code naming the emotion it triggers. Codes are rows of a seeded random
//! orthonormal basis, so the signal is linearly decodable from each modality
//! alone while pairing still needs cross-utterance reasoning.

use std::collections::BTreeSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Conversation, Dataset, EmotionLabel, FeatureDims, Modality, Split, Utterance};
use crate::error::{Error, Result};

/// Offsets `j - i` covered by [`SynthConfig::offset_distribution`].
pub const OFFSETS: [i64; 9] = [-4, -3, -2, -1, 0, 1, 2, 3, 4];

/// Default offset masses: mean 0.69, 10% of causes after the emotion.
pub const DEFAULT_OFFSET_MASS: [f64; 9] = [0.0, 0.01, 0.03, 0.06, 0.335, 0.39, 0.105, 0.04, 0.03];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub conversations: usize,
    /// Inclusive utterance-count range.
    pub n_range: (usize, usize),
    /// Inclusive speaker-count range.
    pub speakers: (usize, usize),
    /// Probability that an utterance carries an emotion.
    pub emotion_rate: f64,
    /// Relative frequencies of the six emotions.
    pub emotion_weights: [f64; 6],
    /// Masses for offsets -4..=4.
    pub offset_distribution: [f64; 9],
    pub signal_strength: f64,
    pub noise_std: f64,
    pub dims: FeatureDims,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            conversations: 100,
            n_range: (4, 12),
            speakers: (2, 3),
            emotion_rate: 0.5,
            emotion_weights: [0.15, 0.05, 0.05, 0.35, 0.15, 0.25],
            offset_distribution: DEFAULT_OFFSET_MASS,
            signal_strength: 3.0,
            noise_std: 1.0,
            dims: FeatureDims {
                text: 16,
                audio: 16,
                video: 16,
            },
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic config: {m}")));
        if self.n_range.0 < 1 || self.n_range.0 > self.n_range.1 {
            return bad("n_range must satisfy 1 <= min <= max");
        }
        if self.speakers.0 < 1 || self.speakers.0 > self.speakers.1 {
            return bad("speakers must satisfy 1 <= min <= max");
        }
        if !(0.0..=1.0).contains(&self.emotion_rate) {
            return bad("emotion_rate must be in [0, 1]");
        }
        for (name, w) in [("emotion_weights", &self.emotion_weights[..]), ("offset_distribution", &self.offset_distribution[..])] {
            if w.iter().any(|v| !(*v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return bad(&format!("{name} must be non-negative with positive total"));
            }
        }
        let total: f64 = self.offset_distribution.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return bad("offset_distribution must sum to 1");
        }
        if self.offset_distribution[4] <= 0.0 {
            // a single-utterance conversation can only hold offset 0
            return bad("offset 0 needs positive mass");
        }
        if !(self.signal_strength > 0.0) || !(self.noise_std >= 0.0) {
            return bad("signal_strength must be positive and noise_std non-negative");
        }
        for m in Modality::ALL {
            if self.dims.get(m) < 13 {
                return bad("every feature width must be at least 13 to hold the code vectors");
            }
        }
        Ok(())
    }

    /// Mean of the offset distribution.
    pub fn mean_offset(&self) -> f64 {
        OFFSETS.iter().zip(&self.offset_distribution).map(|(o, p)| *o as f64 * p).sum()
    }
}

/// Gram-Schmidt on Gaussian draws: `count` orthonormal rows of width `d`.
fn orthonormal_rows(d: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    while rows.len() < count {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for r in &rows {
            let dot: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(r) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-6 {
            rows.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    rows
}

/// Code vectors for one modality: rows 0..7 name an utterance's emotion,
/// rows 7..13 mark a cause of the given non-neutral emotion.
struct Codes {
    emotion: Vec<Vec<f64>>,
    cause: Vec<Vec<f64>>,
}

impl Codes {
    fn new(d: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut rows = orthonormal_rows(d, 13, rng);
        let cause = rows.split_off(7);
        Self { emotion: rows, cause }
    }
}

pub fn sample_offset<R: Rng>(rng: &mut R, dist: &WeightedIndex<f64>) -> i64 {
    OFFSETS[dist.sample(rng)]
}

fn conversation(cfg: &SynthConfig, id: String, codes: &[Codes; 3], rng: &mut ChaCha8Rng) -> Result<Conversation> {
    let offsets = WeightedIndex::new(cfg.offset_distribution).map_err(|e| Error::Config(e.to_string()))?;
    let emotions = WeightedIndex::new(cfg.emotion_weights).map_err(|e| Error::Config(e.to_string()))?;
    let n = rng.random_range(cfg.n_range.0..=cfg.n_range.1);
    let n_speakers = rng.random_range(cfg.speakers.0..=cfg.speakers.1);
    let speakers: Vec<String> = (0..n).map(|_| format!("S{}", rng.random_range(0..n_speakers))).collect();
    let labels: Vec<EmotionLabel> = (0..n)
        .map(|_| {
            if rng.random::<f64>() < cfg.emotion_rate {
                EmotionLabel::EMOTIONS[emotions.sample(rng)]
            } else {
                EmotionLabel::Neutral
            }
        })
        .collect();
    let mut causes: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    // caused[i] lists the emotions utterance i triggers
    let mut caused: Vec<BTreeSet<EmotionLabel>> = vec![BTreeSet::new(); n];
    for j in 1..=n {
        if labels[j - 1].is_neutral() {
            continue;
        }
        let i = loop {
            let i = j as i64 - sample_offset(rng, &offsets);
            if (1..=n as i64).contains(&i) {
                break i as usize;
            }
        };
        causes[j - 1].insert(i);
        caused[i - 1].insert(labels[j - 1]);
    }
    let s = cfg.signal_strength;
    let utterances = (1..=n)
        .map(|j| {
            let features = Modality::ALL.map(|m| {
                let c = &codes[m.index()];
                let mut v: Vec<f64> = (0..cfg.dims.get(m))
                    .map(|_| cfg.noise_std * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                let mut plant = |code: &[f64]| v.iter_mut().zip(code).for_each(|(x, y)| *x += s * y);
                plant(&c.emotion[labels[j - 1].index()]);
                for e in &caused[j - 1] {
                    plant(&c.cause[e.index()]);
                }
                v
            });
            Utterance {
                index: j,
                speaker: speakers[j - 1].clone(),
                text: None,
                features,
                emotion: labels[j - 1],
                cause_indices: std::mem::take(&mut causes[j - 1]),
            }
        })
        .collect();
    Ok(Conversation { id, utterances })
}

/// Generates `cfg.conversations` conversations; ids are `synth-<seed>-<k>`.
pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    Ok(generate_splits(cfg, &[cfg.conversations])?.pop().expect("one split requested"))
}

/// One corpus cut into consecutive splits of the given sizes (all sharing
/// the same code vectors). Three sizes map to train/val/test.
pub fn generate_splits(cfg: &SynthConfig, sizes: &[usize]) -> Result<Vec<Dataset>> {
    cfg.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(cfg.seed);
    let codes = Modality::ALL.map(|m| Codes::new(cfg.dims.get(m), &mut master));
    let splits = [Split::Train, Split::Val, Split::Test];
    let mut out = Vec::with_capacity(sizes.len());
    let mut k = 0usize;
    for (s, &size) in sizes.iter().enumerate() {
        let mut convs = Vec::with_capacity(size);
        for _ in 0..size {
            let mut rng = ChaCha8Rng::seed_from_u64(master.random());
            convs.push(conversation(cfg, format!("synth-{}-{k}", cfg.seed), &codes, &mut rng)?);
            k += 1;
        }
        let split = if sizes.len() == 3 { splits[s] } else { Split::Train };
        out.push(Dataset::new(split, convs));
    }
    Ok(out)
}
