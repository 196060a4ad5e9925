//! Emotion, cause and pair classifiers and triplet decoding.

use std::rc::Rc;

use rand::Rng;

use crate::config::{ModelConfig, RpeConfig};
use crate::data::{EmotionLabel, Triplet};
use crate::error::{Error, Result};
use crate::numerics::nn::{FeedForward, Linear};
use crate::numerics::{ParamStore, Tape, Tensor, Var};

/// Radial-basis encoding of the offset `j - i` between emotion utterance `j`
/// and cause utterance `i`, clipped to the configured range.
pub fn rpe(i: usize, j: usize, cfg: &RpeConfig) -> Vec<f64> {
    let o = (j as f64 - i as f64).clamp(-cfg.clip, cfg.clip);
    let two_s2 = 2.0 * cfg.sigma * cfg.sigma;
    cfg.centers.iter().map(|mu| (-(o - mu).powi(2) / two_s2).exp()).collect()
}

/// RPE rows for all ordered pairs, row `(i-1) n + (j-1)`.
pub fn rpe_matrix(n: usize, cfg: &RpeConfig) -> Tensor {
    let mut data = Vec::with_capacity(n * n * cfg.centers.len());
    for i in 1..=n {
        for j in 1..=n {
            data.extend(rpe(i, j, cfg));
        }
    }
    Tensor::matrix(n * n, cfg.centers.len(), data).expect("sizes agree")
}

/// Pair MLP. The first layer acts on `[Z_j^e | Z_i^c | rpe(i, j)]`; its
/// weight is kept as three row blocks so the two state blocks are applied
/// once per utterance instead of once per pair.
#[derive(Clone, Debug)]
pub struct PairHead {
    pub emotion_block: Linear,
    pub cause_block: Linear,
    pub rpe_block: Linear,
    pub output: Linear,
    pub rpe: RpeConfig,
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub emotion: FeedForward,
    pub cause: FeedForward,
    pub pair: PairHead,
}

pub struct HeadOutput {
    /// `n x 7` class probabilities.
    pub emotion: Var,
    /// `n x 1` cause indicator probabilities.
    pub cause: Var,
    /// `n^2 x 1` pair probabilities, row `(i-1) n + (j-1)` for cause `i`,
    /// emotion `j`.
    pub pair: Var,
}

impl HeadParams {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_h;
        Self {
            emotion: FeedForward::new(store, "head.emotion", d, d, EmotionLabel::ALL.len(), rng),
            cause: FeedForward::new(store, "head.cause", d, d, 1, rng),
            pair: PairHead {
                emotion_block: Linear::new(store, "head.pair.inner.emotion", d, d, false, rng),
                cause_block: Linear::new(store, "head.pair.inner.cause", d, d, false, rng),
                rpe_block: Linear::new(store, "head.pair.inner.rpe", cfg.d_p(), d, true, rng),
                output: Linear::new(store, "head.pair.output", d, 1, true, rng),
                rpe: cfg.rpe.clone(),
            },
        }
    }

    pub fn emotion_head(&self, tape: &mut Tape, store: &ParamStore, z_e: Var) -> Result<Var> {
        let logits = self.emotion.forward(tape, store, z_e)?;
        tape.softmax_rows(logits, None)
    }

    pub fn cause_head(&self, tape: &mut Tape, store: &ParamStore, z_c: Var) -> Result<Var> {
        let logit = self.cause.forward(tape, store, z_c)?;
        tape.sigmoid(logit)
    }

    pub fn pair_head(&self, tape: &mut Tape, store: &ParamStore, z_e: Var, z_c: Var) -> Result<Var> {
        let n = tape.value(z_e).rows();
        if tape.value(z_c).rows() != n {
            return Err(Error::shape(format!("pair head: {} emotion rows, {} cause rows", n, tape.value(z_c).rows())));
        }
        let p = &self.pair;
        let e = p.emotion_block.forward(tape, store, z_e)?;
        let c = p.cause_block.forward(tape, store, z_c)?;
        let by_emotion: Rc<[usize]> = (0..n * n).map(|f| f % n).collect();
        let by_cause: Rc<[usize]> = (0..n * n).map(|f| f / n).collect();
        let e = tape.gather_rows(e, by_emotion)?;
        let c = tape.gather_rows(c, by_cause)?;
        let r = tape.constant(rpe_matrix(n, &p.rpe));
        let r = p.rpe_block.forward(tape, store, r)?;
        let h = tape.add(e, c)?;
        let h = tape.add(h, r)?;
        let h = tape.relu(h)?;
        let logit = p.output.forward(tape, store, h)?;
        tape.sigmoid(logit)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, z_e: Var, z_c: Var) -> Result<HeadOutput> {
        Ok(HeadOutput {
            emotion: self.emotion_head(tape, store, z_e)?,
            cause: self.cause_head(tape, store, z_c)?,
            pair: self.pair_head(tape, store, z_e, z_c)?,
        })
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Emits `(j, i, emotion_j)` for every non-neutral utterance `j` and every
/// candidate cause `i` whose pair probability exceeds `tau`. With
/// `cause_gate`, the cause indicator of `i` must also exceed `tau`.
/// Output is sorted by `(j, i)`.
pub fn decode_triplets(emotion: &Tensor, pair: &Tensor, tau: f64, cause_gate: Option<&[f64]>) -> Vec<Triplet> {
    let n = emotion.rows();
    let mut out = Vec::new();
    for j in 1..=n {
        let label = EmotionLabel::from_index(argmax(emotion.row(j - 1))).expect("seven classes");
        if label.is_neutral() {
            continue;
        }
        for i in 1..=n {
            let p = pair.data()[(i - 1) * n + (j - 1)];
            if p > tau && cause_gate.is_none_or(|g| g[i - 1] > tau) {
                out.push(Triplet {
                    emotion_utt: j,
                    cause_utt: i,
                    emotion: label,
                    score: Some(p),
                });
            }
        }
    }
    out
}
