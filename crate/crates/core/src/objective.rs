//! Focal losses for the three sub-tasks and their weighted sum.

use serde::Serialize;

use crate::config::LossConfig;
use crate::data::{Dataset, EmotionLabel};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

/// Per-element focal term `a (1 - p)^g (-ln p)` on the clamped probability
/// and its derivative in `p`. Clamped elements get zero derivative.
fn focal_term(p: f64, alpha: f64, gamma: f64, eps: f64) -> (f64, f64) {
    let clamped = p < eps || p > 1.0 - eps;
    let p = p.clamp(eps, 1.0 - eps);
    let nll = -p.ln();
    if gamma == 0.0 {
        return (alpha * nll, if clamped { 0.0 } else { -alpha / p });
    }
    let q = 1.0 - p;
    let value = alpha * q.powf(gamma) * nll;
    let deriv = alpha * (gamma * q.powf(gamma - 1.0) * p.ln() - q.powf(gamma) / p);
    (value, if clamped { 0.0 } else { deriv })
}

/// Mean over rows of the focal term on the gold-class probability.
pub fn focal_multiclass(tape: &mut Tape, probs: Var, gold: &[usize], alpha: &[f64], gamma: f64, eps: f64) -> Result<Var> {
    let p = tape.value(probs);
    let (n, c) = (p.rows(), p.cols());
    if gold.len() != n {
        return Err(Error::shape(format!("focal: {n} probability rows, {} labels", gold.len())));
    }
    if alpha.len() != c {
        return Err(Error::shape(format!("focal: {c} classes, {} class weights", alpha.len())));
    }
    if n == 0 {
        return Err(Error::shape("focal loss over zero rows"));
    }
    let mut total = 0.0;
    let mut dprob = vec![0.0; n * c];
    for (r, &g) in gold.iter().enumerate() {
        if g >= c {
            return Err(Error::Label(format!("gold class {g} out of range for {c} classes")));
        }
        let (v, d) = focal_term(p.get(r, g), alpha[g], gamma, eps);
        total += v;
        dprob[r * c + g] = d / n as f64;
    }
    tape.focal_node(probs, total / n as f64, dprob)
}

/// Mean over elements of the focal term on `p` for positives and `1 - p`
/// for negatives; `alpha` is `[negative, positive]`.
pub fn focal_binary(tape: &mut Tape, probs: Var, gold: &[bool], alpha: [f64; 2], gamma: f64, eps: f64) -> Result<Var> {
    let p = tape.value(probs);
    if gold.len() != p.len() {
        return Err(Error::shape(format!("focal: {} probabilities, {} labels", p.len(), gold.len())));
    }
    if gold.is_empty() {
        return Err(Error::shape("focal loss over zero elements"));
    }
    let n = gold.len() as f64;
    let mut total = 0.0;
    let mut dprob = Vec::with_capacity(gold.len());
    for (&x, &g) in p.data().iter().zip(gold) {
        let (pt, sign, a) = if g { (x, 1.0, alpha[1]) } else { (1.0 - x, -1.0, alpha[0]) };
        let (v, d) = focal_term(pt, a, gamma, eps);
        total += v;
        dprob.push(sign * d / n);
    }
    tape.focal_node(probs, total / n, dprob)
}

pub fn joint_loss(tape: &mut Tape, emotion: Var, cause: Var, pair: Var, cfg: &LossConfig) -> Result<Var> {
    let e = tape.scale(emotion, cfg.lambda_emotion)?;
    let c = tape.scale(cause, cfg.lambda_cause)?;
    let p = tape.scale(pair, cfg.lambda_pair)?;
    let s = tape.add(e, c)?;
    tape.add(s, p)
}

/// Resolved class weights for the three losses.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassWeights {
    pub emotion: Vec<f64>,
    pub cause: [f64; 2],
    pub pair: [f64; 2],
}

impl ClassWeights {
    pub fn uniform() -> Self {
        Self {
            emotion: vec![1.0; EmotionLabel::ALL.len()],
            cause: [1.0; 2],
            pair: [1.0; 2],
        }
    }

    /// Inverse class frequencies on `train`, normalized to mean one over the
    /// classes that occur; absent classes get weight one. Weights set in the
    /// config are used as given.
    pub fn estimate(train: &Dataset, cfg: &LossConfig) -> Self {
        let mut emotion = vec![0usize; EmotionLabel::ALL.len()];
        let mut cause = [0usize; 2];
        let mut pair = [0usize; 2];
        for conv in &train.conversations {
            for e in conv.emotions() {
                emotion[e.index()] += 1;
            }
            for c in conv.gold_cause_indicator() {
                cause[usize::from(c)] += 1;
            }
            for &c in conv.gold_pair_matrix().cells() {
                pair[usize::from(c)] += 1;
            }
        }
        Self {
            emotion: cfg.alpha_emotion.clone().unwrap_or_else(|| inverse_frequency(&emotion)),
            cause: cfg.alpha_cause.unwrap_or_else(|| inverse_frequency(&cause).try_into().expect("two classes")),
            pair: cfg.alpha_pair.unwrap_or_else(|| inverse_frequency(&pair).try_into().expect("two classes")),
        }
    }
}

fn inverse_frequency(counts: &[usize]) -> Vec<f64> {
    let seen: Vec<f64> = counts.iter().filter(|&&c| c > 0).map(|&c| 1.0 / c as f64).collect();
    if seen.is_empty() {
        return vec![1.0; counts.len()];
    }
    let mean = seen.iter().sum::<f64>() / seen.len() as f64;
    counts.iter().map(|&c| if c > 0 { 1.0 / c as f64 / mean } else { 1.0 }).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::numerics::{grad_check, Tensor};

    fn ce_multiclass(p: &Tensor, gold: &[usize]) -> f64 {
        gold.iter().enumerate().map(|(r, &g)| -p.get(r, g).ln()).sum::<f64>() / gold.len() as f64
    }

    fn random_probs(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
        let mut data = Vec::new();
        for _ in 0..n {
            let row: Vec<f64> = (0..c).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = row.iter().sum();
            data.extend(row.iter().map(|v| v / s));
        }
        Tensor::matrix(n, c, data).unwrap()
    }

    #[test]
    fn spot_values() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[[0.5, 0.25, 0.25]]));
        let l = focal_multiclass(&mut tape, p, &[0], &[1.0; 3], 0.0, 1e-7).unwrap();
        assert!((tape.value(l).item() - 0.693147).abs() < 1e-6);
        let l = focal_multiclass(&mut tape, p, &[0], &[1.0; 3], 2.0, 1e-7).unwrap();
        assert!((tape.value(l).item() - 0.173287).abs() < 1e-6);

        let half = tape.constant(Tensor::vector(vec![0.5]));
        for g in [true, false] {
            let l = focal_binary(&mut tape, half, &[g], [1.0, 1.0], 0.0, 1e-7).unwrap();
            assert!((tape.value(l).item() - 0.693147).abs() < 1e-6);
        }
        let p9 = tape.constant(Tensor::vector(vec![0.9]));
        let l = focal_binary(&mut tape, p9, &[false], [1.0, 1.0], 2.0, 1e-7).unwrap();
        // 0.9^2 * -ln(0.1) = 1.865094
        let closed = 0.81 * -(0.1f64).ln();
        assert!((tape.value(l).item() - closed).abs() < 1e-12);
        assert!((tape.value(l).item() - 1.865094).abs() < 1e-6);

        let sure = tape.constant(Tensor::vector(vec![1.0 - 1e-7]));
        let l = focal_binary(&mut tape, sure, &[true], [1.0, 1.0], 2.0, 1e-7).unwrap();
        assert!(tape.value(l).item() < 1e-12);
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::from_rows(&[[0.5, 0.5]]));
        assert!(matches!(focal_multiclass(&mut tape, p, &[2], &[1.0; 2], 2.0, 1e-7), Err(Error::Label(_))));
        assert!(matches!(focal_binary(&mut tape, p, &[true], [1.0; 2], 2.0, 1e-7), Err(Error::Shape(_))));
    }

    #[test]
    fn joint_examples() {
        let mut tape = Tape::new();
        let parts = [1.0, 2.0, 3.0].map(|v| tape.constant(Tensor::scalar(v)));
        let l = joint_loss(&mut tape, parts[0], parts[1], parts[2], &LossConfig::default()).unwrap();
        assert_eq!(tape.value(l).item(), 6.0);
        let only_e = LossConfig {
            lambda_cause: 0.0,
            lambda_pair: 0.0,
            ..LossConfig::default()
        };
        let l = joint_loss(&mut tape, parts[0], parts[1], parts[2], &only_e).unwrap();
        assert_eq!(tape.value(l).item(), 1.0);
        let mixed = LossConfig {
            lambda_emotion: 0.5,
            lambda_cause: 0.5,
            ..LossConfig::default()
        };
        let parts = [2.0, 2.0, 1.0].map(|v| tape.constant(Tensor::scalar(v)));
        let l = joint_loss(&mut tape, parts[0], parts[1], parts[2], &mixed).unwrap();
        assert_eq!(tape.value(l).item(), 3.0);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for gamma in [0.0, 0.5, 2.0] {
            let logits = Tensor::matrix(3, 4, (0..12).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
            let r = grad_check(
                |t, x| {
                    let p = t.softmax_rows(x, None)?;
                    focal_multiclass(t, p, &[0, 3, 1], &[1.0, 0.5, 2.0, 1.5], gamma, 1e-7)
                },
                &logits,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "gamma {gamma}: {}", r.max_rel_error);
            let x = Tensor::vector((0..6).map(|_| rng.random_range(-3.0..3.0)).collect());
            let r = grad_check(
                |t, x| {
                    let p = t.sigmoid(x)?;
                    focal_binary(t, p, &[true, false, false, true, true, false], [0.3, 2.0], gamma, 1e-7)
                },
                &x,
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(r.passed, "gamma {gamma}: {}", r.max_rel_error);
        }
    }

    #[test]
    fn inverse_frequency_weights() {
        assert_eq!(inverse_frequency(&[1, 1]), vec![1.0, 1.0]);
        let w = inverse_frequency(&[10, 30, 0]);
        assert!((w[0] - 1.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
        assert_eq!(w[2], 1.0);
        assert_eq!(inverse_frequency(&[0, 0]), vec![1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn gamma_zero_is_cross_entropy(seed in 0u64..10_000, n in 1usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = random_probs(&mut rng, n, 7);
            let gold: Vec<usize> = (0..n).map(|_| rng.random_range(0..7)).collect();
            let mut tape = Tape::new();
            let v = tape.constant(p.clone());
            let l = focal_multiclass(&mut tape, v, &gold, &[1.0; 7], 0.0, 1e-7).unwrap();
            prop_assert!((tape.value(l).item() - ce_multiclass(&p, &gold)).abs() < 1e-12);
        }

        #[test]
        fn non_negative_and_decreasing(p in 0.001f64..0.998, dp in 0.0005f64..0.001, gamma in 0.0f64..4.0) {
            let mut tape = Tape::new();
            let lo = tape.constant(Tensor::from_rows(&[[p, 1.0 - p]]));
            let hi = tape.constant(Tensor::from_rows(&[[p + dp, 1.0 - p - dp]]));
            let a = focal_multiclass(&mut tape, lo, &[0], &[1.0; 2], gamma, 1e-7).unwrap();
            let b = focal_multiclass(&mut tape, hi, &[0], &[1.0; 2], gamma, 1e-7).unwrap();
            let (a, b) = (tape.value(a).item(), tape.value(b).item());
            prop_assert!(b >= 0.0);
            prop_assert!(b < a);
        }
    }
}
