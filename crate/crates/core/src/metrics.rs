//! Triplet-level weighted F1 and the utterance/pair subtask scores.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{Conversation, Dataset, EmotionLabel, PairMatrix, Triplet};
use crate::error::{Error, Result};

/// The four emotions kept by the reduced average.
pub const FOUR_EMOTIONS: [EmotionLabel; 4] = [
    EmotionLabel::Anger,
    EmotionLabel::Joy,
    EmotionLabel::Sadness,
    EmotionLabel::Surprise,
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub pred: usize,
    pub matched: usize,
}

impl Prf {
    pub fn from_counts(gold: usize, pred: usize, matched: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(matched, pred);
        let recall = ratio(matched, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            gold,
            pred,
            matched,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmotionScore {
    pub emotion: EmotionLabel,
    #[serde(flatten)]
    pub score: Prf,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TripletReport {
    pub per_emotion: Vec<EmotionScore>,
    #[serde(rename = "6_avg")]
    pub avg6: f64,
    #[serde(rename = "4_avg")]
    pub avg4: f64,
    /// Pooled over all emotions.
    pub micro: Prf,
}

impl TripletReport {
    pub fn emotion(&self, e: EmotionLabel) -> &Prf {
        &self.per_emotion.iter().find(|s| s.emotion == e).expect("all six emotions are scored").score
    }
}

/// Support-weighted mean of F1 over `labels`; zero when nothing is supported.
pub fn weighted_f1(scores: &[EmotionScore], labels: &[EmotionLabel]) -> f64 {
    let (mut num, mut den) = (0.0, 0usize);
    for s in scores.iter().filter(|s| labels.contains(&s.emotion)) {
        num += s.score.gold as f64 * s.score.f1;
        den += s.score.gold;
    }
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

/// Scores predicted triplets against gold, conversation by conversation.
/// Duplicate predictions count once.
pub fn triplet_f1(gold: &[Vec<Triplet>], pred: &[Vec<Triplet>]) -> Result<TripletReport> {
    if gold.len() != pred.len() {
        return Err(Error::Input(format!("{} gold conversations but {} predicted", gold.len(), pred.len())));
    }
    let k = EmotionLabel::ALL.len();
    let (mut g, mut p, mut m) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (gc, pc) in gold.iter().zip(pred) {
        let gs: BTreeSet<_> = gc.iter().map(Triplet::key).collect();
        let ps: BTreeSet<_> = pc.iter().map(Triplet::key).collect();
        for t in &gs {
            g[t.2.index()] += 1;
        }
        for t in &ps {
            p[t.2.index()] += 1;
            if gs.contains(t) {
                m[t.2.index()] += 1;
            }
        }
    }
    let per_emotion: Vec<EmotionScore> = EmotionLabel::EMOTIONS
        .iter()
        .map(|&e| EmotionScore {
            emotion: e,
            score: Prf::from_counts(g[e.index()], p[e.index()], m[e.index()]),
        })
        .collect();
    let sum = |v: &[usize]| EmotionLabel::EMOTIONS.iter().map(|e| v[e.index()]).sum::<usize>();
    Ok(TripletReport {
        avg6: weighted_f1(&per_emotion, &EmotionLabel::EMOTIONS),
        avg4: weighted_f1(&per_emotion, &FOUR_EMOTIONS),
        micro: Prf::from_counts(sum(&g), sum(&p), sum(&m)),
        per_emotion,
    })
}

/// Utterance- and pair-level predictions for one conversation.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictedLabels {
    pub emotions: Vec<EmotionLabel>,
    pub causes: Vec<bool>,
    pub pairs: PairMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubtaskReport {
    /// Emotion present vs neutral.
    pub ep: Prf,
    /// Weighted F1 over the six emotions on gold-emotional utterances.
    pub er: f64,
    pub er_per_emotion: Vec<EmotionScore>,
    /// Cause indicator.
    pub ce: Prf,
    /// Ordered cause/emotion pairs.
    pub ec: Prf,
}

pub fn subtask_metrics(gold: &[Conversation], pred: &[PredictedLabels]) -> Result<SubtaskReport> {
    if gold.len() != pred.len() {
        return Err(Error::Input(format!("{} gold conversations but {} predicted", gold.len(), pred.len())));
    }
    let mut ep = [0usize; 3];
    let mut ce = [0usize; 3];
    let mut ec = [0usize; 3];
    let k = EmotionLabel::ALL.len();
    let (mut eg, mut epd, mut em) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    let tally = |acc: &mut [usize; 3], g: bool, p: bool| {
        acc[0] += usize::from(g);
        acc[1] += usize::from(p);
        acc[2] += usize::from(g && p);
    };
    for (conv, pl) in gold.iter().zip(pred) {
        let n = conv.len();
        if pl.emotions.len() != n || pl.causes.len() != n || pl.pairs.n() != n {
            return Err(Error::Input(format!("prediction for conversation {} does not cover its {n} utterances", conv.id)));
        }
        for (u, &pe) in conv.utterances.iter().zip(&pl.emotions) {
            tally(&mut ep, !u.emotion.is_neutral(), !pe.is_neutral());
            if !u.emotion.is_neutral() {
                eg[u.emotion.index()] += 1;
                epd[pe.index()] += 1;
                if pe == u.emotion {
                    em[pe.index()] += 1;
                }
            }
        }
        for (&g, &p) in conv.gold_cause_indicator().iter().zip(&pl.causes) {
            tally(&mut ce, g, p);
        }
        for (&g, &p) in conv.gold_pair_matrix().cells().iter().zip(pl.pairs.cells()) {
            tally(&mut ec, g, p);
        }
    }
    let prf = |a: [usize; 3]| Prf::from_counts(a[0], a[1], a[2]);
    let er_per_emotion: Vec<EmotionScore> = EmotionLabel::EMOTIONS
        .iter()
        .map(|&e| EmotionScore {
            emotion: e,
            score: Prf::from_counts(eg[e.index()], epd[e.index()], em[e.index()]),
        })
        .collect();
    Ok(SubtaskReport {
        ep: prf(ep),
        er: weighted_f1(&er_per_emotion, &EmotionLabel::EMOTIONS),
        er_per_emotion,
        ce: prf(ce),
        ec: prf(ec),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub triplet: TripletReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subtasks: Option<SubtaskReport>,
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let t = &self.triplet;
        let _ = writeln!(s, "{:<10} {:>9} {:>9} {:>9} {:>6} {:>6} {:>6}", "emotion", "precision", "recall", "f1", "gold", "pred", "match");
        let mut row = |name: &str, p: &Prf| {
            let _ = writeln!(
                s,
                "{:<10} {:>9.4} {:>9.4} {:>9.4} {:>6} {:>6} {:>6}",
                name, p.precision, p.recall, p.f1, p.gold, p.pred, p.matched
            );
        };
        for e in &t.per_emotion {
            row(e.emotion.as_str(), &e.score);
        }
        row("micro", &t.micro);
        let _ = writeln!(s, "6 Avg  {:.4}", t.avg6);
        let _ = writeln!(s, "4 Avg  {:.4}", t.avg4);
        if let Some(st) = &self.subtasks {
            let _ = writeln!(s, "EP  p={:.4} r={:.4} f1={:.4}", st.ep.precision, st.ep.recall, st.ep.f1);
            let _ = writeln!(s, "ER  weighted f1={:.4}", st.er);
            let _ = writeln!(s, "CE  p={:.4} r={:.4} f1={:.4}", st.ce.precision, st.ce.recall, st.ce.f1);
            let _ = writeln!(s, "EC  p={:.4} r={:.4} f1={:.4}", st.ec.precision, st.ec.recall, st.ec.f1);
        }
        s
    }
}

/// Majority non-neutral emotion of a split (ties to the earlier label).
pub fn majority_emotion(train: &Dataset) -> EmotionLabel {
    let mut counts = [0usize; 7];
    for c in &train.conversations {
        for e in c.emotions() {
            counts[e.index()] += 1;
        }
    }
    let mut best = EmotionLabel::EMOTIONS[0];
    for e in EmotionLabel::EMOTIONS {
        if counts[e.index()] > counts[best.index()] {
            best = e;
        }
    }
    best
}

/// Position-prior baseline: on every gold-emotional utterance `j`, predict
/// the majority training emotion caused by utterance `max(j - 1, 1)`.
pub fn position_prior(majority: EmotionLabel, test: &Dataset) -> Vec<Vec<Triplet>> {
    test.conversations
        .iter()
        .map(|c| {
            c.utterances
                .iter()
                .filter(|u| !u.emotion.is_neutral())
                .map(|u| Triplet::new(u.index, u.index.saturating_sub(1).max(1), majority))
                .collect()
        })
        .collect()
}
