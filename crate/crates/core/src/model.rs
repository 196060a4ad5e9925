//! The full network: encoders, graph fusion and heads over one parameter
//! store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{LossConfig, ModelConfig};
use crate::data::{Conversation, EmotionLabel, Modality, PairMatrix, Triplet};
use crate::encoders::EncoderParams;
use crate::error::Result;
use crate::fusion::{fuse, Dropout, FusionParams, IterationTrace};
use crate::graph::{init_node_states, HeteroGraph};
use crate::heads::{argmax, decode_triplets, HeadOutput, HeadParams};
use crate::metrics::PredictedLabels;
use crate::numerics::{grad_check_params, GradCheckReport, ParamId, ParamStore, Tape, Tensor, Var};
use crate::objective::{focal_binary, focal_multiclass, joint_loss, ClassWeights};
use crate::synth::{generate, SynthConfig};

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoders: EncoderParams,
    pub fusion: FusionParams,
    pub heads: HeadParams,
}

/// Head outputs on a tape plus the fusion trace, if one was requested.
pub struct Forward {
    pub heads: HeadOutput,
    pub trace: Option<Vec<IterationTrace>>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Prediction {
    pub conversation: String,
    pub triplets: Vec<Triplet>,
    /// `n x 7` emotion probabilities.
    #[serde(skip)]
    pub emotion_probs: Tensor,
    #[serde(skip)]
    pub cause_probs: Vec<f64>,
    /// Pair probabilities, row-major with row = cause.
    #[serde(skip)]
    pub pair_probs: Tensor,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub attention: Option<Vec<IterationTrace>>,
}

impl Prediction {
    pub fn emotions(&self) -> Vec<EmotionLabel> {
        (0..self.emotion_probs.rows())
            .map(|r| EmotionLabel::from_index(argmax(self.emotion_probs.row(r))).expect("seven classes"))
            .collect()
    }

    /// Thresholded utterance and pair decisions for the subtask metrics.
    pub fn labels(&self, tau: f64) -> PredictedLabels {
        let n = self.cause_probs.len();
        let mut pairs = PairMatrix::new(n);
        for i in 1..=n {
            for j in 1..=n {
                pairs.set(i, j, self.pair_probs.data()[(i - 1) * n + j - 1] > tau);
            }
        }
        PredictedLabels {
            emotions: self.emotions(),
            causes: self.cause_probs.iter().map(|&p| p > tau).collect(),
            pairs,
        }
    }
}

impl Model {
    /// Fresh parameters drawn from `seed`: Glorot-uniform weights, zero
    /// biases, unit layer-norm gains, identity meta-path transforms.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoders = EncoderParams::new(&mut store, config, &mut rng)?;
        let fusion = FusionParams::new(&mut store, config, &mut rng)?;
        let heads = HeadParams::new(&mut store, config, &mut rng);
        Ok(Self {
            config: config.clone(),
            store,
            encoders,
            fusion,
            heads,
        })
    }

    pub fn tape(&self) -> Tape {
        Tape::with_precision(self.config.precision)
    }

    /// Forward pass reading parameters from `store`, which must have the
    /// layout of `self.store` (used by finite-difference checks).
    pub fn forward_with(&self, tape: &mut Tape, store: &ParamStore, conv: &Conversation, record: bool) -> Result<Forward> {
        self.forward_inner(tape, store, conv, record, None)
    }

    fn forward_inner(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        conv: &Conversation,
        record: bool,
        dropout: Option<Dropout>,
    ) -> Result<Forward> {
        conv.validate(Some(&self.config.feature_dims()))?;
        let graph = HeteroGraph::for_conversation(conv, self.config.k)?;
        let mut feats = Vec::with_capacity(3);
        for m in Modality::ALL {
            feats.push(tape.constant(conv.feature_matrix(m)?));
        }
        let projected = self.encoders.forward(tape, store, [feats[0], feats[1], feats[2]])?;
        let init = init_node_states(tape, &graph, projected)?;
        let fused = fuse(tape, store, &self.fusion, &graph, init, &self.config, record, dropout)?;
        let heads = self.heads.forward(tape, store, fused.z_e, fused.z_c)?;
        Ok(Forward { heads, trace: fused.trace })
    }

    pub fn forward(&self, tape: &mut Tape, conv: &Conversation) -> Result<Forward> {
        self.forward_with(tape, &self.store, conv, false)
    }

    /// Joint focal loss of one conversation. `dropout_seed` switches on the
    /// configured dropout with masks drawn from that seed.
    pub fn loss_with(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        conv: &Conversation,
        weights: &ClassWeights,
        cfg: &LossConfig,
        dropout_seed: Option<u64>,
    ) -> Result<Var> {
        let dropout = dropout_seed
            .filter(|_| self.config.dropout > 0.0)
            .map(|seed| Dropout {
                rate: self.config.dropout,
                seed,
            });
        let f = self.forward_inner(tape, store, conv, false, dropout)?;
        let gold: Vec<usize> = conv.emotions().iter().map(|e| e.index()).collect();
        let le = focal_multiclass(tape, f.heads.emotion, &gold, &weights.emotion, cfg.gamma, cfg.eps)?;
        let lc = focal_binary(tape, f.heads.cause, &conv.gold_cause_indicator(), weights.cause, cfg.gamma, cfg.eps)?;
        let lp = focal_binary(tape, f.heads.pair, conv.gold_pair_matrix().cells(), weights.pair, cfg.gamma, cfg.eps)?;
        joint_loss(tape, le, lc, lp, cfg)
    }

    pub fn predict(&self, conv: &Conversation, record_attention: bool) -> Result<Prediction> {
        let mut tape = self.tape();
        let f = self.forward_with(&mut tape, &self.store, conv, record_attention)?;
        let emotion_probs = tape.value(f.heads.emotion).clone();
        let cause_probs = tape.value(f.heads.cause).data().to_vec();
        let pair_probs = tape.value(f.heads.pair).clone();
        let gate = self.config.gate_decoding_with_cause.then_some(cause_probs.as_slice());
        let triplets = decode_triplets(&emotion_probs, &pair_probs, self.config.tau, gate);
        Ok(Prediction {
            conversation: conv.id.clone(),
            triplets,
            emotion_probs,
            cause_probs,
            pair_probs,
            attention: f.trace,
        })
    }
}

/// Central-difference check of the joint loss gradient at `coords` distinct
/// parameter scalars drawn uniformly, on a synthetic conversation of `n`
/// utterances. Model, conversation and coordinates all derive from `seed`.
pub fn loss_grad_check(cfg: &ModelConfig, seed: u64, n: usize, coords: usize, h: f64, tol: f64) -> Result<GradCheckReport> {
    let model = Model::new(cfg, seed)?;
    let data = generate(&SynthConfig {
        conversations: 1,
        n_range: (n, n),
        dims: cfg.feature_dims(),
        seed,
        ..SynthConfig::default()
    })?;
    let conv = &data.conversations[0];
    let loss_cfg = LossConfig::default();
    let weights = ClassWeights::estimate(&data, &loss_cfg);

    let total = model.store.scalar_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut flat = rand::seq::index::sample(&mut rng, total, coords.min(total)).into_vec();
    flat.sort_unstable();
    let mut picked = Vec::with_capacity(flat.len());
    let (mut start, mut ids) = (0, model.store.ids().peekable());
    for f in flat {
        while let Some(&id) = ids.peek() {
            let len = model.store.get(id).len();
            if f < start + len {
                break;
            }
            start += len;
            ids.next();
        }
        let id: ParamId = *ids.peek().expect("index below the scalar count");
        picked.push((id, f - start));
    }
    grad_check_params(&model.store, &picked, h, tol, |tape, store| {
        model.loss_with(tape, store, conv, &weights, &loss_cfg, None)
    })
}
