//! Model, loss and training configuration.
//!
//! Configuration files are flat JSON objects with dotted keys such as
//! `"model.d_h"` or `"train.lr"`; every key is optional and falls back to
//! the defaults below.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::data::{FeatureDims, Modality};
use crate::error::{Error, Result};
use crate::numerics::Precision;

/// Which modalities take part. Text is always present.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ModalitySet {
    pub audio: bool,
    pub video: bool,
}

impl ModalitySet {
    pub const ALL: ModalitySet = ModalitySet { audio: true, video: true };
    pub const TEXT: ModalitySet = ModalitySet { audio: false, video: false };

    pub fn contains(&self, m: Modality) -> bool {
        match m {
            Modality::Text => true,
            Modality::Audio => self.audio,
            Modality::Video => self.video,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = Modality> + '_ {
        Modality::ALL.into_iter().filter(|m| self.contains(*m))
    }
}

impl Default for ModalitySet {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for ModalitySet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("t")?;
        if self.audio {
            f.write_str("a")?;
        }
        if self.video {
            f.write_str("v")?;
        }
        Ok(())
    }
}

impl FromStr for ModalitySet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s: String = s.chars().filter(|c| c.is_ascii_alphabetic()).collect::<String>().to_ascii_lowercase();
        if !s.contains('t') {
            return Err(Error::Config(format!("modality selection `{s}` must include text")));
        }
        if let Some(c) = s.chars().find(|c| !"tav".contains(*c)) {
            return Err(Error::Config(format!("unknown modality `{c}`")));
        }
        Ok(Self {
            audio: s.contains('a'),
            video: s.contains('v'),
        })
    }
}

impl Serialize for ModalitySet {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ModalitySet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_context_nodes: bool,
    pub use_inter: bool,
    pub use_intra: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self {
            use_context_nodes: true,
            use_inter: true,
            use_intra: true,
        }
    }
}

/// Gaussian radial-basis encoding of the signed offset `emotion - cause`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RpeConfig {
    pub centers: Vec<f64>,
    pub sigma: f64,
    /// Offsets are clipped to `[-clip, clip]` before the kernel.
    pub clip: f64,
}

impl Default for RpeConfig {
    fn default() -> Self {
        Self {
            centers: (-4..=4).map(f64::from).collect(),
            sigma: 1.0,
            clip: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_t: usize,
    pub d_a: usize,
    pub d_v: usize,
    pub d_h: usize,
    /// Width of the semantic-attention projection.
    pub d_s: usize,
    pub heads: usize,
    /// Number of fusion iterations.
    pub fusion_layers: usize,
    /// Same-speaker context window.
    pub k: usize,
    pub rpe: RpeConfig,
    /// Pair decision threshold.
    pub tau: f64,
    pub precision: Precision,
    pub ablation: Ablation,
    pub modalities: ModalitySet,
    /// Separate fusion parameters per iteration instead of sharing one set.
    pub per_iteration_params: bool,
    /// Dropout rate after each PFFN during training.
    pub dropout: f64,
    /// Additionally require the cause indicator above `tau` when decoding.
    pub gate_decoding_with_cause: bool,
    pub leaky_slope: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_t: 16,
            d_a: 16,
            d_v: 16,
            d_h: 64,
            d_s: 64,
            heads: 4,
            fusion_layers: 2,
            k: 3,
            rpe: RpeConfig::default(),
            tau: 0.5,
            precision: Precision::F64,
            ablation: Ablation::default(),
            modalities: ModalitySet::ALL,
            per_iteration_params: false,
            dropout: 0.0,
            gate_decoding_with_cause: false,
            leaky_slope: 0.2,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn feature_dims(&self) -> FeatureDims {
        FeatureDims {
            text: self.d_t,
            audio: self.d_a,
            video: self.d_v,
        }
    }

    pub fn d_p(&self) -> usize {
        self.rpe.centers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_t", self.d_t),
            ("d_a", self.d_a),
            ("d_v", self.d_v),
            ("d_h", self.d_h),
            ("d_s", self.d_s),
            ("heads", self.heads),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be at least 1")));
        }
        if !self.d_t.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model.d_t ({}) must be divisible by model.heads ({})",
                self.d_t, self.heads
            )));
        }
        if !(1..=8).contains(&self.fusion_layers) {
            return Err(Error::Config(format!("model.fusion_layers must be in 1..=8, got {}", self.fusion_layers)));
        }
        if self.k == 0 {
            return Err(Error::Config("model.k must be at least 1".into()));
        }
        if self.rpe.centers.is_empty() {
            return Err(Error::Config("model.rpe.centers must not be empty".into()));
        }
        if self.rpe.centers.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("model.rpe.centers must be strictly increasing".into()));
        }
        if !(self.rpe.sigma > 0.0) {
            return Err(Error::Config("model.rpe.sigma must be positive".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("model.tau must be in (0, 1), got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("model.dropout must be in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Focal-loss settings. Unset class weights are estimated from the training
/// split as inverse frequencies normalized to mean one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gamma: f64,
    pub alpha_emotion: Option<Vec<f64>>,
    /// `[negative, positive]`.
    pub alpha_cause: Option<[f64; 2]>,
    /// `[negative, positive]`.
    pub alpha_pair: Option<[f64; 2]>,
    pub lambda_emotion: f64,
    pub lambda_cause: f64,
    pub lambda_pair: f64,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha_emotion: None,
            alpha_cause: None,
            alpha_pair: None,
            lambda_emotion: 1.0,
            lambda_cause: 1.0,
            lambda_pair: 1.0,
            eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config("loss.gamma must be non-negative".into()));
        }
        let mut weights = vec![self.lambda_emotion, self.lambda_cause, self.lambda_pair];
        if let Some(a) = &self.alpha_emotion {
            if a.len() != 7 {
                return Err(Error::Config(format!("loss.alpha_emotion needs 7 weights, got {}", a.len())));
            }
            weights.extend(a);
        }
        weights.extend(self.alpha_cause.iter().flatten());
        weights.extend(self.alpha_pair.iter().flatten());
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Config("loss.eps must be in (0, 0.5)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Conversations per mini-batch.
    pub batch_size: usize,
    /// Mini-batches per optimizer step.
    pub accumulation_steps: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Validation metric used to keep the best checkpoint (`val_6avg` or `val_4avg`).
    pub selection_metric: String,
}

impl TrainConfig {
    /// Settings used for fine-tuning large pretrained encoders.
    pub fn paper() -> Self {
        Self {
            lr: 5e-6,
            batch_size: 16,
            accumulation_steps: 2,
            epochs: 50,
            ..Self::synthetic()
        }
    }

    /// Settings for small models trained from scratch on synthetic data.
    pub fn synthetic() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            accumulation_steps: 1,
            epochs: 200,
            seed: 42,
            selection_metric: "val_6avg".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::Config("train.lr must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("train.beta1 and train.beta2 must be in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.accumulation_steps == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "train.batch_size, train.accumulation_steps and train.epochs must be at least 1".into(),
            ));
        }
        if !matches!(self.selection_metric.as_str(), "val_6avg" | "val_4avg") {
            return Err(Error::Config(format!("unknown selection metric `{}`", self.selection_metric)));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::synthetic()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()
    }

    /// Every setting as a flat map of dotted keys.
    pub fn to_flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    /// Applies dotted-key settings on top of `self`.
    pub fn apply_flat(&self, settings: &Map<String, Value>) -> Result<Self> {
        let mut tree = serde_json::to_value(self).expect("config serializes");
        for (key, value) in settings {
            set_dotted(&mut tree, key, value.clone())?;
        }
        let cfg: Config = serde_json::from_value(tree).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one `key=value` override; the value is parsed as JSON when
    /// possible and taken as a string otherwise.
    pub fn apply_override(&self, assignment: &str) -> Result<Self> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut m = Map::new();
        m.insert(key.trim().to_string(), value);
        self.apply_flat(&m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text)?;
        let map = value
            .as_object()
            .ok_or_else(|| Error::Config("config file must hold a JSON object".into()))?;
        let mut flat = Map::new();
        flatten("", &Value::Object(map.clone()), &mut flat);
        Config::default().apply_flat(&flat)
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Map<String, Value>) {
    match v {
        Value::Object(m) if !m.is_empty() => {
            for (k, child) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        _ => {
            out.insert(prefix.to_string(), v.clone());
        }
    }
}

fn set_dotted(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        if !obj.contains_key(*part) {
            return Err(Error::Config(format!("unknown config key `{key}`")));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.get_mut(*part).expect("checked above");
    }
    unreachable!("split yields at least one part")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        Config::default().validate().unwrap();
        let p = TrainConfig::paper();
        assert_eq!((p.batch_size, p.lr, p.epochs, p.accumulation_steps), (16, 5e-6, 50, 2));
    }

    #[test]
    fn flat_round_trip() {
        let cfg = Config::default();
        let flat = cfg.to_flat();
        assert_eq!(flat["model.d_h"], 64);
        assert_eq!(flat["model.ablation.use_intra"], true);
        assert_eq!(flat["model.modalities"], "tav");
        assert_eq!(cfg.apply_flat(&flat).unwrap(), cfg);
    }

    #[test]
    fn overrides() {
        let cfg = Config::default()
            .apply_override("model.k=1")
            .unwrap()
            .apply_override("model.modalities=ta")
            .unwrap()
            .apply_override("model.ablation.use_inter=false")
            .unwrap();
        assert_eq!(cfg.model.k, 1);
        assert_eq!(cfg.model.modalities, ModalitySet { audio: true, video: false });
        assert!(!cfg.model.ablation.use_inter);
        assert!(matches!(Config::default().apply_override("model.nope=1"), Err(Error::Config(_))));
        assert!(matches!(Config::default().apply_override("model.k=0"), Err(Error::Config(_))));
        assert!(matches!(Config::default().apply_override("model.modalities=av"), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_bad_model_settings() {
        let mut m = ModelConfig::default();
        m.heads = 3;
        assert!(m.validate().is_err());
        let mut m = ModelConfig::default();
        m.rpe.centers = vec![0.0, 0.0];
        assert!(m.validate().is_err());
        let mut m = ModelConfig::default();
        m.tau = 1.0;
        assert!(m.validate().is_err());
    }
}
