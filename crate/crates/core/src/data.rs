//! Conversations, labels and the JSON Lines dataset format.
//!
//! Utterance indices are 1-based everywhere in this module; array code
//! converts at the boundary.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmotionLabel {
    Anger,
    Disgust,
    Fear,
    Joy,
    Sadness,
    Surprise,
    Neutral,
}

impl EmotionLabel {
    /// Fixed class order; also the tie-break order for argmax decoding.
    pub const ALL: [EmotionLabel; 7] = [
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Fear,
        EmotionLabel::Joy,
        EmotionLabel::Sadness,
        EmotionLabel::Surprise,
        EmotionLabel::Neutral,
    ];

    /// The six triplet emotions.
    pub const EMOTIONS: [EmotionLabel; 6] = [
        EmotionLabel::Anger,
        EmotionLabel::Disgust,
        EmotionLabel::Fear,
        EmotionLabel::Joy,
        EmotionLabel::Sadness,
        EmotionLabel::Surprise,
    ];

    pub const COUNT: usize = 7;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn is_neutral(self) -> bool {
        self == EmotionLabel::Neutral
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EmotionLabel::Anger => "anger",
            EmotionLabel::Disgust => "disgust",
            EmotionLabel::Fear => "fear",
            EmotionLabel::Joy => "joy",
            EmotionLabel::Sadness => "sadness",
            EmotionLabel::Surprise => "surprise",
            EmotionLabel::Neutral => "neutral",
        }
    }
}

impl fmt::Display for EmotionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmotionLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|e| e.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Label(format!("unknown emotion `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "t")]
    Text,
    #[serde(rename = "a")]
    Audio,
    #[serde(rename = "v")]
    Video,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Text, Modality::Audio, Modality::Video];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn key(self) -> &'static str {
        match self {
            Modality::Text => "t",
            Modality::Audio => "a",
            Modality::Video => "v",
        }
    }
}

/// Expected feature widths per modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureDims {
    pub text: usize,
    pub audio: usize,
    pub video: usize,
}

impl FeatureDims {
    pub fn get(&self, m: Modality) -> usize {
        match m {
            Modality::Text => self.text,
            Modality::Audio => self.audio,
            Modality::Video => self.video,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub index: usize,
    pub speaker: String,
    pub text: Option<String>,
    pub features: [Vec<f64>; 3],
    pub emotion: EmotionLabel,
    pub cause_indices: BTreeSet<usize>,
}

impl Utterance {
    pub fn feature(&self, m: Modality) -> &[f64] {
        &self.features[m.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conversation {
    pub id: String,
    pub utterances: Vec<Utterance>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Triplet {
    pub emotion_utt: usize,
    pub cause_utt: usize,
    pub emotion: EmotionLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl Triplet {
    pub fn new(emotion_utt: usize, cause_utt: usize, emotion: EmotionLabel) -> Self {
        Self {
            emotion_utt,
            cause_utt,
            emotion,
            score: None,
        }
    }

    /// Identity used for matching, ignoring the score.
    pub fn key(&self) -> (usize, usize, EmotionLabel) {
        (self.emotion_utt, self.cause_utt, self.emotion)
    }
}

/// `n x n` boolean matrix addressed as `(cause, emotion)` with 1-based indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairMatrix {
    n: usize,
    cells: Vec<bool>,
}

impl PairMatrix {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            cells: vec![false; n * n],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, cause: usize, emotion: usize) -> bool {
        self.cells[(cause - 1) * self.n + emotion - 1]
    }

    pub fn set(&mut self, cause: usize, emotion: usize, v: bool) {
        self.cells[(cause - 1) * self.n + emotion - 1] = v;
    }

    /// Row-major cells, row = cause.
    pub fn cells(&self) -> &[bool] {
        &self.cells
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub conversations: Vec<Conversation>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn utterance(&self, index: usize) -> &Utterance {
        &self.utterances[index - 1]
    }

    /// Checks every structural invariant; `dims` additionally pins feature widths.
    pub fn validate(&self, dims: Option<&FeatureDims>) -> Result<()> {
        let n = self.utterances.len();
        if n == 0 {
            return Err(Error::Validation(format!("conversation `{}` has no utterances", self.id)));
        }
        for (pos, u) in self.utterances.iter().enumerate() {
            if u.index != pos + 1 {
                return Err(Error::Validation(format!(
                    "conversation `{}`: utterance at position {} has index {}",
                    self.id,
                    pos + 1,
                    u.index
                )));
            }
            if let Some(dims) = dims {
                for m in Modality::ALL {
                    let (expected, actual) = (dims.get(m), u.feature(m).len());
                    if expected != actual {
                        return Err(Error::Dimension {
                            context: format!("conversation `{}` utterance {} feat.{}", self.id, u.index, m.key()),
                            expected,
                            actual,
                        });
                    }
                }
            }
            if u.features.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "conversation `{}` utterance {}: non-finite feature value",
                    self.id, u.index
                )));
            }
            if u.emotion.is_neutral() != u.cause_indices.is_empty() {
                return Err(Error::Validation(format!(
                    "conversation `{}` utterance {}: causes must be empty exactly when the emotion is neutral",
                    self.id, u.index
                )));
            }
            if let Some(&bad) = u.cause_indices.iter().find(|&&c| c == 0 || c > n) {
                return Err(Error::Validation(format!(
                    "conversation `{}` utterance {}: cause index {bad} outside 1..={n}",
                    self.id, u.index
                )));
            }
        }
        Ok(())
    }

    /// Entry `(i, j)` is set iff utterance `i` is a cause of utterance `j`.
    pub fn gold_pair_matrix(&self) -> PairMatrix {
        let mut m = PairMatrix::new(self.len());
        for u in &self.utterances {
            for &c in &u.cause_indices {
                m.set(c, u.index, true);
            }
        }
        m
    }

    /// Position `i - 1` is set iff utterance `i` causes any emotion.
    pub fn gold_cause_indicator(&self) -> Vec<bool> {
        let mut v = vec![false; self.len()];
        for u in &self.utterances {
            for &c in &u.cause_indices {
                v[c - 1] = true;
            }
        }
        v
    }

    pub fn gold_triplets(&self) -> Vec<Triplet> {
        let mut out = Vec::new();
        for u in &self.utterances {
            for &c in &u.cause_indices {
                out.push(Triplet::new(u.index, c, u.emotion));
            }
        }
        out
    }

    pub fn emotions(&self) -> Vec<EmotionLabel> {
        self.utterances.iter().map(|u| u.emotion).collect()
    }

    /// Stacks one modality's features into an `n x d` matrix.
    pub fn feature_matrix(&self, m: Modality) -> Result<Tensor> {
        let d = self.utterances[0].feature(m).len();
        let mut data = Vec::with_capacity(self.len() * d);
        for u in &self.utterances {
            data.extend_from_slice(u.feature(m));
        }
        Tensor::matrix(self.len(), d, data)
    }

    pub fn speakers(&self) -> Vec<&str> {
        self.utterances.iter().map(|u| u.speaker.as_str()).collect()
    }

    pub fn to_json(&self) -> Value {
        let utterances: Vec<Value> = self
            .utterances
            .iter()
            .map(|u| {
                json!({
                    "index": u.index,
                    "speaker": u.speaker,
                    "text": u.text,
                    "emotion": u.emotion.as_str(),
                    "causes": u.cause_indices.iter().collect::<Vec<_>>(),
                    "feat": {
                        "t": u.features[0],
                        "a": u.features[1],
                        "v": u.features[2],
                    },
                })
            })
            .collect();
        json!({ "id": self.id, "utterances": utterances })
    }
}

impl Dataset {
    pub fn new(split: Split, conversations: Vec<Conversation>) -> Self {
        Self { split, conversations }
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    pub fn validate(&self, dims: Option<&FeatureDims>) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.conversations {
            if !seen.insert(c.id.as_str()) {
                return Err(Error::Validation(format!("duplicate conversation id `{}`", c.id)));
            }
            c.validate(dims)?;
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&Conversation> {
        self.conversations.iter().find(|c| c.id == id)
    }

    /// One JSON object per line, features inline.
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for c in &self.conversations {
            s.push_str(&c.to_json().to_string());
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Reads a dataset file. The split is taken from the file stem
/// (`train`, `val`/`dev`, `test`), defaulting to train. Feature widths are
/// checked only when `dims` is given.
pub fn parse_dataset(path: impl AsRef<Path>, dims: Option<&FeatureDims>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut ds = parse_jsonl(&text, &base, dims)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("").to_ascii_lowercase();
    ds.split = if stem.contains("test") {
        Split::Test
    } else if stem.contains("val") || stem.contains("dev") {
        Split::Val
    } else {
        Split::Train
    };
    Ok(ds)
}

/// Parses dataset text; `feat_ref` file paths resolve against `base_dir`.
pub fn parse_jsonl(text: &str, base_dir: &Path, dims: Option<&FeatureDims>) -> Result<Dataset> {
    let mut features = FeatureFiles::new(base_dir);
    let mut conversations = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| Error::Parse {
            conversation: format!("<line {}>", lineno + 1),
            field: "<json>".into(),
            message: e.to_string(),
        })?;
        conversations.push(parse_conversation(&value, &mut features)?);
    }
    let ds = Dataset::new(Split::Train, conversations);
    ds.validate(dims)?;
    Ok(ds)
}

fn parse_conversation(value: &Value, features: &mut FeatureFiles) -> Result<Conversation> {
    let id = value
        .get("id")
        .and_then(Value::as_str)
        .ok_or_else(|| Error::Parse {
            conversation: "<unknown>".into(),
            field: "id".into(),
            message: "missing or not a string".into(),
        })?
        .to_string();
    let perr = |field: String, message: &str| Error::Parse {
        conversation: id.clone(),
        field,
        message: message.to_string(),
    };
    let utts = value
        .get("utterances")
        .and_then(Value::as_array)
        .ok_or_else(|| perr("utterances".into(), "missing or not an array"))?;
    let mut utterances = Vec::with_capacity(utts.len());
    for (k, u) in utts.iter().enumerate() {
        let f = |name: &str| format!("utterances[{k}].{name}");
        let index = u
            .get("index")
            .and_then(Value::as_u64)
            .ok_or_else(|| perr(f("index"), "missing or not a non-negative integer"))? as usize;
        let speaker = match u.get("speaker") {
            Some(Value::String(s)) => s.clone(),
            Some(Value::Number(n)) => n.to_string(),
            _ => return Err(perr(f("speaker"), "missing or not a string")),
        };
        let text = match u.get("text") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            _ => return Err(perr(f("text"), "must be a string or null")),
        };
        let emotion_str = u
            .get("emotion")
            .and_then(Value::as_str)
            .ok_or_else(|| perr(f("emotion"), "missing or not a string"))?;
        let emotion: EmotionLabel = emotion_str.parse().map_err(|_| perr(f("emotion"), &format!("unknown emotion `{emotion_str}`")))?;
        let causes_v = u
            .get("causes")
            .and_then(Value::as_array)
            .ok_or_else(|| perr(f("causes"), "missing or not an array"))?;
        let mut cause_indices = BTreeSet::new();
        for c in causes_v {
            let c = c.as_u64().ok_or_else(|| perr(f("causes"), "cause indices must be non-negative integers"))? as usize;
            if !cause_indices.insert(c) {
                return Err(Error::Validation(format!(
                    "conversation `{id}` utterance {index}: duplicate cause index {c}"
                )));
            }
        }
        let feat = u.get("feat").ok_or_else(|| perr(f("feat"), "missing"))?;
        let mut vecs: [Vec<f64>; 3] = Default::default();
        for m in Modality::ALL {
            let field = f(&format!("feat.{}", m.key()));
            let entry = feat.get(m.key()).ok_or_else(|| perr(field.clone(), "missing"))?;
            vecs[m.index()] = match entry {
                Value::Array(xs) => xs
                    .iter()
                    .map(|x| x.as_f64().ok_or_else(|| perr(field.clone(), "feature values must be numbers")))
                    .collect::<Result<_>>()?,
                Value::Object(obj) => {
                    let r = obj
                        .get("feat_ref")
                        .ok_or_else(|| perr(field.clone(), "expected an array or {\"feat_ref\": ...}"))?;
                    let file = r
                        .get("file")
                        .and_then(Value::as_str)
                        .ok_or_else(|| perr(format!("{field}.feat_ref.file"), "missing or not a string"))?;
                    let row = r
                        .get("row")
                        .and_then(Value::as_u64)
                        .ok_or_else(|| perr(format!("{field}.feat_ref.row"), "missing or not an integer"))?
                        as usize;
                    features.row(file, row).map_err(|e| perr(format!("{field}.feat_ref"), &e.to_string()))?
                }
                _ => return Err(perr(field, "expected an array or {\"feat_ref\": ...}")),
            };
        }
        utterances.push(Utterance {
            index,
            speaker,
            text,
            features: vecs,
            emotion,
            cause_indices,
        });
    }
    Ok(Conversation { id, utterances })
}

pub const FEATURE_MAGIC: &[u8; 8] = b"M3HGFEAT";

/// Row-major binary32 matrix stored in the external feature file format.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn row(&self, r: usize) -> Option<&[f32]> {
        (r < self.rows).then(|| &self.values[r * self.cols..(r + 1) * self.cols])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.values.len());
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
            return Err(Error::Validation("feature file: bad magic".into()));
        }
        let rows = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let cols = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let expected = 16 + 4 * rows * cols;
        if bytes.len() != expected {
            return Err(Error::Validation(format!(
                "feature file: {rows}x{cols} needs {expected} bytes, found {}",
                bytes.len()
            )));
        }
        let values = bytes[16..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { rows, cols, values })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }
}

struct FeatureFiles {
    base: PathBuf,
    cache: HashMap<String, FeatureMatrix>,
}

impl FeatureFiles {
    fn new(base: &Path) -> Self {
        Self {
            base: base.to_path_buf(),
            cache: HashMap::new(),
        }
    }

    fn row(&mut self, file: &str, row: usize) -> Result<Vec<f64>> {
        if !self.cache.contains_key(file) {
            let m = FeatureMatrix::read(self.base.join(file))?;
            self.cache.insert(file.to_string(), m);
        }
        let m = &self.cache[file];
        m.row(row)
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .ok_or_else(|| Error::Validation(format!("row {row} outside {} rows of `{file}`", m.rows)))
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const DIMS: FeatureDims = FeatureDims {
        text: 2,
        audio: 1,
        video: 1,
    };

    fn line(causes2: &str, emotion1: &str, causes1: &str) -> String {
        format!(
            r#"{{"id":"c1","utterances":[{{"index":1,"speaker":"A","text":null,"emotion":"{emotion1}","causes":[{causes1}],"feat":{{"t":[0,0],"a":[0],"v":[0]}}}},{{"index":2,"speaker":"B","text":"hi","emotion":"joy","causes":[{causes2}],"feat":{{"t":[0,0],"a":[0],"v":[0]}}}}]}}"#
        )
    }

    fn parse(s: &str) -> Result<Dataset> {
        parse_jsonl(s, Path::new("."), Some(&DIMS))
    }

    #[test]
    fn parses_minimal_conversation() {
        let ds = parse(&line("1", "neutral", "")).unwrap();
        assert_eq!(ds.len(), 1);
        let c = &ds.conversations[0];
        assert_eq!(c.len(), 2);
        assert_eq!(c.speakers(), vec!["A", "B"]);
        assert_eq!(c.utterance(2).cause_indices.iter().copied().collect::<Vec<_>>(), vec![1]);
        assert_eq!(c.utterance(1).text, None);
    }

    #[test]
    fn rejects_out_of_range_cause() {
        assert!(matches!(parse(&line("5", "neutral", "")), Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_neutral_with_cause() {
        assert!(matches!(parse(&line("1", "neutral", "1")), Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_emotion_without_cause() {
        assert!(matches!(parse(&line("", "neutral", "")), Err(Error::Validation(_))));
    }

    #[test]
    fn dimension_error_reports_expected_and_actual() {
        let bad = line("1", "neutral", "").replacen(r#""a":[0]"#, r#""a":[0,1,2]"#, 1);
        match parse(&bad) {
            Err(Error::Dimension { expected, actual, .. }) => assert_eq!((expected, actual), (1, 3)),
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_record_names_conversation_and_field() {
        let bad = line("1", "neutral", "").replacen(r#""emotion":"joy""#, r#""emotion":"elated""#, 1);
        match parse(&bad) {
            Err(Error::Parse { conversation, field, .. }) => {
                assert_eq!(conversation, "c1");
                assert_eq!(field, "utterances[1].emotion");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let l = line("1", "neutral", "");
        assert!(matches!(parse(&format!("{l}\n{l}")), Err(Error::Validation(_))));
    }

    fn conv_with(emotions: &[EmotionLabel], causes: &[&[usize]]) -> Conversation {
        Conversation {
            id: "x".into(),
            utterances: emotions
                .iter()
                .zip(causes)
                .enumerate()
                .map(|(k, (&e, c))| Utterance {
                    index: k + 1,
                    speaker: "s".into(),
                    text: None,
                    features: [vec![0.0], vec![0.0], vec![0.0]],
                    emotion: e,
                    cause_indices: c.iter().copied().collect(),
                })
                .collect(),
        }
    }

    #[test]
    fn gold_pair_matrix_examples() {
        use EmotionLabel::*;
        let c = conv_with(&[Neutral, Joy], &[&[], &[1, 2]]);
        let m = c.gold_pair_matrix();
        assert!(m.get(1, 2) && m.get(2, 2));
        assert!(!m.get(1, 1) && !m.get(2, 1));

        let c = conv_with(&[Neutral, Neutral, Neutral], &[&[], &[], &[]]);
        assert!(c.gold_pair_matrix().cells().iter().all(|v| !v));
        assert_eq!(c.gold_cause_indicator(), vec![false; 3]);

        let c = conv_with(&[Joy, Neutral, Neutral], &[&[3], &[], &[]]);
        let m = c.gold_pair_matrix();
        let set: Vec<_> = (1..=3).flat_map(|i| (1..=3).map(move |j| (i, j))).filter(|&(i, j)| m.get(i, j)).collect();
        assert_eq!(set, vec![(3, 1)]);
    }

    #[test]
    fn gold_cause_indicator_examples() {
        use EmotionLabel::*;
        let c = conv_with(&[Neutral, Joy], &[&[], &[1]]);
        assert_eq!(c.gold_cause_indicator(), vec![true, false]);
        let c = conv_with(&[Neutral, Sadness, Anger], &[&[], &[1, 2], &[2]]);
        assert_eq!(c.gold_cause_indicator(), vec![true, true, false]);
    }

    #[test]
    fn feature_file_reference() {
        let dir = tempfile::tempdir().unwrap();
        let fm = FeatureMatrix {
            rows: 2,
            cols: 2,
            values: vec![0.5, -1.0, 2.0, 0.25],
        };
        fm.write(dir.path().join("text.bin")).unwrap();
        let l = line("1", "neutral", "").replacen(
            r#""t":[0,0]"#,
            r#""t":{"feat_ref":{"file":"text.bin","row":1}}"#,
            1,
        );
        let ds = parse_jsonl(&l, dir.path(), Some(&DIMS)).unwrap();
        assert_eq!(ds.conversations[0].utterance(1).feature(Modality::Text), &[2.0, 0.25]);

        let bad_row = l.replace(r#""row":1"#, r#""row":7"#);
        assert!(matches!(parse_jsonl(&bad_row, dir.path(), Some(&DIMS)), Err(Error::Parse { .. })));
    }

    #[test]
    fn feature_matrix_rejects_bad_header() {
        let mut bytes = FeatureMatrix {
            rows: 1,
            cols: 1,
            values: vec![1.0],
        }
        .to_bytes();
        assert_eq!(&bytes[..8], b"M3HGFEAT");
        assert_eq!(bytes.len(), 20);
        bytes.pop();
        assert!(FeatureMatrix::from_bytes(&bytes).is_err());
        bytes[0] = b'X';
        assert!(FeatureMatrix::from_bytes(&bytes).is_err());
    }

    fn arb_conversation() -> impl Strategy<Value = Conversation> {
        (1usize..7).prop_flat_map(|n| {
            let utt = (0usize..3, 0usize..7, proptest::collection::vec(1usize..=n, 1..3), proptest::collection::vec(-1e3f64..1e3, 4));
            proptest::collection::vec(utt, n).prop_map(move |us| Conversation {
                id: format!("conv-{n}"),
                utterances: us
                    .into_iter()
                    .enumerate()
                    .map(|(k, (spk, emo, causes, feats))| {
                        let emotion = EmotionLabel::ALL[emo];
                        Utterance {
                            index: k + 1,
                            speaker: format!("S{spk}"),
                            text: (k % 2 == 0).then(|| format!("utt {k}")),
                            features: [feats[..2].to_vec(), vec![feats[2]], vec![feats[3]]],
                            emotion,
                            cause_indices: if emotion.is_neutral() { BTreeSet::new() } else { causes.into_iter().collect() },
                        }
                    })
                    .collect(),
            })
        })
    }

    proptest! {
        #[test]
        fn serialize_parse_round_trip(c in arb_conversation()) {
            let ds = Dataset::new(Split::Train, vec![c]);
            ds.validate(Some(&DIMS)).unwrap();
            let back = parse(&ds.to_jsonl()).unwrap();
            prop_assert_eq!(back, ds);
        }

        #[test]
        fn gold_structures_agree(c in arb_conversation()) {
            let m = c.gold_pair_matrix();
            for u in &c.utterances {
                let col_empty = (1..=c.len()).all(|i| !m.get(i, u.index));
                prop_assert_eq!(col_empty, u.emotion.is_neutral());
            }
            let rows: Vec<bool> = (1..=c.len()).map(|i| (1..=c.len()).any(|j| m.get(i, j))).collect();
            prop_assert_eq!(rows, c.gold_cause_indicator());
        }
    }
}
