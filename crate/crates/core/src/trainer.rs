//! AdamW training with gradient accumulation, per-epoch validation and
//! directory checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Config, TrainConfig};
use crate::data::{Conversation, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{subtask_metrics, triplet_f1, MetricsReport};
use crate::model::Model;
use crate::numerics::{ParamStore, Tensor};
use crate::objective::ClassWeights;

/// First and second moment estimates, one tensor per parameter in store
/// order, plus the number of steps taken so far.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.entries().iter().map(|e| Tensor::zeros_like(&e.value)).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.m.iter().map(Tensor::len).sum()
    }
}

/// One AdamW update with bias-corrected moments and decoupled weight decay.
/// Increments `state.t` before use, so the first call runs with `t = 1`.
pub fn optimizer_step(store: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::shape(format!(
            "optimizer got {} gradients and {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            store.len()
        )));
    }
    for (entry, g) in store.entries().iter().zip(grads) {
        if !entry.value.same_shape(g) {
            return Err(Error::shape(format!("gradient shape {:?} for parameter {}", g.shape(), entry.name)));
        }
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for parameter {}", entry.name)));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (k, entry) in store.entries_mut().iter_mut().enumerate() {
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        let p = entry.value.data_mut();
        for (idx, &gi) in grads[k].data().iter().enumerate() {
            m[idx] = cfg.beta1 * m[idx] + (1.0 - cfg.beta1) * gi;
            v[idx] = cfg.beta2 * v[idx] + (1.0 - cfg.beta2) * gi * gi;
            let update = cfg.lr * (m[idx] / c1) / ((v[idx] / c2).sqrt() + cfg.eps);
            p[idx] = p[idx] - cfg.lr * cfg.weight_decay * p[idx] - update;
        }
    }
    Ok(())
}

/// Mean joint loss of `group` and its gradient, one tensor per parameter.
/// Conversations are processed in parallel and merged in input order.
/// Dropout masks, when enabled, derive from `step` and the position in the
/// group, so they do not depend on scheduling.
pub fn group_gradient(
    model: &Model,
    group: &[&Conversation],
    weights: &ClassWeights,
    cfg: &Config,
    step: u64,
) -> Result<(f64, Vec<Tensor>)> {
    let base = cfg.train.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(step << 16);
    let per_conv: Vec<Result<(f64, Vec<Tensor>)>> = group
        .par_iter()
        .enumerate()
        .map(|(k, conv)| {
            let mut tape = model.tape();
            let seed = base.wrapping_add((k as u64) << 8);
            let loss = model.loss_with(&mut tape, &model.store, conv, weights, &cfg.loss, Some(seed))?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss diverged on conversation {}", conv.id)));
            }
            let grads = tape.backward(loss)?;
            Ok((value, grads.for_params(&tape, &model.store)))
        })
        .collect();
    let scale = 1.0 / group.len() as f64;
    let mut total = 0.0;
    let mut acc: Vec<Tensor> = model.store.entries().iter().map(|e| Tensor::zeros_like(&e.value)).collect();
    for r in per_conv {
        let (loss, grads) = r?;
        total += loss;
        for (a, g) in acc.iter_mut().zip(&grads) {
            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                *x += y;
            }
        }
    }
    for a in &mut acc {
        for x in a.data_mut() {
            *x *= scale;
        }
    }
    Ok((total * scale, acc))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_6avg: f64,
    pub val_4avg: f64,
}

/// Parameters, optimizer moments and the settings that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub params: ParamStore,
    pub optimizer: AdamState,
    pub epoch: usize,
    pub best_metric: f64,
}

pub struct TrainOutcome {
    /// Snapshot with the best validation score.
    pub best: Checkpoint,
    /// State after the last epoch.
    pub last: Checkpoint,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn best_model(&self) -> Result<Model> {
        self.best.model()
    }

    pub fn loss_trace(&self) -> Vec<f64> {
        self.log.iter().map(|l| l.train_loss).collect()
    }
}

/// Triplet and subtask scores of `model` on `data`.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<MetricsReport> {
    let preds = data
        .conversations
        .par_iter()
        .map(|c| model.predict(c, false))
        .collect::<Result<Vec<_>>>()?;
    let gold: Vec<_> = data.conversations.iter().map(Conversation::gold_triplets).collect();
    let pred: Vec<_> = preds.iter().map(|p| p.triplets.clone()).collect();
    let labels: Vec<_> = preds.iter().map(|p| p.labels(model.config.tau)).collect();
    Ok(MetricsReport {
        triplet: triplet_f1(&gold, &pred)?,
        subtasks: Some(subtask_metrics(&data.conversations, &labels)?),
    })
}

/// Trains from a fresh initialization seeded by `cfg.train.seed`.
pub fn train(train_set: &Dataset, val_set: &Dataset, cfg: &Config) -> Result<TrainOutcome> {
    train_with(train_set, val_set, cfg, |_| Ok(()))
}

/// Like [`train`], calling `on_epoch` after each epoch's validation.
pub fn train_with<F>(train_set: &Dataset, val_set: &Dataset, cfg: &Config, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochLog) -> Result<()>,
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }
    let dims = cfg.model.feature_dims();
    train_set.validate(Some(&dims))?;
    val_set.validate(Some(&dims))?;

    let tc = &cfg.train;
    let mut model = Model::new(&cfg.model, tc.seed)?;
    let mut opt = AdamState::new(&model.store);
    assert_eq!(opt.scalar_count(), model.store.scalar_count(), "every parameter is optimized");
    let weights = ClassWeights::estimate(train_set, &cfg.loss);
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x005e_ed0f_7a1e);
    let group_size = tc.batch_size * tc.accumulation_steps;
    let select = |log: &EpochLog| if tc.selection_metric == "val_4avg" { log.val_4avg } else { log.val_6avg };

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(tc.epochs);
    let mut best: Option<Checkpoint> = None;
    for epoch in 1..=tc.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for chunk in order.chunks(group_size) {
            let group: Vec<&Conversation> = chunk.iter().map(|&i| &train_set.conversations[i]).collect();
            let (loss, grads) = group_gradient(&model, &group, &weights, cfg, opt.t + 1)?;
            optimizer_step(&mut model.store, &grads, &mut opt, tc)?;
            loss_sum += loss * group.len() as f64;
            seen += group.len();
        }
        let report = evaluate(&model, val_set)?;
        let entry = EpochLog {
            epoch,
            train_loss: loss_sum / seen as f64,
            val_6avg: report.triplet.avg6,
            val_4avg: report.triplet.avg4,
        };
        on_epoch(&entry)?;
        log.push(entry);
        let score = select(&entry);
        if best.as_ref().is_none_or(|b| score > b.best_metric) {
            best = Some(Checkpoint {
                config: cfg.clone(),
                params: model.store.clone(),
                optimizer: opt.clone(),
                epoch,
                best_metric: score,
            });
        }
    }
    let best = best.expect("at least one epoch");
    let last = Checkpoint {
        config: cfg.clone(),
        params: model.store,
        optimizer: opt,
        epoch: tc.epochs,
        best_metric: best.best_metric,
    };
    Ok(TrainOutcome { best, last, log })
}

#[derive(Serialize, Deserialize)]
struct TensorIndex {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: Config,
    epoch: usize,
    best_metric: f64,
    optimizer_step: u64,
    blob: String,
    tensors: Vec<TensorIndex>,
}

const MANIFEST: &str = "manifest.json";
const BLOB: &str = "params.bin";

impl Checkpoint {
    /// Rebuilds the model, checking that names and shapes match the layout
    /// the config produces.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.config.model, 0)?;
        if model.store.len() != self.params.len() {
            return Err(Error::Validation(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for (dst, src) in model.store.entries_mut().iter_mut().zip(self.params.entries()) {
            if dst.name != src.name || !dst.value.same_shape(&src.value) {
                return Err(Error::Validation(format!(
                    "checkpoint tensor {} {:?} does not match {} {:?}",
                    src.name,
                    src.value.shape(),
                    dst.name,
                    dst.value.shape()
                )));
            }
            dst.value = src.value.clone();
        }
        Ok(model)
    }

    /// Writes `manifest.json` and one little-endian f64 blob into `dir`.
    /// Parameters come first, then the `m/` and `v/` optimizer moments.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        let named = self
            .params
            .entries()
            .iter()
            .map(|e| (e.name.clone(), &e.value))
            .chain(self.params.entries().iter().zip(&self.optimizer.m).map(|(e, t)| (format!("m/{}", e.name), t)))
            .chain(self.params.entries().iter().zip(&self.optimizer.v).map(|(e, t)| (format!("v/{}", e.name), t)));
        for (name, t) in named {
            tensors.push(TensorIndex {
                name,
                shape: t.shape().to_vec(),
                offset: blob.len(),
            });
            for x in t.data() {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = Manifest {
            config: self.config.clone(),
            epoch: self.epoch,
            best_metric: self.best_metric,
            optimizer_step: self.optimizer.t,
            blob: BLOB.into(),
            tensors,
        };
        let blob_path = dir.join(BLOB);
        fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        let path = dir.join(MANIFEST);
        let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::to_writer_pretty(&mut f, &manifest)?;
        f.write_all(b"\n").map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        manifest.config.validate()?;
        let blob_path = dir.join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let read = |t: &TensorIndex| -> Result<Tensor> {
            let count: usize = t.shape.iter().product();
            let end = t.offset + 8 * count;
            let bytes = blob
                .get(t.offset..end)
                .ok_or_else(|| Error::Validation(format!("tensor {} runs past the end of the blob", t.name)))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
                .collect();
            Tensor::new(&t.shape, data)
        };
        let mut params = ParamStore::new();
        let (mut m, mut v) = (Vec::new(), Vec::new());
        for t in &manifest.tensors {
            let value = read(t)?;
            if t.name.starts_with("m/") {
                m.push(value);
            } else if t.name.starts_with("v/") {
                v.push(value);
            } else {
                params.add(t.name.clone(), value);
            }
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Validation("checkpoint optimizer moments do not cover every parameter".into()));
        }
        let ckpt = Self {
            config: manifest.config,
            params,
            optimizer: AdamState {
                m,
                v,
                t: manifest.optimizer_step,
            },
            epoch: manifest.epoch,
            best_metric: manifest.best_metric,
        };
        ckpt.model()?;
        Ok(ckpt)
    }
}

/// Writes one JSON object per line.
pub fn write_log(path: impl AsRef<Path>, log: &[EpochLog]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for l in log {
        out.push_str(&serde_json::to_string(l)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
