//! Mini-batch training over windows.
//!
//! Each batch is cut into fixed chunks of [`CHUNK`] examples whose
//! gradients are summed in parallel and then combined in chunk order, so
//! results are bit-for-bit independent of the thread count.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifact::{ModelArtifact, TrainingMetadata};
use crate::corpus::{TrainingWindow, Vocabulary};
use crate::embedding::{FeatureTable, Word2VecModel};
use crate::lstm::{AdamConfig, AdamState, Model, ModelConfig, Params};
use crate::rng::{keyed_hash, stream_rng};
use crate::{Error, Result};

/// Examples per gradient chunk.
pub const CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub shuffle_seed: u64,
    /// Fraction of users held out for validation loss, in `[0, 1)`.
    pub validation_fraction: f64,
    pub checkpoint_every: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 5,
            shuffle_seed: 0,
            validation_fraction: 0.1,
            checkpoint_every: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::invalid("validation_fraction must be in [0, 1)"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::invalid("checkpoint_every must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mean loss of the initial weights over the training set.
    pub initial_train_loss: Option<f64>,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<Option<f64>>,
    pub epoch_seconds: Vec<f64>,
    pub n_train: usize,
    pub n_val: usize,
}

impl TrainReport {
    /// One tab-separated record per epoch, after a header line.
    pub fn to_lines(&self) -> String {
        let mut s = String::from("epoch\ttrain_loss\tval_loss\tseconds\n");
        for e in 0..self.train_loss.len() {
            let val = self.val_loss[e].map_or_else(|| "-".to_owned(), |v| format!("{v:.6}"));
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{}\t{:.3}",
                e + 1,
                self.train_loss[e],
                val,
                self.epoch_seconds[e]
            );
        }
        s
    }
}

/// Splits windows by user: every window of a held-out user goes to the
/// validation side. Users are ranked by a seeded hash and the first
/// `round(fraction * n_users)` are held out.
pub fn split(
    windows: &[TrainingWindow],
    validation_fraction: f64,
    seed: u64,
) -> Result<(Vec<TrainingWindow>, Vec<TrainingWindow>)> {
    if windows.is_empty() {
        return Err(Error::invalid("no windows to split"));
    }
    let held_out = validation_users(windows, validation_fraction, seed)?;
    Ok(windows
        .iter()
        .cloned()
        .partition(|w| !held_out.contains(&w.source_user)))
}

/// The user ids [`split`] assigns to validation.
pub fn validation_users(
    windows: &[TrainingWindow],
    validation_fraction: f64,
    seed: u64,
) -> Result<BTreeSet<String>> {
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::invalid("validation_fraction must be in [0, 1)"));
    }
    let users: BTreeSet<&str> = windows.iter().map(|w| w.source_user.as_str()).collect();
    let n_val = (validation_fraction * users.len() as f64).round() as usize;
    if validation_fraction > 0.0 && (n_val == 0 || n_val == users.len()) {
        return Err(Error::invalid(format!(
            "validation fraction {validation_fraction} of {} users leaves one side empty",
            users.len()
        )));
    }
    let seed = seed.to_le_bytes();
    let mut ranked: Vec<(u64, &str)> = users
        .into_iter()
        .map(|u| (keyed_hash(&[b"split", &seed, u.as_bytes()]), u))
        .collect();
    ranked.sort_unstable();
    Ok(ranked.into_iter().take(n_val).map(|(_, u)| u.to_owned()).collect())
}

/// Window indices for one epoch, reshuffled from `(shuffle_seed, epoch)`
/// and cut into batches; the last batch may be short.
pub fn batch_indices(n: usize, batch_size: usize, shuffle_seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(shuffle_seed, 1 + epoch as u64));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// [`batch_indices`] resolved to references.
pub fn batches<T>(items: &[T], batch_size: usize, shuffle_seed: u64, epoch: usize) -> Vec<Vec<&T>> {
    batch_indices(items.len(), batch_size, shuffle_seed, epoch)
        .into_iter()
        .map(|b| b.into_iter().map(|i| &items[i]).collect())
        .collect()
}

/// Window resolved to model inputs.
struct Example {
    x: Vec<f32>,
    label: usize,
}

fn prepare(windows: &[TrainingWindow], vocab: &Vocabulary, features: &FeatureTable) -> Result<Vec<Example>> {
    windows
        .iter()
        .map(|w| {
            let label = vocab
                .output_index_of(w.label)
                .ok_or_else(|| Error::invalid(format!("label {} is not an output item", w.label)))?;
            Ok(Example {
                x: features.featurize(&w.inputs, vocab)?,
                label,
            })
        })
        .collect()
}

/// Sum of losses and gradients over `batch`, deterministic in chunk order.
fn batch_gradient(model: &Model<f32>, examples: &[&Example]) -> Result<(f64, Params<f32>)> {
    let parts: Vec<Result<(f64, Params<f32>)>> = examples
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut grads = Params::zeros(model.config());
            let mut loss = 0.0f64;
            for ex in chunk {
                loss += f64::from(model.loss_and_grad(&ex.x, ex.label, &mut grads)?);
            }
            Ok((loss, grads))
        })
        .collect();
    let mut total = Params::zeros(model.config());
    let mut loss = 0.0;
    for part in parts {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    Ok((loss, total))
}

/// Mean loss over `examples` without updating anything.
fn mean_loss(model: &Model<f32>, examples: &[Example]) -> Result<f64> {
    let parts: Vec<Result<f64>> = examples
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk.iter().try_fold(0.0f64, |acc, ex| {
                Ok(acc + f64::from(model.forward(&ex.x)?.loss(ex.label)))
            })
        })
        .collect();
    let mut sum = 0.0;
    for p in parts {
        sum += p?;
    }
    Ok(sum / examples.len() as f64)
}

pub type EpochCallback<'a> = Box<dyn FnMut(usize, &TrainReport) + 'a>;

/// Optional side channels of a training run.
#[derive(Default)]
pub struct TrainHooks<'a> {
    /// Called after each epoch with `(epoch, report so far)`.
    pub on_epoch: Option<EpochCallback<'a>>,
    /// Where to write checkpoints when `checkpoint_every` is set.
    pub checkpoint_path: Option<PathBuf>,
}

pub fn train(
    windows: &[TrainingWindow],
    vocab: &Vocabulary,
    w2v: &Word2VecModel,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(ModelArtifact, TrainReport)> {
    train_with_hooks(windows, vocab, w2v, model_cfg, train_cfg, TrainHooks::default())
}

pub fn train_with_hooks(
    windows: &[TrainingWindow],
    vocab: &Vocabulary,
    w2v: &Word2VecModel,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    mut hooks: TrainHooks<'_>,
) -> Result<(ModelArtifact, TrainReport)> {
    train_cfg.validate()?;
    model_cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::invalid("no training windows"));
    }
    if model_cfg.n_outputs != vocab.n_outputs() {
        return Err(Error::invalid(format!(
            "model has {} outputs but the vocabulary has {} output items",
            model_cfg.n_outputs,
            vocab.n_outputs()
        )));
    }
    if windows.iter().any(|w| w.inputs.len() != model_cfg.seq_len_in) {
        return Err(Error::invalid(format!(
            "every window must have {} inputs",
            model_cfg.seq_len_in
        )));
    }
    let features = FeatureTable::build(w2v, vocab)?;
    if features.dim() != model_cfg.feature_dim {
        return Err(Error::invalid(format!(
            "embeddings give {}-wide features, model expects {}",
            features.dim(),
            model_cfg.feature_dim
        )));
    }

    let held_out = validation_users(windows, train_cfg.validation_fraction, train_cfg.shuffle_seed)?;
    let (train_w, val_w): (Vec<_>, Vec<_>) = windows
        .iter()
        .cloned()
        .partition(|w| !held_out.contains(&w.source_user));
    let train_ex = prepare(&train_w, vocab, &features)?;
    let val_ex = prepare(&val_w, vocab, &features)?;

    let mut model = Model::<f32>::init(*model_cfg)?;
    let mut adam = AdamState::for_params(train_cfg.adam, model.params());
    let mut report = TrainReport {
        n_train: train_ex.len(),
        n_val: val_ex.len(),
        ..Default::default()
    };
    if train_cfg.epochs > 0 && !train_ex.is_empty() {
        report.initial_train_loss = Some(mean_loss(&model, &train_ex)?);
    }

    let make_artifact = |model: &Model<f32>, report: &TrainReport| ModelArtifact {
        config: *model_cfg,
        vocab: vocab.clone(),
        features: features.clone(),
        params: model.params().clone(),
        metadata: TrainingMetadata {
            train: Some(*train_cfg),
            embedding: Some(*w2v.config()),
            epochs_completed: report.train_loss.len(),
            final_train_loss: report.train_loss.last().map(|&v| v as f32),
            final_val_loss: report.val_loss.last().copied().flatten().map(|v| v as f32),
            validation_users: held_out.iter().cloned().collect(),
        },
    };

    for epoch in 0..train_cfg.epochs {
        let started = Instant::now();
        let mut epoch_loss = 0.0f64;
        let order = batch_indices(train_ex.len(), train_cfg.batch_size, train_cfg.shuffle_seed, epoch);
        for (b, idx) in order.iter().enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train_ex[i]).collect();
            let (loss, mut grads) = batch_gradient(&model, &batch)?;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {} batch {}",
                    epoch + 1,
                    b + 1
                )));
            }
            grads.scale(1.0 / batch.len() as f32);
            adam.step(&mut model, &grads).map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!("{msg} at epoch {} batch {}", epoch + 1, b + 1)),
                other => other,
            })?;
            epoch_loss += loss;
        }
        report.train_loss.push(epoch_loss / train_ex.len() as f64);
        report.val_loss.push(if val_ex.is_empty() {
            None
        } else {
            Some(mean_loss(&model, &val_ex)?)
        });
        report.epoch_seconds.push(started.elapsed().as_secs_f64());

        if let (Some(every), Some(path)) = (train_cfg.checkpoint_every, hooks.checkpoint_path.as_ref()) {
            if (epoch + 1) % every == 0 {
                make_artifact(&model, &report).save(path)?;
            }
        }
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(epoch + 1, &report);
        }
    }

    Ok((make_artifact(&model, &report), report))
}
