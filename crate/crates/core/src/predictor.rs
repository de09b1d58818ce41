//! Serving: next-order, seed-item and multi-step rollout predictions, plus
//! sharded batch scoring.
//!
//! Every ranking uses one total order: probability descending, then item id
//! ascending.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};
use std::thread;

use crate::artifact::ModelArtifact;
use crate::lstm::Model;
use crate::{Error, ItemId, Result, PAD};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PredictionRequest {
    pub row_id: String,
    /// Purchase history, most recent last.
    pub history: Vec<ItemId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionResult {
    pub row_id: String,
    pub top_k: Vec<(ItemId, f32)>,
}

/// Ranking comparator over output indices: higher probability first, then
/// lower index (= lower item id, since output indices ascend with ids).
fn rank_cmp(probs: &[f32], a: usize, b: usize) -> Ordering {
    probs[b].total_cmp(&probs[a]).then(a.cmp(&b))
}

/// Indices of the `k` best entries in ranking order. Uses selection, not a
/// full sort, when `k` is smaller than the vector.
pub fn top_k_indices(probs: &[f32], k: usize) -> Vec<usize> {
    let k = k.min(probs.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, |&a, &b| rank_cmp(probs, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable_by(|&a, &b| rank_cmp(probs, a, b));
    idx
}

/// A loaded artifact ready to score. Immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct Predictor {
    artifact: ModelArtifact,
    model: Model<f32>,
}

impl Predictor {
    pub fn new(artifact: ModelArtifact) -> Result<Self> {
        artifact.validate()?;
        let model = artifact.model()?;
        Ok(Predictor { artifact, model })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(ModelArtifact::load(path)?)
    }

    pub fn artifact(&self) -> &ModelArtifact {
        &self.artifact
    }

    pub fn model(&self) -> &Model<f32> {
        &self.model
    }

    pub fn n_outputs(&self) -> usize {
        self.artifact.config.n_outputs
    }

    /// Left-pads (or truncates to the most recent items) to the model's
    /// input length.
    pub fn standardize(&self, history: &[ItemId]) -> Result<Vec<ItemId>> {
        if history.is_empty() {
            return Err(Error::invalid("empty history"));
        }
        let vocab = &self.artifact.vocab;
        if let Some(&bad) = history.iter().find(|&&i| i == PAD || !vocab.contains(i)) {
            return Err(Error::UnknownItem(bad));
        }
        let n = self.artifact.config.seq_len_in;
        let recent = &history[history.len().saturating_sub(n)..];
        let mut slots = vec![PAD; n - recent.len()];
        slots.extend_from_slice(recent);
        Ok(slots)
    }

    /// Full next-item distribution over the output vocabulary.
    pub fn probabilities(&self, history: &[ItemId]) -> Result<Vec<f32>> {
        let slots = self.standardize(history)?;
        self.probabilities_for_slots(&slots)
    }

    /// Distribution for an already standardized input (padding allowed).
    pub fn probabilities_for_slots(&self, slots: &[ItemId]) -> Result<Vec<f32>> {
        let x = self.artifact.features.featurize(slots, &self.artifact.vocab)?;
        Ok(self.model.forward(&x)?.into_probs())
    }

    fn top_k(&self, probs: &[f32], k: usize) -> Vec<(ItemId, f32)> {
        top_k_indices(probs, k)
            .into_iter()
            .map(|i| (self.artifact.vocab.output_item(i), probs[i]))
            .collect()
    }

    /// Top `k` items of the immediate next order.
    pub fn predict_next(&self, history: &[ItemId], k: usize) -> Result<Vec<(ItemId, f32)>> {
        let probs = self.probabilities(history)?;
        Ok(self.top_k(&probs, k))
    }

    /// Non-personalized recommendation: the seed alone after full padding.
    pub fn predict_from_seed(&self, seed_item: ItemId, k: usize) -> Result<Vec<(ItemId, f32)>> {
        self.predict_next(&[seed_item], k)
    }

    /// Predicts `horizon` orders ahead, feeding each step's top-1 item back
    /// into the history window.
    pub fn rollout(&self, history: &[ItemId], horizon: usize, k: usize) -> Result<Vec<Vec<(ItemId, f32)>>> {
        if horizon == 0 {
            return Err(Error::invalid("rollout horizon must be at least 1"));
        }
        let mut slots = self.standardize(history)?;
        let mut steps = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            let probs = self.probabilities_for_slots(&slots)?;
            let best = top_k_indices(&probs, 1)[0];
            steps.push(self.top_k(&probs, k));
            slots.remove(0);
            slots.push(self.artifact.vocab.output_item(best));
        }
        Ok(steps)
    }

    pub fn score(&self, req: &PredictionRequest, k: usize) -> Result<PredictionResult> {
        Ok(PredictionResult {
            row_id: req.row_id.clone(),
            top_k: self.predict_next(&req.history, k)?,
        })
    }
}

/// Per-worker counters from a batch run.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BatchStats {
    /// Model loads performed by each spawned worker.
    pub loads_per_worker: Vec<usize>,
    /// Requests handled by each worker.
    pub rows_per_worker: Vec<usize>,
}

/// Scores request batches on a pool of workers, each of which loads its
/// own copy of the artifact lazily, at most once.
#[derive(Debug, Clone)]
pub struct BatchScorer {
    artifact_path: PathBuf,
    scratch_dir: PathBuf,
    n_workers: usize,
}

impl BatchScorer {
    pub fn new(artifact_path: impl Into<PathBuf>, n_workers: usize) -> Result<Self> {
        if n_workers == 0 {
            return Err(Error::invalid("need at least one worker"));
        }
        Ok(BatchScorer {
            artifact_path: artifact_path.into(),
            scratch_dir: std::env::temp_dir(),
            n_workers,
        })
    }

    /// Directory for the per-worker artifact copies.
    pub fn scratch_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.scratch_dir = dir.into();
        self
    }

    /// Copies the artifact to a uniquely named scratch file and loads it.
    fn load_worker_copy(&self) -> Result<Predictor> {
        let local = self
            .scratch_dir
            .join(format!("ordrec-model-{}.bin", uuid::Uuid::new_v4()));
        fs::copy(&self.artifact_path, &local).map_err(|e| Error::io(&self.artifact_path, e))?;
        let loaded = Predictor::load(&local);
        let _ = fs::remove_file(&local);
        loaded
    }

    /// Partitions `requests` into contiguous chunks, one per worker, and
    /// returns results in input order. Any failure fails the whole batch.
    pub fn score(&self, requests: &[PredictionRequest], k: usize) -> Result<(Vec<PredictionResult>, BatchStats)> {
        fs::metadata(&self.artifact_path).map_err(|e| Error::io(&self.artifact_path, e))?;
        if requests.is_empty() {
            return Ok((Vec::new(), BatchStats::default()));
        }
        let chunk = requests.len().div_ceil(self.n_workers);
        let partitions: Vec<&[PredictionRequest]> = requests.chunks(chunk).collect();
        let loads: Vec<AtomicUsize> = partitions.iter().map(|_| AtomicUsize::new(0)).collect();

        let outcomes: Vec<Result<Vec<PredictionResult>>> = thread::scope(|s| {
            let handles: Vec<_> = partitions
                .iter()
                .zip(&loads)
                .map(|(part, counter)| {
                    s.spawn(move || {
                        let mut model: Option<Predictor> = None;
                        let mut out = Vec::with_capacity(part.len());
                        for req in part.iter() {
                            if model.is_none() {
                                counter.fetch_add(1, AtomicOrdering::SeqCst);
                                model = Some(self.load_worker_copy()?);
                            }
                            let predictor = model.as_ref().expect("loaded above");
                            out.push(predictor.score(req, k)?);
                        }
                        Ok(out)
                    })
                })
                .collect();
            handles
                .into_iter()
                .enumerate()
                .map(|(worker, h)| {
                    h.join().unwrap_or_else(|_| {
                        Err(Error::Worker {
                            worker,
                            msg: "panicked".into(),
                        })
                    })
                })
                .collect()
        });

        let mut results = Vec::with_capacity(requests.len());
        for (worker, outcome) in outcomes.into_iter().enumerate() {
            match outcome {
                Ok(part) => results.extend(part),
                Err(e @ Error::Worker { .. }) => return Err(e),
                Err(e) => {
                    return Err(Error::Worker {
                        worker,
                        msg: e.to_string(),
                    })
                }
            }
        }
        let stats = BatchStats {
            loads_per_worker: loads.iter().map(|c| c.load(AtomicOrdering::SeqCst)).collect(),
            rows_per_worker: partitions.iter().map(|p| p.len()).collect(),
        };
        Ok((results, stats))
    }
}

/// Convenience wrapper around [`BatchScorer`].
pub fn score_batch(
    artifact_path: impl Into<PathBuf>,
    requests: &[PredictionRequest],
    n_workers: usize,
    k: usize,
) -> Result<Vec<PredictionResult>> {
    Ok(BatchScorer::new(artifact_path, n_workers)?.score(requests, k)?.0)
}

/// Parses `row_id<TAB>comma-separated history` lines.
pub fn parse_requests(text: &str) -> Result<Vec<PredictionRequest>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: line_no, msg };
        let (row_id, hist) = line
            .split_once('\t')
            .ok_or_else(|| bad("expected row_id<TAB>history".into()))?;
        let history = hist
            .split(',')
            .map(|s| s.trim().parse::<ItemId>().map_err(|_| bad(format!("bad item id {s:?}"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(PredictionRequest {
            row_id: row_id.to_owned(),
            history,
        });
    }
    Ok(out)
}

/// `item:prob,item:prob,...` with six decimals.
pub fn format_top_k(top_k: &[(ItemId, f32)]) -> String {
    let mut s = String::with_capacity(top_k.len() * 16);
    for (n, (item, p)) in top_k.iter().enumerate() {
        if n > 0 {
            s.push(',');
        }
        let _ = write!(s, "{item}:{p:.6}");
    }
    s
}

/// Output file body: one `row_id<TAB>item:prob,...` line per result.
pub fn format_results(results: &[PredictionResult]) -> String {
    let mut s = String::new();
    for r in results {
        let _ = writeln!(s, "{}\t{}", r.row_id, format_top_k(&r.top_k));
    }
    s
}
