//! Skip-gram item embeddings and the per-item input feature vector.
//!
//! Each item fed to the sequence model is encoded as
//! `[has_embedding, item_id / max_item_id, v_0 .. v_{dim-1}]`, where `v` is
//! the item's skip-gram input vector, or zeros when the item was never
//! viewed. The padding id encodes as the all-zero vector.

use std::collections::BTreeMap;

use num_traits::Float;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PurchaseSequence, TrainingWindow, Vocabulary};
use crate::rng::stream_rng;
use crate::{Error, ItemId, Result, PAD};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Word2VecConfig {
    pub window: usize,
    pub dim: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub initial_lr: f32,
    pub min_count: usize,
    pub seed: u64,
}

impl Default for Word2VecConfig {
    fn default() -> Self {
        Word2VecConfig {
            window: 5,
            dim: 100,
            negatives: 5,
            epochs: 5,
            initial_lr: 0.025,
            min_count: 1,
            seed: 1,
        }
    }
}

impl Word2VecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.dim == 0 || self.negatives == 0 {
            return Err(Error::invalid(
                "word2vec window, dim and negatives must all be at least 1",
            ));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::invalid("word2vec learning rate must be positive"));
        }
        Ok(())
    }
}

/// Trained skip-gram vectors, row `k` belonging to `items()[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Word2VecModel {
    items: Vec<ItemId>,
    input_vectors: Vec<f32>,
    context_vectors: Vec<f32>,
    config: Word2VecConfig,
}

impl Word2VecModel {
    pub fn from_parts(
        items: Vec<ItemId>,
        input_vectors: Vec<f32>,
        context_vectors: Vec<f32>,
        config: Word2VecConfig,
    ) -> Result<Self> {
        config.validate()?;
        if !items.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("embedding item ids must be strictly ascending"));
        }
        let expected = items.len() * config.dim;
        if input_vectors.len() != expected || context_vectors.len() != expected {
            return Err(Error::shape(format!(
                "embedding matrices must hold {} x {} values",
                items.len(),
                config.dim
            )));
        }
        if input_vectors.iter().chain(&context_vectors).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite embedding value"));
        }
        Ok(Word2VecModel {
            items,
            input_vectors,
            context_vectors,
            config,
        })
    }

    pub fn config(&self) -> &Word2VecConfig {
        &self.config
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn input_vectors(&self) -> &[f32] {
        &self.input_vectors
    }

    pub fn context_vectors(&self) -> &[f32] {
        &self.context_vectors
    }

    pub fn contains(&self, item: ItemId) -> bool {
        self.items.binary_search(&item).is_ok()
    }

    /// The item's embedding, or `None` if it was never seen in training.
    pub fn vector(&self, item: ItemId) -> Option<&[f32]> {
        let row = self.items.binary_search(&item).ok()?;
        let d = self.config.dim;
        Some(&self.input_vectors[row * d..(row + 1) * d])
    }
}

/// Draws negatives with probability proportional to `count^0.75`.
#[derive(Debug, Clone)]
pub struct NegativeSampler {
    dist: WeightedIndex<f64>,
    probs: Vec<f64>,
}

impl NegativeSampler {
    pub fn new(counts: &[u64]) -> Result<Self> {
        let weights: Vec<f64> = counts.iter().map(|&c| (c as f64).powf(0.75)).collect();
        let total: f64 = weights.iter().sum();
        let dist = WeightedIndex::new(&weights)
            .map_err(|e| Error::invalid(format!("negative sampler: {e}")))?;
        Ok(NegativeSampler {
            probs: weights.iter().map(|w| w / total).collect(),
            dist,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        self.dist.sample(rng)
    }

    /// Target sampling probability of each row.
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Negative log-likelihood of one (center, context) pair with sampled
/// negatives: `-ln σ(u_c·v) - Σ ln σ(-u_k·v)`.
pub fn sgns_loss<T: Float>(center: &[T], context: &[T], negatives: &[&[T]]) -> T {
    let pos = -sigmoid(dot(context, center)).ln();
    negatives
        .iter()
        .fold(pos, |acc, neg| acc - sigmoid(-dot(neg, center)).ln())
}

/// Scalar factors of the pair gradient: `(σ(u_c·v) - 1, [σ(u_k·v)])`.
/// Gradients are `∂/∂v = g_c·u_c + Σ g_k·u_k`, `∂/∂u_c = g_c·v`,
/// `∂/∂u_k = g_k·v`.
pub fn sgns_coefficients<T: Float>(center: &[T], context: &[T], negatives: &[&[T]]) -> (T, Vec<T>) {
    let g_pos = sigmoid(dot(context, center)) - T::one();
    let g_neg = negatives.iter().map(|n| sigmoid(dot(n, center))).collect();
    (g_pos, g_neg)
}

/// Full gradient of [`sgns_loss`]: `(d_center, d_context, d_negatives)`.
#[allow(clippy::type_complexity)]
pub fn sgns_gradient<T: Float>(
    center: &[T],
    context: &[T],
    negatives: &[&[T]],
) -> (Vec<T>, Vec<T>, Vec<Vec<T>>) {
    let (g_pos, g_neg) = sgns_coefficients(center, context, negatives);
    let mut d_center: Vec<T> = context.iter().map(|&u| g_pos * u).collect();
    for (neg, &g) in negatives.iter().zip(&g_neg) {
        for (d, &u) in d_center.iter_mut().zip(neg.iter()) {
            *d = *d + g * u;
        }
    }
    let d_context = center.iter().map(|&v| g_pos * v).collect();
    let d_negs = g_neg
        .iter()
        .map(|&g| center.iter().map(|&v| g * v).collect())
        .collect();
    (d_center, d_context, d_negs)
}

/// Trains skip-gram with negative sampling on view sequences.
///
/// Every (center, context) pair within `cfg.window` positions is one SGD
/// step. The learning rate decays linearly over all pairs of all epochs.
/// Single-threaded, so a given seed always yields the same vectors.
pub fn train_word2vec(view_seqs: &[PurchaseSequence], cfg: &Word2VecConfig) -> Result<Word2VecModel> {
    cfg.validate()?;
    let mut counts: BTreeMap<ItemId, u64> = BTreeMap::new();
    for s in view_seqs {
        for &item in &s.items {
            *counts.entry(item).or_insert(0) += 1;
        }
    }
    counts.retain(|_, c| *c >= cfg.min_count as u64);
    let items: Vec<ItemId> = counts.keys().copied().collect();
    let row_of = |item: ItemId| items.binary_search(&item).ok();

    let corpus: Vec<Vec<usize>> = view_seqs
        .iter()
        .map(|s| s.items.iter().filter_map(|&i| row_of(i)).collect::<Vec<_>>())
        .filter(|s| s.len() >= 2)
        .collect();
    let pairs_per_epoch: u64 = corpus
        .iter()
        .map(|s| {
            (0..s.len())
                .map(|i| (i.min(cfg.window) + (s.len() - 1 - i).min(cfg.window)) as u64)
                .sum::<u64>()
        })
        .sum();
    if pairs_per_epoch == 0 {
        return Err(Error::invalid("no training pairs"));
    }

    let dim = cfg.dim;
    let n = items.len();
    let mut init_rng = stream_rng(cfg.seed, 0);
    let half = 0.5 / dim as f32;
    let mut input: Vec<f32> = (0..n * dim)
        .map(|_| init_rng.random_range(-half..half))
        .collect();
    let mut context = vec![0.0f32; n * dim];

    let count_vec: Vec<u64> = counts.values().copied().collect();
    let sampler = NegativeSampler::new(&count_vec)?;
    let mut neg_rng = stream_rng(cfg.seed, 1);

    let total = pairs_per_epoch * cfg.epochs as u64;
    let min_lr = cfg.initial_lr * 1e-4;
    let mut done: u64 = 0;
    let mut negs: Vec<usize> = Vec::with_capacity(cfg.negatives);
    let mut d_center = vec![0.0f32; dim];
    for _epoch in 0..cfg.epochs {
        for s in &corpus {
            for (i, &center) in s.iter().enumerate() {
                let lo = i.saturating_sub(cfg.window);
                let hi = (i + cfg.window).min(s.len() - 1);
                for (j, &ctx) in s.iter().enumerate().take(hi + 1).skip(lo) {
                    if j == i {
                        continue;
                    }
                    let lr = (cfg.initial_lr * (1.0 - done as f32 / total as f32)).max(min_lr);
                    done += 1;

                    negs.clear();
                    for _ in 0..cfg.negatives {
                        let k = sampler.sample(&mut neg_rng);
                        if k != ctx {
                            negs.push(k);
                        }
                    }
                    sgns_update(&mut input, &mut context, dim, center, ctx, &negs, lr, &mut d_center);
                }
            }
        }
    }

    Word2VecModel::from_parts(items, input, context, *cfg)
}

#[allow(clippy::too_many_arguments)]
fn sgns_update(
    input: &mut [f32],
    context: &mut [f32],
    dim: usize,
    center: usize,
    ctx: usize,
    negs: &[usize],
    lr: f32,
    d_center: &mut [f32],
) {
    let v = &input[center * dim..(center + 1) * dim];
    let (g_pos, g_neg) = {
        let u_c = &context[ctx * dim..(ctx + 1) * dim];
        let neg_rows: Vec<&[f32]> = negs
            .iter()
            .map(|&k| &context[k * dim..(k + 1) * dim])
            .collect();
        sgns_coefficients(v, u_c, &neg_rows)
    };
    d_center.fill(0.0);
    for (&row, g) in std::iter::once(&ctx)
        .chain(negs)
        .zip(std::iter::once(g_pos).chain(g_neg))
    {
        let u = &mut context[row * dim..(row + 1) * dim];
        for ((d, u), &x) in d_center.iter_mut().zip(u.iter_mut()).zip(v) {
            *d += g * *u;
            *u -= lr * g * x;
        }
    }
    for (x, d) in input[center * dim..(center + 1) * dim].iter_mut().zip(d_center.iter()) {
        *x -= lr * d;
    }
}

/// `a·b / (‖a‖‖b‖)`.
pub fn cosine(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("undefined cosine for a zero vector"));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-item model input, length `2 + dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemFeatureVector {
    pub values: Vec<f32>,
}

impl ItemFeatureVector {
    pub fn has_embedding(&self) -> bool {
        self.values[0] == 1.0
    }

    pub fn normalized_id(&self) -> f32 {
        self.values[1]
    }
}

pub fn feature_dim(embedding_dim: usize) -> usize {
    embedding_dim + 2
}

pub fn build_feature(item: ItemId, w2v: &Word2VecModel, vocab: &Vocabulary) -> Result<ItemFeatureVector> {
    let mut values = vec![0.0f32; feature_dim(w2v.dim())];
    if item == PAD {
        return Ok(ItemFeatureVector { values });
    }
    if !vocab.contains(item) {
        return Err(Error::UnknownItem(item));
    }
    values[1] = (f64::from(item) / f64::from(vocab.max_item_id())) as f32;
    if let Some(v) = w2v.vector(item) {
        values[0] = 1.0;
        values[2..].copy_from_slice(v);
    }
    Ok(ItemFeatureVector { values })
}

/// Row-major `inputs.len() x (2 + dim)` matrix, one feature row per slot.
pub fn featurize_window(w: &TrainingWindow, w2v: &Word2VecModel, vocab: &Vocabulary) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(w.inputs.len() * feature_dim(w2v.dim()));
    for &item in &w.inputs {
        out.extend(build_feature(item, w2v, vocab)?.values);
    }
    Ok(out)
}

/// Precomputed features for every item in the full vocabulary, in dense
/// vocabulary order. This is what ships inside a model artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    dim: usize,
    rows: Vec<f32>,
}

impl FeatureTable {
    pub fn build(w2v: &Word2VecModel, vocab: &Vocabulary) -> Result<Self> {
        let dim = feature_dim(w2v.dim());
        let mut rows = Vec::with_capacity(vocab.n_items() * dim);
        for &item in vocab.full_items() {
            rows.extend(build_feature(item, w2v, vocab)?.values);
        }
        Ok(FeatureTable { dim, rows })
    }

    pub fn from_rows(dim: usize, rows: Vec<f32>) -> Result<Self> {
        if dim == 0 || !rows.len().is_multiple_of(dim) {
            return Err(Error::shape(format!(
                "feature table of {} values is not a multiple of width {dim}",
                rows.len()
            )));
        }
        Ok(FeatureTable { dim, rows })
    }

    /// Feature width (`2 + embedding dim`).
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    pub fn row(&self, index: usize) -> &[f32] {
        &self.rows[index * self.dim..(index + 1) * self.dim]
    }

    /// Writes the features of `inputs` into `out` (resized to
    /// `inputs.len() * dim`); padding slots become zero rows.
    pub fn featurize_into(&self, inputs: &[ItemId], vocab: &Vocabulary, out: &mut Vec<f32>) -> Result<()> {
        out.clear();
        out.resize(inputs.len() * self.dim, 0.0);
        for (slot, &item) in inputs.iter().enumerate() {
            if item == PAD {
                continue;
            }
            let idx = vocab.index_of(item).ok_or(Error::UnknownItem(item))?;
            out[slot * self.dim..(slot + 1) * self.dim].copy_from_slice(self.row(idx));
        }
        Ok(())
    }

    pub fn featurize(&self, inputs: &[ItemId], vocab: &Vocabulary) -> Result<Vec<f32>> {
        let mut out = Vec::new();
        self.featurize_into(inputs, vocab, &mut out)?;
        Ok(out)
    }
}
