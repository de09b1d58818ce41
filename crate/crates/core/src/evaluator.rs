//! Offline validation against the true next item.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::corpus::TrainingWindow;
use crate::predictor::Predictor;
use crate::rng::stream_rng;
use crate::{Error, ItemId, Result};

/// 1-based rank of `true_index` under the serving order (probability
/// descending, index ascending).
pub fn rank_of_true(probs: &[f32], true_index: usize) -> usize {
    let p = probs[true_index];
    1 + probs
        .iter()
        .enumerate()
        .filter(|&(i, &q)| q > p || (q == p && i < true_index))
        .count()
}

/// Binary-relevance NDCG for a single relevant item at 1-based `rank`.
pub fn ndcg_from_rank(rank: usize, k: usize) -> f64 {
    if rank == 0 || rank > k {
        0.0
    } else {
        1.0 / (1.0 + rank as f64).log2()
    }
}

/// NDCG@k of `relevant` within an ordered recommendation list.
pub fn ndcg_at_k(ranked_items: &[ItemId], relevant: ItemId, k: usize) -> f64 {
    ranked_items
        .iter()
        .take(k)
        .position(|&i| i == relevant)
        .map_or(0.0, |pos| ndcg_from_rank(pos + 1, k))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences (`baseline - model > 0`).
    pub statistic: f64,
    /// One-sided p-value for "model ranks are smaller": `P(W' >= W)`.
    pub p_value: f64,
    /// Pairs left after dropping zero differences.
    pub n: usize,
    pub exact: bool,
}

/// Default largest `n` for which the exact null distribution is used.
pub const EXACT_MAX_N: usize = 20;

/// Paired one-sided Wilcoxon signed-rank test.
pub fn wilcoxon_signed_rank(model_ranks: &[f64], baseline_ranks: &[f64]) -> Result<WilcoxonResult> {
    wilcoxon_signed_rank_with(model_ranks, baseline_ranks, EXACT_MAX_N)
}

/// [`wilcoxon_signed_rank`] with a configurable exact-mode cutoff.
pub fn wilcoxon_signed_rank_with(
    model_ranks: &[f64],
    baseline_ranks: &[f64],
    exact_max_n: usize,
) -> Result<WilcoxonResult> {
    if model_ranks.len() != baseline_ranks.len() {
        return Err(Error::invalid("paired samples differ in length"));
    }
    let diffs: Vec<f64> = baseline_ranks
        .iter()
        .zip(model_ranks)
        .map(|(b, m)| b - m)
        .filter(|d| *d != 0.0)
        .collect();
    if diffs.is_empty() {
        return Err(Error::invalid("degenerate: all differences are zero"));
    }
    let n = diffs.len();
    let ranks = average_ranks(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>());
    let statistic: f64 = diffs
        .iter()
        .zip(&ranks)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();

    if n <= exact_max_n {
        return Ok(WilcoxonResult {
            statistic,
            p_value: exact_upper_tail(&ranks, statistic),
            n,
            exact: true,
        });
    }
    if n < 5 {
        return Err(Error::invalid("normal approximation needs at least 5 nonzero pairs"));
    }
    let nf = n as f64;
    let mean = nf * (nf + 1.0) / 4.0;
    let tie_term: f64 = tie_groups(&ranks).map(|t| t * t * t - t).sum::<f64>() / 48.0;
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let z = (statistic - mean - 0.5) / var.sqrt();
    let normal = Normal::standard();
    Ok(WilcoxonResult {
        statistic,
        p_value: normal.sf(z),
        n,
        exact: false,
    })
}

/// Ranks 1..n of `values` with ties sharing their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let avg = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = avg;
        }
        start = end;
    }
    ranks
}

/// Sizes of groups of equal ranks.
fn tie_groups(ranks: &[f64]) -> impl Iterator<Item = f64> {
    let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
    for r in ranks {
        *counts.entry((r * 2.0) as u64).or_insert(0) += 1;
    }
    counts.into_values().filter(|&c| c > 1).map(|c| c as f64)
}

/// `P(W' >= statistic)` under the null where each rank carries a random
/// sign. Ranks are multiples of 1/2, so the distribution of doubled sums is
/// built by dynamic programming over integers.
fn exact_upper_tail(ranks: &[f64], statistic: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (r * 2.0).round() as usize).collect();
    let max: usize = doubled.iter().sum();
    let mut counts = vec![0.0f64; max + 1];
    counts[0] = 1.0;
    let mut reach = 0;
    for &r in &doubled {
        for s in (0..=reach).rev() {
            let c = counts[s];
            if c != 0.0 {
                counts[s + r] += c;
            }
        }
        reach += r;
    }
    let threshold = (statistic * 2.0).round() as usize;
    let tail: f64 = counts.iter().skip(threshold).sum();
    tail / 2f64.powi(ranks.len() as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub k_list: Vec<usize>,
    /// Seed for the uniform random-ranking baseline.
    pub baseline_seed: u64,
    pub exact_wilcoxon_max_n: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_list: vec![1, 10, 100],
            baseline_seed: 0,
            exact_wilcoxon_max_n: EXACT_MAX_N,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub n_cases: usize,
    pub n_outputs: usize,
    pub mean_rank: f64,
    pub median_rank: f64,
    pub mean_rank_percentile: f64,
    pub hit_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    pub random_baseline_rank: f64,
    pub wilcoxon: WilcoxonResult,
    /// Per-case ranks, in input order.
    pub ranks: Vec<usize>,
}

impl EvalReport {
    /// Flat key/value JSON object with sorted keys.
    pub fn to_json(&self) -> String {
        let mut m = Map::new();
        m.insert("n_cases".into(), self.n_cases.into());
        m.insert("n_outputs".into(), self.n_outputs.into());
        m.insert("mean_rank".into(), self.mean_rank.into());
        m.insert("median_rank".into(), self.median_rank.into());
        m.insert("mean_rank_percentile".into(), self.mean_rank_percentile.into());
        m.insert("random_baseline_rank".into(), self.random_baseline_rank.into());
        for (k, v) in &self.hit_at {
            m.insert(format!("hit@{k}"), (*v).into());
        }
        for (k, v) in &self.ndcg_at {
            m.insert(format!("ndcg@{k}"), (*v).into());
        }
        m.insert("wilcoxon_statistic".into(), self.wilcoxon.statistic.into());
        m.insert("wilcoxon_p".into(), self.wilcoxon.p_value.into());
        m.insert("wilcoxon_n".into(), self.wilcoxon.n.into());
        m.insert("wilcoxon_exact".into(), self.wilcoxon.exact.into());
        let mut s = serde_json::to_string_pretty(&Value::Object(m)).expect("plain values serialize");
        s.push('\n');
        s
    }
}

/// Aggregates true-item ranks into a report.
pub fn report_from_ranks(ranks: Vec<usize>, n_outputs: usize, cfg: &EvalConfig) -> Result<EvalReport> {
    if ranks.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let n = ranks.len() as f64;
    let mean_rank = ranks.iter().sum::<usize>() as f64 / n;
    let mut sorted = ranks.clone();
    sorted.sort_unstable();
    let mid = sorted.len() / 2;
    let median_rank = if sorted.len() % 2 == 1 {
        sorted[mid] as f64
    } else {
        (sorted[mid - 1] + sorted[mid]) as f64 / 2.0
    };
    let mut hit_at = BTreeMap::new();
    let mut ndcg_at = BTreeMap::new();
    for &k in &cfg.k_list {
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        hit_at.insert(k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n);
        ndcg_at.insert(k, ranks.iter().map(|&r| ndcg_from_rank(r, k)).sum::<f64>() / n);
    }

    let mut rng = stream_rng(cfg.baseline_seed, 3);
    let baseline: Vec<f64> = ranks
        .iter()
        .map(|_| rng.random_range(1..=n_outputs) as f64)
        .collect();
    let model: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    let wilcoxon = wilcoxon_signed_rank_with(&model, &baseline, cfg.exact_wilcoxon_max_n)?;

    Ok(EvalReport {
        n_cases: ranks.len(),
        n_outputs,
        mean_rank,
        median_rank,
        mean_rank_percentile: mean_rank / n_outputs as f64,
        hit_at,
        ndcg_at,
        random_baseline_rank: n_outputs as f64 / 2.0,
        wilcoxon,
        ranks,
    })
}

/// Ranks the true label of every window and aggregates.
pub fn evaluate(predictor: &Predictor, windows: &[TrainingWindow], cfg: &EvalConfig) -> Result<EvalReport> {
    if windows.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let vocab = &predictor.artifact().vocab;
    let ranks = windows
        .par_iter()
        .map(|w| {
            let label = vocab
                .output_index_of(w.label)
                .ok_or_else(|| Error::invalid(format!("label {} is not an output item", w.label)))?;
            let probs = predictor.probabilities_for_slots(&w.inputs)?;
            Ok(rank_of_true(&probs, label))
        })
        .collect::<Result<Vec<_>>>()?;
    report_from_ranks(ranks, predictor.n_outputs(), cfg)
}
