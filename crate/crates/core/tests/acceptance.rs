//! Acceptance suite. Runs every criterion, prints one line per criterion and
//! exits non-zero if any fails.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ordrec::artifact::ModelArtifact;
use ordrec::config::ExperimentConfig;
use ordrec::corpus::{build_vocab, group_ordered, windowize, CorpusConfig, OrderEvent, PurchaseSequence};
use ordrec::embedding::cosine;
use ordrec::evaluator::wilcoxon_signed_rank_with;
use ordrec::lstm::{gradient_check, softmax_in_place, Model, ModelConfig, Params};
use ordrec::pipeline::{self, PipelineRun};
use ordrec::predictor::{format_results, BatchScorer, PredictionRequest, Predictor};
use ordrec::{ItemId, PAD};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<(bool, String), String>;

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let started = Instant::now();
        let outcome = f();
        let secs = started.elapsed().as_secs_f64();
        let line = match &outcome {
            Ok((true, d)) => format!("criterion {n:>2} {name}: PASS ({d}; {secs:.1}s)"),
            Ok((false, d)) => format!("criterion {n:>2} {name}: FAIL ({d}; {secs:.1}s)"),
            Err(e) => format!("criterion {n:>2} {name}: FAIL (error: {e}; {secs:.1}s)"),
        };
        println!("{line}");
        results.push((n, name, outcome));
    };

    record(1, "gradient check", &mut gradient_correctness);
    record(6, "window arithmetic", &mut window_arithmetic);
    record(7, "grouping determinism", &mut grouping_determinism);
    record(8, "numerical hygiene", &mut numerical_hygiene);

    let cfg = ExperimentConfig::acceptance();
    let started = Instant::now();
    let run = pipeline::run(&cfg);
    let elapsed = started.elapsed();
    let run = match run {
        Ok(r) => r,
        Err(e) => {
            let msg = format!("pipeline failed: {e}");
            for (n, name) in [
                (2, "held-out rank"),
                (3, "directionality"),
                (4, "significance"),
                (5, "sharded scoring"),
                (9, "embedding sanity"),
                (10, "end-to-end determinism"),
            ] {
                record(n, name, &mut || Err(msg.clone()));
            }
            return summarize(&results);
        }
    };

    record(2, "held-out rank", &mut || held_out_rank(&run, elapsed));
    record(3, "directionality", &mut || directionality(&run));
    record(4, "significance", &mut || significance(&run));
    record(5, "sharded scoring", &mut || sharded_scoring(&run));
    record(9, "embedding sanity", &mut || embedding_sanity(&cfg, &run));
    record(10, "end-to-end determinism", &mut || end_to_end_determinism(&cfg, &run));
    summarize(&results)
}

fn summarize(results: &[(usize, &str, Outcome)]) -> ExitCode {
    let failed: Vec<usize> = results
        .iter()
        .filter(|(_, _, o)| !matches!(o, Ok((true, _))))
        .map(|(n, _, _)| *n)
        .collect();
    if failed.is_empty() {
        println!("acceptance: {} of {} criteria passed", results.len(), results.len());
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {failed:?}");
        ExitCode::FAILURE
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let configs = [
        (2, 3, 2, 2, 3),
        (3, 4, 3, 2, 5),
        (1, 2, 2, 3, 2),
        (4, 3, 4, 4, 6),
        (5, 5, 3, 5, 4),
        (3, 2, 5, 2, 7),
    ];
    let mut worst = 0.0f64;
    for (seed, &(t, d, h1, h2, out)) in configs.iter().enumerate() {
        let cfg = ModelConfig {
            seq_len_in: t,
            feature_dim: d,
            hidden1: h1,
            hidden2: h2,
            n_outputs: out,
            seed: seed as u64,
        };
        worst = worst.max(gradient_check(cfg, 100 + seed as u64).map_err(err)?);
    }
    let secs = started.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-4 && secs <= 60.0,
        format!("{} configs, max relative error {worst:.2e}", configs.len()),
    ))
}

fn window_arithmetic() -> Outcome {
    let cfg = CorpusConfig::default();
    let l = cfg.seq_len;
    for m in 2..=40usize {
        let seq = PurchaseSequence {
            user_id: "u".into(),
            items: (1..=m as ItemId).collect(),
        };
        let vocab = build_vocab(std::slice::from_ref(&seq)).map_err(err)?;
        let w = windowize(&seq, &cfg, &vocab).map_err(err)?;
        let windows = w.windows;
        if windows.len() != m.saturating_sub(l - 1).max(1) {
            return Ok((false, format!("m={m}: {} windows", windows.len())));
        }
        for win in &windows {
            let pad = win.padding();
            if win.inputs[pad..].contains(&PAD) || win.inputs.len() != l - 1 {
                return Ok((false, format!("m={m}: bad padding in {:?}", win.inputs)));
            }
        }
        if m < l {
            let expected: Vec<ItemId> = std::iter::repeat_n(PAD, l - m).chain(1..m as ItemId).collect();
            if windows[0].inputs != expected || windows[0].label != m as ItemId {
                return Ok((false, format!("m={m}: short window {:?}", windows[0])));
            }
        }
        for (k, pair) in windows.windows(2).enumerate() {
            let (a, b) = (&pair[0], &pair[1]);
            let shifted: Vec<ItemId> = a.inputs[1..].iter().copied().chain([a.label]).collect();
            if b.inputs != shifted || b.window_index != k + 1 {
                return Ok((false, format!("m={m}: window {} does not shift by one", k + 1)));
            }
        }
        for (k, win) in windows.iter().enumerate() {
            if m >= l && (win.inputs[0] != (k + 1) as ItemId || win.label != (k + l) as ItemId) {
                return Ok((false, format!("m={m}: window {k} has wrong span")));
            }
        }
    }
    Ok((true, "m = 2..40 checked".into()))
}

fn grouping_determinism() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut events = Vec::new();
    for u in 0..30 {
        let n = rng.random_range(2..25);
        for _ in 0..n {
            events.push(OrderEvent {
                user_id: format!("user{u}"),
                // Few distinct timestamps, so most users have ties.
                timestamp: rng.random_range(0..6),
                item_id: rng.random_range(1..15),
            });
        }
    }
    let ties = {
        let mut seen = BTreeMap::new();
        for e in &events {
            *seen.entry((&e.user_id, e.timestamp)).or_insert(0) += 1;
        }
        seen.values().filter(|&&c| c > 1).count()
    };
    let cfg = CorpusConfig {
        tie_break_seed: 99,
        ..Default::default()
    };
    let reference = group_ordered(&events, &cfg).map_err(err)?;
    for _ in 0..50 {
        let mut shuffled = events.clone();
        shuffled.shuffle(&mut rng);
        if group_ordered(&shuffled, &cfg).map_err(err)? != reference {
            return Ok((false, "output changed under a permutation".into()));
        }
    }
    Ok((
        true,
        format!("{} events, {ties} tied (user, timestamp) groups, 50 permutations", events.len()),
    ))
}

fn numerical_hygiene() -> Outcome {
    let n = 100_000;
    let logits: Vec<f32> = (0..n).map(|i| if i % 2 == 0 { 50.0 } else { -50.0 }).collect();

    let mut probs = logits.clone();
    softmax_in_place(&mut probs);
    let sum: f64 = probs.iter().map(|&p| f64::from(p)).sum();

    let cfg = ModelConfig {
        seq_len_in: 2,
        feature_dim: 2,
        hidden1: 2,
        hidden2: 2,
        n_outputs: n,
        seed: 0,
    };
    let mut params = Params::<f32>::zeros(&cfg);
    params.output.b.copy_from_slice(&logits);
    let model = Model::new(cfg, params).map_err(err)?;
    let fwd = model.forward(&[0.0; 4]).map_err(err)?;
    let model_sum: f64 = fwd.probs().iter().map(|&p| f64::from(p)).sum();
    let loss_low = fwd.loss(1);
    let loss_high = fwd.loss(0);
    let finite = probs.iter().chain(fwd.probs()).all(|p| p.is_finite()) && loss_low.is_finite() && loss_high.is_finite();
    Ok((
        (sum - 1.0).abs() <= 1e-6 && (model_sum - 1.0).abs() <= 1e-6 && finite,
        format!("sum-1 = {:.1e}, model sum-1 = {:.1e}, losses {loss_high:.3}/{loss_low:.3}", sum - 1.0, model_sum - 1.0),
    ))
}

fn held_out_rank(run: &PipelineRun, elapsed: Duration) -> Outcome {
    let e = &run.eval;
    let pass = e.mean_rank_percentile <= 0.10 && 3.0 * e.mean_rank <= e.random_baseline_rank && elapsed.as_secs() <= 900;
    Ok((
        pass,
        format!(
            "{} cases, mean rank {:.2} of {} ({:.2}%), baseline {:.1}, pipeline {:.0}s",
            e.n_cases,
            e.mean_rank,
            e.n_outputs,
            100.0 * e.mean_rank_percentile,
            e.random_baseline_rank,
            elapsed.as_secs_f64()
        ),
    ))
}

fn directionality(run: &PipelineRun) -> Outcome {
    let predictor = Predictor::new(run.artifact.clone()).map_err(err)?;
    let vocab = &run.artifact.vocab;
    let catalog = &run.catalog;
    let last = catalog.n_stages - 1;
    let seeds_of = |stage: usize| -> Vec<ItemId> {
        catalog
            .items()
            .filter(|&i| catalog.stage_of(i) == Some(stage) && vocab.contains(i))
            .take(100)
            .collect()
    };
    let (first_seeds, last_seeds) = (seeds_of(0), seeds_of(last));
    if first_seeds.len() < 100 || last_seeds.len() < 100 {
        return Err(format!(
            "need 100 seeds per stage, have {} and {}",
            first_seeds.len(),
            last_seeds.len()
        ));
    }

    let mut ok = 0;
    let mut ratios = Vec::new();
    for (&seed, seed_stage) in first_seeds.iter().zip([0; 100]).chain(last_seeds.iter().zip([last; 100])) {
        let mut by_stage = vec![0.0f64; catalog.n_stages];
        for (item, p) in predictor.predict_from_seed(seed, 50).map_err(err)? {
            by_stage[catalog.stage_of(item).expect("catalog item")] += f64::from(p);
        }
        let backward: f64 = by_stage[..seed_stage].iter().sum();
        let same_or_forward: f64 = by_stage[seed_stage..].iter().sum();
        if same_or_forward > backward {
            ok += 1;
        }
        if seed_stage == last {
            ratios.push(by_stage[0] / same_or_forward.max(f64::MIN_POSITIVE));
        }
    }
    let frac = ok as f64 / 200.0;
    let mean_ratio = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok((
        frac >= 0.8 && mean_ratio <= 0.05,
        format!(
            "{:.1}% of seeds favor same-or-forward stages; last-stage seeds put {:.4} of their same-stage mass on the first stage",
            100.0 * frac,
            mean_ratio
        ),
    ))
}

fn significance(run: &PipelineRun) -> Outcome {
    // Exact tail against brute-force sign enumeration.
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for n in 1..=12usize {
        for _ in 0..5 {
            let model: Vec<f64> = (0..n).map(|_| rng.random_range(1..8) as f64).collect();
            let base: Vec<f64> = model
                .iter()
                .map(|m| m + [-3.0, -2.0, -1.0, 1.0, 2.0, 3.0][rng.random_range(0..6)])
                .collect();
            let got = wilcoxon_signed_rank_with(&model, &base, 12).map_err(err)?;
            worst = worst.max((got.p_value - brute_force_p(&model, &base)).abs());
        }
    }
    let w = run.eval.wilcoxon;
    Ok((
        worst < 1e-12 && run.eval.n_cases >= 200 && w.p_value < 0.01,
        format!(
            "{} cases, W = {}, p = {:.3e}; exact-vs-enumeration max error {worst:.1e} for n <= 12",
            run.eval.n_cases, w.statistic, w.p_value
        ),
    ))
}

/// `P(W' >= W)` by enumerating all `2^n` sign patterns.
fn brute_force_p(model: &[f64], base: &[f64]) -> f64 {
    let d: Vec<f64> = base.iter().zip(model).map(|(b, m)| b - m).filter(|d| *d != 0.0).collect();
    let n = d.len();
    let ranks: Vec<f64> = d
        .iter()
        .map(|x| {
            let less = d.iter().filter(|y| y.abs() < x.abs()).count();
            let equal = d.iter().filter(|y| y.abs() == x.abs()).count();
            less as f64 + (equal as f64 + 1.0) / 2.0
        })
        .collect();
    let observed: f64 = d.iter().zip(&ranks).filter(|(x, _)| **x > 0.0).map(|(_, r)| r).sum();
    let mut at_least = 0u64;
    for mask in 0u64..(1 << n) {
        let w: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
        if w >= observed - 1e-9 {
            at_least += 1;
        }
    }
    at_least as f64 / (1u64 << n) as f64
}

fn sharded_scoring(run: &PipelineRun) -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let path = dir.path().join("model.bin");
    run.artifact.save(&path).map_err(err)?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let items = run.artifact.vocab.full_items();
    let requests: Vec<PredictionRequest> = (0..1000)
        .map(|r| PredictionRequest {
            row_id: format!("r{r:04}"),
            history: (0..rng.random_range(1..16)).map(|_| items[rng.random_range(0..items.len())]).collect(),
        })
        .collect();

    let mut reference = None;
    for workers in [1, 2, 4, 8] {
        let scorer = BatchScorer::new(&path, workers).map_err(err)?.scratch_dir(dir.path());
        let (results, stats) = scorer.score(&requests, 10).map_err(err)?;
        let text = format_results(&results);
        if stats.loads_per_worker.len() != workers || stats.loads_per_worker.iter().any(|&l| l != 1) {
            return Ok((false, format!("{workers} workers loaded {:?} times", stats.loads_per_worker)));
        }
        match &reference {
            None => reference = Some(text),
            Some(r) if *r != text => return Ok((false, format!("{workers} workers differ from 1 worker"))),
            Some(_) => {}
        }
    }
    Ok((true, "1000 requests identical for 1/2/4/8 workers, one load each".into()))
}

fn embedding_sanity(cfg: &ExperimentConfig, run: &PipelineRun) -> Outcome {
    let catalog = &run.catalog;
    let mut gaps = Vec::new();
    for s in 0..3 {
        let mut ecfg = cfg.embedding;
        ecfg.seed += s;
        let w2v = pipeline::train_embeddings(&run.histories.views, &cfg.corpus, &ecfg).map_err(err)?;
        let items: Vec<ItemId> = catalog.items().filter(|&i| w2v.contains(i)).collect();
        let (mut same, mut n_same, mut cross, mut n_cross) = (0.0f64, 0usize, 0.0f64, 0usize);
        for (a_pos, &a) in items.iter().enumerate() {
            for &b in &items[a_pos + 1..] {
                let (ca, cb) = (catalog.cell_of(a).expect("item"), catalog.cell_of(b).expect("item"));
                let c = f64::from(cosine(w2v.vector(a).expect("known"), w2v.vector(b).expect("known")).map_err(err)?);
                if ca == cb {
                    same += c;
                    n_same += 1;
                } else if ca.0 != cb.0 {
                    cross += c;
                    n_cross += 1;
                }
            }
        }
        gaps.push(same / n_same as f64 - cross / n_cross as f64);
    }
    Ok((
        gaps.iter().all(|&g| g >= 0.1),
        format!("same-cell minus cross-team mean cosine per seed: {gaps:.3?}"),
    ))
}

fn end_to_end_determinism(cfg: &ExperimentConfig, run: &PipelineRun) -> Outcome {
    let again = pipeline::run(cfg).map_err(err)?;
    let same_artifact = run.artifact.to_bytes().map_err(err)? == again.artifact.to_bytes().map_err(err)?;
    let same_report = run.eval.to_json() == again.eval.to_json();
    let reloaded = ModelArtifact::from_bytes(&again.artifact.to_bytes().map_err(err)?).map_err(err)?;
    Ok((
        same_artifact && same_report && reloaded == run.artifact,
        format!("artifact identical: {same_artifact}, report identical: {same_report}"),
    ))
}
