use std::sync::OnceLock;

use ordrec::artifact::{ModelArtifact, FORMAT_VERSION};
use ordrec::config::ExperimentConfig;
use ordrec::evaluator::evaluate;
use ordrec::lstm::Params;
use ordrec::pipeline::{self, PipelineRun};
use ordrec::predictor::{score_batch, top_k_indices, PredictionRequest, Predictor};
use ordrec::{Error, ItemId, PAD};

fn small_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::acceptance();
    cfg.catalog.teams = 6;
    cfg.catalog.items_per_cell = 4;
    cfg.histories.n_users = 800;
    cfg.embedding.dim = 12;
    cfg.model.hidden1 = 24;
    cfg.model.hidden2 = 24;
    cfg.train.epochs = 5;
    cfg
}

fn run() -> &'static PipelineRun {
    static RUN: OnceLock<PipelineRun> = OnceLock::new();
    RUN.get_or_init(|| pipeline::run(&small_config()).expect("small pipeline runs"))
}

fn predictor() -> Predictor {
    Predictor::new(run().artifact.clone()).unwrap()
}

#[test]
fn training_loss_decreases_and_beats_uniform() {
    let r = &run().train_report;
    let initial = r.initial_train_loss.unwrap();
    let last = *r.train_loss.last().unwrap();
    assert!(last < initial, "{initial} -> {last}");
    let uniform = (run().prepared.vocab.n_outputs() as f64).ln();
    assert!(r.train_loss[2] < uniform, "{} vs ln|I'| = {uniform}", r.train_loss[2]);
    assert!(r.val_loss.iter().all(Option::is_some));
}

#[test]
fn trained_model_beats_zero_weights() {
    let run = run();
    let mut zero = run.artifact.clone();
    zero.params = Params::zeros(&zero.config);
    let zero_eval = evaluate(&Predictor::new(zero).unwrap(), &run.eval_windows, &small_config().eval).unwrap();
    assert!(run.eval.mean_rank_percentile < zero_eval.mean_rank_percentile);
    assert!(run.eval.mean_rank >= 1.0 && run.eval.mean_rank <= run.eval.n_outputs as f64);
}

#[test]
fn middle_stage_seeds_lean_forward() {
    let run = run();
    let p = predictor();
    let vocab = &run.artifact.vocab;
    let seeds: Vec<ItemId> = run
        .catalog
        .items()
        .filter(|&i| run.catalog.stage_of(i) == Some(1) && vocab.contains(i))
        .collect();
    assert!(seeds.len() >= 10);
    let mut ok = 0;
    for &seed in &seeds {
        let (mut forward, mut backward) = (0.0, 0.0);
        for (item, prob) in p.predict_from_seed(seed, 20).unwrap() {
            match run.catalog.stage_of(item).unwrap() {
                0 => backward += prob,
                2 => forward += prob,
                _ => {}
            }
        }
        if forward > backward {
            ok += 1;
        }
    }
    assert!(ok as f64 >= 0.8 * seeds.len() as f64, "{ok} of {}", seeds.len());
}

#[test]
fn rollout_stages_do_not_regress() {
    let run = run();
    let p = predictor();
    let mut trials = 0;
    let mut monotone = 0;
    for w in run.eval_windows.iter().take(200) {
        let history: Vec<ItemId> = w.inputs.iter().copied().filter(|&i| i != PAD).collect();
        let steps = p.rollout(&history, 3, 5).unwrap();
        let mut stages = vec![run.catalog.stage_of(*history.last().unwrap()).unwrap()];
        stages.extend(steps.iter().map(|s| run.catalog.stage_of(s[0].0).unwrap()));
        trials += 1;
        if stages.windows(2).all(|x| x[0] <= x[1]) {
            monotone += 1;
        }
    }
    assert!(monotone as f64 >= 0.8 * trials as f64, "{monotone} of {trials}");
}

#[test]
fn rollout_and_seed_prediction_basics() {
    let p = predictor();
    let item = run().artifact.vocab.output_items()[3];
    let history = [item, run().artifact.vocab.output_items()[5]];
    assert_eq!(p.rollout(&history, 1, 7).unwrap()[0], p.predict_next(&history, 7).unwrap());
    assert_eq!(p.rollout(&history, 3, 4).unwrap(), p.rollout(&history, 3, 4).unwrap());
    assert!(p.rollout(&history, 0, 4).is_err());

    let probs = p.probabilities(&[item]).unwrap();
    let best = top_k_indices(&probs, 1)[0];
    let top1 = p.predict_from_seed(item, 1).unwrap();
    assert_eq!(top1, vec![(run().artifact.vocab.output_item(best), probs[best])]);
    assert!(p.predict_from_seed(PAD, 3).is_err());
    assert!(matches!(p.predict_from_seed(99_999, 3), Err(Error::UnknownItem(99_999))));
    let long: Vec<ItemId> = std::iter::repeat_n(item, 30).collect();
    assert_eq!(p.predict_next(&long, 5).unwrap(), p.predict_next(&long[19..], 5).unwrap());
}

#[test]
fn artifact_file_round_trip_and_integrity() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    let artifact = &run().artifact;
    artifact.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let loaded = ModelArtifact::load(&path).unwrap();
    assert_eq!(&loaded, artifact);
    assert_eq!(loaded.to_bytes().unwrap(), bytes);
    assert_eq!(loaded.config.n_outputs, loaded.vocab.n_outputs());
    assert_eq!(loaded.features.n_rows(), loaded.vocab.n_items());

    let mut flipped = bytes.clone();
    let k = bytes.len() - 100;
    flipped[k] ^= 0x01;
    assert!(matches!(ModelArtifact::from_bytes(&flipped), Err(Error::Checksum)));
    assert!(matches!(ModelArtifact::from_bytes(&bytes[..bytes.len() / 2]), Err(Error::Checksum)));

    let report = ordrec::artifact::inspect(&path).unwrap();
    assert!(report.contains(&format!("format_version\t{FORMAT_VERSION}")));
    assert!(report.contains("tensor\tdense.w"));
}

#[test]
fn batch_scoring_fails_whole_batch() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    let requests = vec![
        PredictionRequest {
            row_id: "a".into(),
            history: vec![run().artifact.vocab.output_items()[0]],
        },
        PredictionRequest {
            row_id: "b".into(),
            history: vec![99_999],
        },
    ];
    assert!(score_batch(&path, &requests[..1], 2, 3).is_err());
    run().artifact.save(&path).unwrap();
    assert_eq!(score_batch(&path, &requests[..1], 2, 3).unwrap().len(), 1);
    assert!(matches!(score_batch(&path, &requests, 2, 3), Err(Error::Worker { worker: 1, .. })));
    let mut bytes = std::fs::read(&path).unwrap();
    bytes[10] ^= 0xff;
    std::fs::write(&path, bytes).unwrap();
    assert!(score_batch(&path, &requests[..1], 1, 3).is_err());
    // Scratch copies are removed after loading.
    let leftovers = std::fs::read_dir(std::env::temp_dir())
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_name().to_string_lossy().starts_with("ordrec-model-"))
        .count();
    assert_eq!(leftovers, 0);
}

#[test]
fn small_pipeline_is_deterministic() {
    let again = pipeline::run(&small_config()).unwrap();
    assert_eq!(again.artifact.to_bytes().unwrap(), run().artifact.to_bytes().unwrap());
    assert_eq!(again.eval.to_json(), run().eval.to_json());
}
