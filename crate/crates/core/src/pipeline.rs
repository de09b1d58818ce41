//! The whole offline flow on a synthetic instance, in memory.

use std::collections::BTreeSet;

use crate::artifact::ModelArtifact;
use crate::config::ExperimentConfig;
use crate::corpus::{
    build_vocab, filter_min_length, group_ordered, windowize_all, CorpusConfig, OrderEvent, PurchaseSequence,
    TrainingWindow, Vocabulary,
};
use crate::embedding::{train_word2vec, Word2VecConfig, Word2VecModel};
use crate::evaluator::{evaluate, EvalReport};
use crate::predictor::Predictor;
use crate::synthgen::{gen_catalog, gen_histories, Histories, SyntheticCatalog};
use crate::trainer::{train, TrainReport};
use crate::Result;

/// Ordered purchase sequences, vocabulary and windows.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub sequences: Vec<PurchaseSequence>,
    pub vocab: Vocabulary,
    pub windows: Vec<TrainingWindow>,
    /// Windows whose label fell outside the output vocabulary.
    pub dropped: usize,
}

pub fn prepare(orders: &[OrderEvent], cfg: &CorpusConfig) -> Result<Prepared> {
    let sequences = filter_min_length(group_ordered(orders, cfg)?);
    let vocab = build_vocab(&sequences)?;
    let w = windowize_all(&sequences, cfg, &vocab)?;
    Ok(Prepared {
        sequences,
        vocab,
        windows: w.windows,
        dropped: w.dropped,
    })
}

/// Embeddings from view events, grouped the same way as orders.
pub fn train_embeddings(views: &[OrderEvent], corpus: &CorpusConfig, cfg: &Word2VecConfig) -> Result<Word2VecModel> {
    train_word2vec(&group_ordered(views, corpus)?, cfg)
}

/// Windows of the users the artifact held out from training.
pub fn held_out_windows(windows: &[TrainingWindow], artifact: &ModelArtifact) -> Vec<TrainingWindow> {
    let users: BTreeSet<&str> = artifact
        .metadata
        .validation_users
        .iter()
        .map(String::as_str)
        .collect();
    windows
        .iter()
        .filter(|w| users.contains(w.source_user.as_str()))
        .cloned()
        .collect()
}

pub struct PipelineRun {
    pub catalog: SyntheticCatalog,
    pub histories: Histories,
    pub prepared: Prepared,
    pub embeddings: Word2VecModel,
    pub artifact: ModelArtifact,
    pub train_report: TrainReport,
    pub eval_windows: Vec<TrainingWindow>,
    pub eval: EvalReport,
}

/// Generate, prepare, embed, train and evaluate on held-out users.
pub fn run(cfg: &ExperimentConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let c = &cfg.catalog;
    let catalog = gen_catalog(c.teams, c.stages, c.items_per_cell, c.seed)?;
    let histories = gen_histories(&catalog, &cfg.histories)?;
    let prepared = prepare(&histories.orders, &cfg.corpus)?;
    let embeddings = train_embeddings(&histories.views, &cfg.corpus, &cfg.embedding)?;
    let model_cfg = cfg
        .model
        .resolve(&cfg.corpus, cfg.embedding.dim, prepared.vocab.n_outputs());
    let (artifact, train_report) = train(&prepared.windows, &prepared.vocab, &embeddings, &model_cfg, &cfg.train)?;
    let eval_windows = held_out_windows(&prepared.windows, &artifact);
    let predictor = Predictor::new(artifact.clone())?;
    let eval = evaluate(&predictor, &eval_windows, &cfg.eval)?;
    Ok(PipelineRun {
        catalog,
        histories,
        prepared,
        embeddings,
        artifact,
        train_report,
        eval_windows,
        eval,
    })
}
