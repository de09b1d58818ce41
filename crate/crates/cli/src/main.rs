use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use ordrec::artifact;
use ordrec::corpus::{group_ordered, parse_orders, CorpusConfig};
use ordrec::embedding::{feature_dim, train_word2vec, Word2VecConfig};
use ordrec::evaluator::{evaluate, EvalConfig};
use ordrec::lstm::{AdamConfig, ModelConfig};
use ordrec::pipeline::{self, held_out_windows};
use ordrec::predictor::{format_results, format_top_k, parse_requests, BatchScorer, Predictor};
use ordrec::synthgen::{gen_catalog, gen_histories, write_dataset, GenParams};
use ordrec::trainer::{train_with_hooks, TrainConfig, TrainHooks};
use ordrec::ItemId;

const VOCAB_FILE: &str = "vocab.tsv";
const WINDOWS_FILE: &str = "windows.tsv";

/// Sequential next-item recommender: data generation, training and serving.
///
/// Every subcommand accepts `--config FILE`, a TOML file whose top-level
/// keys and `[subcommand]` tables supply flag defaults. Explicit flags win.
#[derive(Parser)]
#[command(name = "ordrec", version, args_override_self = true)]
struct Cli {
    /// TOML file supplying flag defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic catalog with order and view histories.
    GenData(GenDataArgs),
    /// Group orders per user and cut them into training windows.
    Prepare(PrepareArgs),
    /// Train item embeddings on view histories.
    TrainEmbeddings(TrainEmbeddingsArgs),
    /// Train the recurrent model on prepared windows.
    Train(TrainArgs),
    /// Rank the true next item of held-out windows.
    Evaluate(EvaluateArgs),
    /// Recommend the next items for one history or seed item.
    Predict(PredictArgs),
    /// Score a file of requests with a pool of workers.
    ScoreBatch(ScoreBatchArgs),
    /// Print an artifact's manifest and tensor norms.
    InspectModel(InspectArgs),
}

#[derive(Args)]
#[command(args_override_self = true)]
struct GenDataArgs {
    #[arg(long, default_value_t = 20)]
    teams: usize,
    #[arg(long, default_value_t = 3)]
    stages: usize,
    #[arg(long, default_value_t = 10)]
    items_per_cell: usize,
    #[arg(long, default_value_t = 5000)]
    users: usize,
    #[arg(long, default_value_t = 2)]
    min_orders: usize,
    #[arg(long, default_value_t = 20)]
    max_orders: usize,
    #[arg(long, default_value_t = 0.3)]
    p_adv: f64,
    #[arg(long, default_value_t = 0.05)]
    p_switch: f64,
    /// Extra same-cell browsing events per order.
    #[arg(long, default_value_t = 3)]
    views_per_order: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for orders.tsv, views.tsv and catalog.tsv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct PrepareArgs {
    #[arg(long)]
    orders: PathBuf,
    /// Optional view events; grouped into view_sequences.tsv.
    #[arg(long)]
    views: Option<PathBuf>,
    #[arg(long, default_value_t = 12)]
    seq_len: usize,
    /// Seed for ordering events that share a timestamp.
    #[arg(long, visible_alias = "tie-seed", default_value_t = 0)]
    seed: u64,
    /// Ignore events after this timestamp (milliseconds).
    #[arg(long)]
    cutoff: Option<i64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct TrainEmbeddingsArgs {
    /// View events, same grammar as orders.
    #[arg(long)]
    views: PathBuf,
    #[arg(long, default_value_t = 100)]
    dim: usize,
    #[arg(long, default_value_t = 5)]
    window: usize,
    #[arg(long, default_value_t = 5)]
    negatives: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 0.025)]
    lr: f32,
    #[arg(long, default_value_t = 1)]
    min_count: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Seed for ordering views that share a timestamp.
    #[arg(long, default_value_t = 0)]
    tie_seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct TrainArgs {
    /// Directory written by `prepare`.
    #[arg(long)]
    windows: PathBuf,
    #[arg(long)]
    embeddings: PathBuf,
    #[arg(long, default_value_t = 600)]
    hidden1: usize,
    #[arg(long, default_value_t = 600)]
    hidden2: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Seeds weight initialization, the validation split and shuffling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.1)]
    val_frac: f64,
    /// Save the artifact every N epochs.
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch report; defaults to the artifact path with `.report.tsv`.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    /// Directory written by `prepare`.
    #[arg(long)]
    windows: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
    k: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    exact_wilcoxon_max_n: usize,
    /// Seed of the random-rank baseline for the paired test.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Evaluate every window instead of the users held out in training.
    #[arg(long)]
    all: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[command(args_override_self = true)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["seed_item", "history"]))]
struct PredictArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    seed_item: Option<ItemId>,
    /// Comma-separated item ids, oldest first.
    #[arg(long, value_delimiter = ',')]
    history: Option<Vec<ItemId>>,
    #[arg(long, default_value_t = 10)]
    k: usize,
    /// Orders to predict ahead, feeding back each step's top item.
    #[arg(long, default_value_t = 1)]
    horizon: usize,
    /// Accepted for uniformity; prediction draws no random numbers.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct ScoreBatchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    requests: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value_t = 10)]
    k: usize,
    #[arg(long)]
    out: PathBuf,
    /// Accepted for uniformity; scoring draws no random numbers.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[command(args_override_self = true)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Accepted for uniformity; unused.
    #[arg(long)]
    seed: Option<u64>,
}

/// Exit status classes.
const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

fn main() -> ExitCode {
    let argv: Vec<OsString> = std::env::args_os().collect();
    let argv = match apply_config_file(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("code={EXIT_USAGE} error: {e:#}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            if code != 0 {
                eprint!("code={code} ");
            }
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    echo_config(&matches);
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            eprint!("code={EXIT_USAGE} ");
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let diverged = e
                .chain()
                .any(|c| c.downcast_ref::<ordrec::Error>().is_some_and(ordrec::Error::is_divergence));
            let code = if diverged { EXIT_DIVERGED } else { EXIT_DATA };
            eprintln!("code={code} error: {e:#}");
            ExitCode::from(code)
        }
    }
}

/// Prints every resolved flag of the chosen subcommand to stderr.
fn echo_config(matches: &ArgMatches) {
    let Some((name, sub)) = matches.subcommand() else {
        return;
    };
    let cmd = Cli::command();
    let Some(def) = cmd.find_subcommand(name) else {
        return;
    };
    let mut line = format!("effective config: {name}");
    for arg in def.get_arguments() {
        let id = arg.get_id().as_str();
        if id == "config" {
            continue;
        }
        if let Ok(Some(values)) = sub.try_get_raw(id) {
            let values: Vec<String> = values.map(|v| v.to_string_lossy().into_owned()).collect();
            line.push_str(&format!(" {id}={}", values.join(",")));
        }
    }
    eprintln!("{line}");
}

/// Long name of an argument plus its long aliases.
fn long_names(a: &clap::Arg) -> Vec<&str> {
    a.get_long()
        .into_iter()
        .chain(a.get_all_aliases().unwrap_or_default())
        .collect()
}

/// Injects flags from `--config FILE` right after the subcommand name, so
/// any explicit flag that follows overrides them.
fn apply_config_file(argv: Vec<OsString>) -> anyhow::Result<Vec<OsString>> {
    let args: Vec<String> = match argv.iter().map(|a| a.clone().into_string()).collect() {
        Ok(a) => a,
        Err(_) => return Ok(argv),
    };
    let mut config_path = None;
    for (i, a) in args.iter().enumerate() {
        if a == "--config" {
            config_path = args.get(i + 1).cloned();
        } else if let Some(p) = a.strip_prefix("--config=") {
            config_path = Some(p.to_owned());
        }
    }
    let Some(config_path) = config_path else {
        return Ok(argv);
    };

    let cmd = Cli::command();
    let flags_of = |sub: &str| -> Option<Vec<String>> {
        cmd.find_subcommand(sub).map(|c| {
            c.get_arguments()
                .flat_map(long_names)
                .map(str::to_owned)
                .collect()
        })
    };
    let text = fs::read_to_string(&config_path).with_context(|| format!("reading config {config_path}"))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing config {config_path}"))?;

    let sub_pos = args.iter().enumerate().skip(1).position(|(i, a)| {
        cmd.find_subcommand(a).is_some() && args[i - 1] != "--config"
    });
    let Some(sub_pos) = sub_pos.map(|p| p + 1) else {
        return Ok(argv);
    };
    let active = cmd
        .find_subcommand(&args[sub_pos])
        .expect("found above")
        .get_name()
        .to_owned();
    let active_flags = flags_of(&active).unwrap_or_default();

    let mut top = Vec::new();
    let mut own = Vec::new();
    for (key, value) in &table {
        let flag = key.replace('_', "-");
        match value {
            toml::Value::Table(inner) => {
                let Some(known) = flags_of(&flag) else {
                    bail!("config: unknown key {key:?}");
                };
                for (k, v) in inner {
                    let f = k.replace('_', "-");
                    if f == "config" || !known.contains(&f) {
                        bail!("config: unknown key {key}.{k}");
                    }
                    if flag == active {
                        own.extend(flag_tokens(&f, v)?);
                    }
                }
            }
            v => {
                let used_somewhere = cmd
                    .get_subcommands()
                    .any(|c| c.get_arguments().flat_map(long_names).any(|l| l == flag));
                if flag == "config" || !used_somewhere {
                    bail!("config: unknown key {key:?}");
                }
                if active_flags.contains(&flag) {
                    top.extend(flag_tokens(&flag, v)?);
                }
            }
        }
    }
    let mut out: Vec<OsString> = args[..=sub_pos].iter().map(OsString::from).collect();
    out.extend(top.into_iter().chain(own).map(OsString::from));
    out.extend(args[sub_pos + 1..].iter().map(OsString::from));
    Ok(out)
}

fn flag_tokens(flag: &str, value: &toml::Value) -> anyhow::Result<Vec<String>> {
    let scalar = |v: &toml::Value| -> anyhow::Result<String> {
        Ok(match v {
            toml::Value::String(s) => s.clone(),
            toml::Value::Integer(i) => i.to_string(),
            toml::Value::Float(f) => f.to_string(),
            other => bail!("config: unsupported value for {flag}: {other}"),
        })
    };
    Ok(match value {
        toml::Value::Boolean(true) => vec![format!("--{flag}")],
        toml::Value::Boolean(false) => Vec::new(),
        toml::Value::Array(items) => {
            let parts = items.iter().map(scalar).collect::<anyhow::Result<Vec<_>>>()?;
            vec![format!("--{flag}"), parts.join(",")]
        }
        v => vec![format!("--{flag}"), scalar(v)?],
    })
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Prepare(a) => prepare(a),
        Command::TrainEmbeddings(a) => train_embeddings(a),
        Command::Train(a) => train(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Predict(a) => predict(a),
        Command::ScoreBatch(a) => score_batch(a),
        Command::InspectModel(a) => {
            print!("{}", artifact::inspect(&a.model)?);
            Ok(())
        }
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let catalog = gen_catalog(a.teams, a.stages, a.items_per_cell, a.seed)?;
    let params = GenParams {
        n_users: a.users,
        min_orders: a.min_orders,
        max_orders: a.max_orders,
        p_adv: a.p_adv,
        p_switch: a.p_switch,
        views_per_order: a.views_per_order,
        seed: a.seed,
    };
    let histories = gen_histories(&catalog, &params)?;
    write_dataset(&a.out, &catalog, &histories)?;
    eprintln!(
        "wrote {} items, {} orders, {} views to {}",
        catalog.n_items(),
        histories.orders.len(),
        histories.views.len(),
        a.out.display()
    );
    Ok(())
}

fn prepare(a: PrepareArgs) -> anyhow::Result<()> {
    let cfg = CorpusConfig {
        seq_len: a.seq_len,
        cutoff_time: a.cutoff,
        tie_break_seed: a.seed,
    };
    cfg.validate()?;
    let orders = parse_orders(&a.orders, a.cutoff)?;
    let prepared = pipeline::prepare(&orders, &cfg)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    artifact::save_vocab(&prepared.vocab, a.out.join(VOCAB_FILE))?;
    artifact::save_windows(&prepared.windows, a.out.join(WINDOWS_FILE))?;
    write(&a.out.join("sequences.tsv"), &artifact::sequences_to_string(&prepared.sequences))?;
    if let Some(views) = &a.views {
        let seqs = group_ordered(&parse_orders(views, a.cutoff)?, &cfg)?;
        write(&a.out.join("view_sequences.tsv"), &artifact::sequences_to_string(&seqs))?;
    }
    eprintln!(
        "{} users, {} items, {} output items, {} windows ({} dropped)",
        prepared.sequences.len(),
        prepared.vocab.n_items(),
        prepared.vocab.n_outputs(),
        prepared.windows.len(),
        prepared.dropped
    );
    Ok(())
}

fn train_embeddings(a: TrainEmbeddingsArgs) -> anyhow::Result<()> {
    let cfg = Word2VecConfig {
        window: a.window,
        dim: a.dim,
        negatives: a.negatives,
        epochs: a.epochs,
        initial_lr: a.lr,
        min_count: a.min_count,
        seed: a.seed,
    };
    let corpus = CorpusConfig {
        tie_break_seed: a.tie_seed,
        ..Default::default()
    };
    let seqs = group_ordered(&parse_orders(&a.views, None)?, &corpus)?;
    let model = train_word2vec(&seqs, &cfg)?;
    artifact::save_embeddings(&model, &a.out)?;
    eprintln!("embedded {} items in {} dimensions", model.items().len(), model.dim());
    Ok(())
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let vocab = artifact::load_vocab(a.windows.join(VOCAB_FILE))?;
    let windows = artifact::load_windows(a.windows.join(WINDOWS_FILE))?;
    let first = windows.first().ok_or_else(|| anyhow!("no windows in {}", a.windows.display()))?;
    let w2v = artifact::load_embeddings(&a.embeddings)?;
    let model_cfg = ModelConfig {
        seq_len_in: first.inputs.len(),
        feature_dim: feature_dim(w2v.dim()),
        hidden1: a.hidden1,
        hidden2: a.hidden2,
        n_outputs: vocab.n_outputs(),
        seed: a.seed,
    };
    let train_cfg = TrainConfig {
        batch_size: a.batch,
        epochs: a.epochs,
        shuffle_seed: a.seed,
        validation_fraction: a.val_frac,
        checkpoint_every: a.checkpoint_every,
        adam: AdamConfig {
            lr: a.lr,
            ..Default::default()
        },
    };
    println!("epoch\ttrain_loss\tval_loss\tseconds");
    let hooks = TrainHooks {
        on_epoch: Some(Box::new(|epoch, report| {
            // Line 0 of the rendered report is its header.
            if let Some(line) = report.to_lines().lines().nth(epoch) {
                let mut stdout = std::io::stdout().lock();
                let _ = writeln!(stdout, "{line}");
                let _ = stdout.flush();
            }
        })),
        checkpoint_path: Some(a.out.clone()),
    };
    let (artifact, report) = train_with_hooks(&windows, &vocab, &w2v, &model_cfg, &train_cfg, hooks)?;
    artifact.save(&a.out)?;
    let report_path = a.report.unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".report.tsv");
        PathBuf::from(p)
    });
    write(&report_path, &report.to_lines())?;
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> anyhow::Result<()> {
    let predictor = Predictor::load(&a.model)?;
    let windows = artifact::load_windows(a.windows.join(WINDOWS_FILE))?;
    let windows = if a.all {
        windows
    } else {
        let held_out = held_out_windows(&windows, predictor.artifact());
        if held_out.is_empty() {
            bail!("the model held out no users; pass --all to evaluate every window");
        }
        held_out
    };
    let cfg = EvalConfig {
        k_list: a.k,
        baseline_seed: a.seed,
        exact_wilcoxon_max_n: a.exact_wilcoxon_max_n,
    };
    let report = evaluate(&predictor, &windows, &cfg)?.to_json();
    print!("{report}");
    if let Some(out) = &a.out {
        write(out, &report)?;
    }
    Ok(())
}

fn predict(a: PredictArgs) -> anyhow::Result<()> {
    let predictor = Predictor::load(&a.model)?;
    let history = match (a.seed_item, a.history) {
        (Some(seed), _) => vec![seed],
        (None, Some(h)) => h,
        (None, None) => unreachable!("clap requires one input"),
    };
    for step in predictor.rollout(&history, a.horizon, a.k)? {
        println!("{}", format_top_k(&step));
    }
    Ok(())
}

fn score_batch(a: ScoreBatchArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.requests).with_context(|| format!("reading {}", a.requests.display()))?;
    let requests = parse_requests(&text)?;
    let (results, stats) = BatchScorer::new(&a.model, a.workers)?.score(&requests, a.k)?;
    write(&a.out, &format_results(&results))?;
    eprintln!(
        "scored {} requests; rows per worker {:?}; loads per worker {:?}",
        results.len(),
        stats.rows_per_worker,
        stats.loads_per_worker
    );
    Ok(())
}
