//! Command-line surface: flag parsing and the per-command pipelines gluing
//! the data, train, infer, and eval modules together.

pub mod config;

use std::fmt::Write as _;
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::data::{
    self, read_bundle, write_bundle, Bundle, DatasetSplit, InteractionMatrix, NoiseMode,
    Provenance,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport};
use crate::flowcore::StateSpace;
use crate::infer::{infer, recommend_topk};
use crate::model::{load_checkpoint, save_checkpoint};
use crate::prior::{PriorKind, PriorSpec};
use crate::train::{fit, TrainLog};
use crate::util::{atomic_write, format_sig, sha256_file, sha256_hex};

pub use config::{load_config, RunConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.fcf";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const ABLATION_FILE: &str = "ablation.csv";
pub const NOISE_FILE: &str = "noise.csv";

/// Users per inference chunk when serving recommendations.
const RECOMMEND_CHUNK: usize = 512;

#[derive(Debug, Parser)]
#[command(
    name = "flowcf",
    version,
    about = "Flow-matching collaborative filtering: prepare data, train, evaluate, recommend"
)]
pub struct Cli {
    /// TOML run configuration; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Random seed, overriding the configured one.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (FLOWREC_THREADS is the fallback, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Discrete,
    Continuous,
}

impl From<ModeArg> for StateSpace {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Discrete => StateSpace::Discrete,
            ModeArg::Continuous => StateSpace::Continuous,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PriorArg {
    #[value(name = "behavior_guided", alias = "behavior-guided")]
    BehaviorGuided,
    Uniform,
    Gaussian,
    #[value(name = "random_binary", alias = "random-binary")]
    RandomBinary,
}

impl From<PriorArg> for PriorKind {
    fn from(p: PriorArg) -> Self {
        match p {
            PriorArg::BehaviorGuided => PriorKind::BehaviorGuided,
            PriorArg::Uniform => PriorKind::Uniform,
            PriorArg::Gaussian => PriorKind::Gaussian,
            PriorArg::RandomBinary => PriorKind::RandomBinary,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NoiseArg {
    Natural,
    Random,
}

impl From<NoiseArg> for NoiseMode {
    fn from(m: NoiseArg) -> Self {
        match m {
            NoiseArg::Natural => NoiseMode::Natural,
            NoiseArg::Random => NoiseMode::Random,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse ratings, binarize, k-core filter, split, and write a bundle.
    Prepare {
        /// Raw ratings file; overrides the configured data.input.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Bundle directory to create.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a prepared bundle, keeping the best validation checkpoint.
    Train {
        #[arg(long)]
        bundle: PathBuf,
        /// Run directory for the checkpoint and training log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint with all-ranking Recall@K and NDCG@K.
    Evaluate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Held-out side to score against.
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        /// Feed train ∪ validation rows as the observed input (test only).
        #[arg(long)]
        include_val: bool,
        /// Metrics JSON path; the table prints to stdout regardless.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print top-K recommendations for chosen users.
    Recommend {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(short, long, default_value_t = 10)]
        k: usize,
        /// Comma-separated user tokens.
        #[arg(long, value_delimiter = ',')]
        users: Option<Vec<String>>,
        /// Recommend for every user in the bundle.
        #[arg(long)]
        all: bool,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every prior/state-space combination listed.
    Ablate {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',', required = true)]
        priors: Vec<PriorArg>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "discrete")]
        modes: Vec<ModeArg>,
        /// Directory for the per-variant metric table.
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrain under injected false positives and report test metrics.
    Noise {
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long, value_enum)]
        mode: NoiseArg,
        #[arg(long, value_delimiter = ',', required = true)]
        proportions: Vec<f64>,
        /// Directory for the per-proportion metric table.
        #[arg(long)]
        out: PathBuf,
    },
    /// Reshape training logs into a tidy CSV for plotting.
    Curves {
        /// One or more training-log CSVs.
        #[arg(long, value_delimiter = ',', required = true)]
        logs: Vec<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var("FLOWREC_THREADS") {
            Ok(v) => Some(v.parse().map_err(|_| {
                Error::Config(format!("FLOWREC_THREADS must be a positive integer, got {v:?}"))
            })?),
            Err(_) => None,
        },
    };
    let Some(n) = n else { return Ok(()) };
    if n == 0 {
        return Err(Error::Config("thread count must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(())
}

fn require_exists(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "{what} {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads(cli.threads)?;
    let mut config = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    match cli.command {
        Command::Prepare { input, out } => cmd_prepare(&config, input.as_deref(), &out),
        Command::Train { bundle, out } => cmd_train(&config, &bundle, &out),
        Command::Evaluate {
            bundle,
            checkpoint,
            split,
            include_val,
            out,
        } => cmd_evaluate(&config, &bundle, &checkpoint, split, include_val, out.as_deref()),
        Command::Recommend {
            bundle,
            checkpoint,
            k,
            users,
            all,
            out,
        } => cmd_recommend(&config, &bundle, &checkpoint, k, users, all, out.as_deref()),
        Command::Ablate {
            bundle,
            priors,
            modes,
            out,
        } => cmd_ablate(&config, &bundle, &priors, &modes, &out),
        Command::Noise {
            bundle,
            mode,
            proportions,
            out,
        } => cmd_noise(&config, &bundle, mode.into(), &proportions, &out),
        Command::Curves { logs, out } => cmd_curves(&logs, out.as_deref()),
    }
}

/// Raw ratings to bundle: parse, binarize at the threshold, k-core filter,
/// split per user, compute train frequencies, record provenance.
pub fn cmd_prepare(config: &RunConfig, input_flag: Option<&Path>, out: &Path) -> Result<()> {
    let input = input_flag
        .or(config.data.input.as_deref())
        .ok_or_else(|| Error::Config("no input file given (flag --input or data.input)".into()))?;
    require_exists(input, "input file")?;

    let input_sha256 = sha256_file(input)?;
    let config_sha256 = sha256_hex(
        &serde_json::to_vec(config).map_err(|e| Error::Config(format!("config hash: {e}")))?,
    );

    let reader = BufReader::new(File::open(input)?);
    let records = data::parse_ratings(reader, &config.data.delimiter, config.data.skip_header)?;
    let (kept, discarded_tokens) = data::partition_by_threshold(&records, config.data.threshold);
    let filtered = data::kcore_filter(&kept, config.data.k_core);
    if filtered.is_empty() {
        return Err(Error::Data(format!(
            "no interactions survive {}-core filtering",
            config.data.k_core
        )));
    }
    let [a, b, c] = config.data.ratios;
    let split = data::split(&filtered, (a, b, c), config.seed)?;
    let frequencies = data::item_frequencies(&split.train);

    // Sub-threshold pairs are natural-noise candidates only if both their
    // endpoints survived filtering.
    let user_index = &split.train.user_index;
    let item_index = &split.train.item_index;
    let discarded: Vec<(u32, u32)> = discarded_tokens
        .iter()
        .filter_map(|(u, i)| Some((user_index.index_of(u)?, item_index.index_of(i)?)))
        .collect();

    let provenance = Provenance {
        input_sha256,
        config_sha256,
        seed: config.seed,
        n_users: split.train.n_users,
        n_items: split.train.n_items,
        nnz_train: split.train.nnz(),
        nnz_validation: split.validation.nnz(),
        nnz_test: split.test.nnz(),
    };
    let bundle = Bundle {
        split,
        frequencies,
        discarded,
        provenance: provenance.clone(),
    };
    write_bundle(out, &bundle)?;
    println!(
        "bundle {}: {} users, {} items, {} interactions (train {}, validation {}, test {})",
        out.display(),
        provenance.n_users,
        provenance.n_items,
        provenance.nnz_train + provenance.nnz_validation + provenance.nnz_test,
        provenance.nnz_train,
        provenance.nnz_validation,
        provenance.nnz_test,
    );
    Ok(())
}

fn load_bundle(path: &Path) -> Result<Bundle> {
    require_exists(path, "bundle directory")?;
    read_bundle(path)
}

/// Trains on the bundle and writes the best checkpoint plus the log.
pub fn cmd_train(config: &RunConfig, bundle_dir: &Path, out: &Path) -> Result<()> {
    let bundle = load_bundle(bundle_dir)?;
    let n_items = bundle.split.train.n_items;
    let prior = config.prior_spec(n_items, Some(bundle.frequencies.clone()))?;
    let model_config = config.model_config(n_items);
    let train_config = config.train_config(prior);
    let result = fit(&bundle.split, &model_config, &train_config)?;

    std::fs::create_dir_all(out)?;
    save_checkpoint(&result.model, &result.state, &out.join(CHECKPOINT_FILE))?;
    atomic_write(&out.join(TRAIN_LOG_FILE), result.log.to_csv().as_bytes())?;
    match (result.best_epoch, result.best_ndcg10) {
        (Some(e), Some(nd)) => println!(
            "trained {} epochs; best validation NDCG@10 {:.4} at epoch {e}",
            result.log.records.len(),
            nd
        ),
        _ => println!(
            "trained {} epochs; validation never ran, kept the final model",
            result.log.records.len()
        ),
    }
    Ok(())
}

fn evaluation_inputs(
    split: &DatasetSplit,
    which: SplitArg,
    include_val: bool,
) -> Result<(InteractionMatrix, InteractionMatrix)> {
    match which {
        SplitArg::Val => {
            if include_val {
                return Err(Error::Config(
                    "--include-val only applies to test evaluation".into(),
                ));
            }
            Ok((split.train.clone(), split.validation.clone()))
        }
        SplitArg::Test => {
            let input = if include_val {
                split.train.union(&split.validation)?
            } else {
                split.train.clone()
            };
            Ok((input, split.test.clone()))
        }
    }
}

pub fn cmd_evaluate(
    config: &RunConfig,
    bundle_dir: &Path,
    checkpoint: &Path,
    split: SplitArg,
    include_val: bool,
    out: Option<&Path>,
) -> Result<()> {
    let bundle = load_bundle(bundle_dir)?;
    require_exists(checkpoint, "checkpoint")?;
    let (model, _state) = load_checkpoint(checkpoint)?;
    let infer_cfg = config.infer_config(model.config.n_steps, config.prior.state_space)?;
    let (input, held_out) = evaluation_inputs(&bundle.split, split, include_val)?;
    let report = evaluate(&model, &infer_cfg, &input, &held_out, &config.eval.ks)?;
    print!("{}", report.to_table());
    if let Some(path) = out {
        write_metrics_json(path, &report)?;
    }
    Ok(())
}

fn write_metrics_json(path: &Path, report: &MetricReport) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(report)
        .map_err(|e| Error::Data(format!("metrics serialization: {e}")))?;
    json.push(b'\n');
    atomic_write(path, &json)
}

/// Ranks unseen items for the requested users. The model sees each user's
/// train row; everything already interacted with in any split is excluded
/// from the ranking.
pub fn cmd_recommend(
    config: &RunConfig,
    bundle_dir: &Path,
    checkpoint: &Path,
    k: usize,
    users: Option<Vec<String>>,
    all: bool,
    out: Option<&Path>,
) -> Result<()> {
    if k == 0 {
        return Err(Error::Config("k must be positive".into()));
    }
    let bundle = load_bundle(bundle_dir)?;
    require_exists(checkpoint, "checkpoint")?;
    let (model, _state) = load_checkpoint(checkpoint)?;
    if model.n_items() != bundle.split.train.n_items {
        return Err(Error::Shape(format!(
            "checkpoint covers {} items, bundle has {}",
            model.n_items(),
            bundle.split.train.n_items
        )));
    }
    let user_index = bundle.split.train.user_index.clone();
    let selected: Vec<usize> = match (users, all) {
        (Some(tokens), false) => tokens
            .iter()
            .map(|t| {
                user_index
                    .index_of(t)
                    .map(|u| u as usize)
                    .ok_or_else(|| Error::Config(format!("unknown user token {t:?}")))
            })
            .collect::<Result<_>>()?,
        (None, true) => (0..bundle.split.train.n_users).collect(),
        _ => {
            return Err(Error::Config(
                "pass either --users tokens or --all, not both".into(),
            ))
        }
    };

    let infer_cfg = config.infer_config(model.config.n_steps, config.prior.state_space)?;
    let observed = bundle
        .split
        .train
        .union(&bundle.split.validation)?
        .union(&bundle.split.test)?;
    let item_index = bundle.split.train.item_index.clone();
    let mut text = String::new();
    for chunk in selected.chunks(RECOMMEND_CHUNK) {
        let x = bundle.split.train.to_dense_rows::<f32>(chunk);
        let scores = infer(&model, &x.view(), &infer_cfg)?;
        let ranked = recommend_topk(&scores, &observed, chunk, k)?;
        for (slot, &u) in chunk.iter().enumerate() {
            write!(text, "{}\t", user_index.token(u as u32)).unwrap();
            for (pos, (item, score)) in ranked[slot].iter().enumerate() {
                if pos > 0 {
                    text.push_str(", ");
                }
                write!(
                    text,
                    "{}:{}",
                    item_index.token(*item),
                    format_sig(*score as f64, 6)
                )
                .unwrap();
            }
            text.push('\n');
        }
    }
    match out {
        Some(path) => atomic_write(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn metrics_columns(ks: &[usize]) -> Vec<String> {
    let mut cols = Vec::with_capacity(2 * ks.len() + 1);
    for &k in ks {
        cols.push(format!("recall{k}"));
    }
    for &k in ks {
        cols.push(format!("ndcg{k}"));
    }
    cols.push("users".into());
    cols
}

fn metrics_values(report: &MetricReport, ks: &[usize]) -> Vec<String> {
    let mut vals = Vec::with_capacity(2 * ks.len() + 1);
    for &k in ks {
        vals.push(match report.recall.get(&k) {
            Some(v) => format!("{v:.4}"),
            None => "n/a".into(),
        });
    }
    for &k in ks {
        vals.push(match report.ndcg.get(&k) {
            Some(v) => format!("{v:.4}"),
            None => "n/a".into(),
        });
    }
    vals.push(report.n_users_evaluated.to_string());
    vals
}

fn render_table(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(String::len).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let mut emit = |cells: &[String]| {
        for (i, (cell, w)) in cells.iter().zip(&widths).enumerate() {
            if i > 0 {
                out.push_str("  ");
            }
            write!(out, "{cell:>w$}").unwrap();
        }
        out.push('\n');
    };
    emit(header);
    for row in rows {
        emit(row);
    }
    out
}

fn write_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let mut text = header.join(",");
    text.push('\n');
    for row in rows {
        text.push_str(&row.join(","));
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

/// Trains one model per (prior, state-space) combination on the same seed
/// and reports test metrics side by side. Invalid combinations are skipped
/// with a note.
pub fn cmd_ablate(
    config: &RunConfig,
    bundle_dir: &Path,
    priors: &[PriorArg],
    modes: &[ModeArg],
    out: &Path,
) -> Result<()> {
    let bundle = load_bundle(bundle_dir)?;
    let n_items = bundle.split.train.n_items;
    let mut header = vec!["prior".to_string(), "mode".to_string()];
    header.extend(metrics_columns(&config.eval.ks));
    let mut rows = Vec::new();
    for &prior_arg in priors {
        for &mode_arg in modes {
            let kind: PriorKind = prior_arg.into();
            let mode: StateSpace = mode_arg.into();
            let prior = PriorSpec {
                kind,
                state_space: mode,
                n_items,
                frequencies: match kind {
                    PriorKind::BehaviorGuided => Some(bundle.frequencies.clone()),
                    _ => None,
                },
            };
            if let Err(e) = prior.validate() {
                eprintln!("skipping {kind}/{mode}: {e}");
                continue;
            }
            let model_config = config.model_config(n_items);
            let train_config = config.train_config(prior);
            let result = fit(&bundle.split, &model_config, &train_config)?;
            let infer_cfg = config.infer_config(config.flow.n_steps, mode)?;
            let report = evaluate(
                &result.model,
                &infer_cfg,
                &bundle.split.train,
                &bundle.split.test,
                &config.eval.ks,
            )?;
            let mut row = vec![kind.to_string(), mode.to_string()];
            row.extend(metrics_values(&report, &config.eval.ks));
            rows.push(row);
        }
    }
    if rows.is_empty() {
        return Err(Error::Config(
            "no valid prior/mode combination requested".into(),
        ));
    }
    std::fs::create_dir_all(out)?;
    write_csv(&out.join(ABLATION_FILE), &header, &rows)?;
    print!("{}", render_table(&header, &rows));
    Ok(())
}

/// Retrains with false positives injected into train+validation at each
/// proportion and reports metrics against the untouched test split.
pub fn cmd_noise(
    config: &RunConfig,
    bundle_dir: &Path,
    mode: NoiseMode,
    proportions: &[f64],
    out: &Path,
) -> Result<()> {
    let bundle = load_bundle(bundle_dir)?;
    let n_items = bundle.split.train.n_items;
    let mut header = vec!["proportion".to_string()];
    header.extend(metrics_columns(&config.eval.ks));
    let mut rows = Vec::new();
    for &p in proportions {
        let noised = data::inject_noise(&bundle.split, mode, p, &bundle.discarded, config.seed)?;
        let frequencies = data::item_frequencies(&noised.train);
        let prior = config.prior_spec(n_items, Some(frequencies))?;
        let model_config = config.model_config(n_items);
        let train_config = config.train_config(prior);
        let result = fit(&noised, &model_config, &train_config)?;
        let infer_cfg = config.infer_config(config.flow.n_steps, config.prior.state_space)?;
        let report = evaluate(
            &result.model,
            &infer_cfg,
            &noised.train,
            &noised.test,
            &config.eval.ks,
        )?;
        let mut row = vec![format!("{p}")];
        row.extend(metrics_values(&report, &config.eval.ks));
        rows.push(row);
    }
    std::fs::create_dir_all(out)?;
    write_csv(&out.join(NOISE_FILE), &header, &rows)?;
    print!("{}", render_table(&header, &rows));
    Ok(())
}

/// Tidy long-format CSV (run,epoch,metric,value) from training logs, one
/// row per present metric per epoch.
pub fn cmd_curves(logs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut text = String::from("run,epoch,metric,value\n");
    for path in logs {
        require_exists(path, "training log")?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let log = TrainLog::from_csv(&std::fs::read_to_string(path)?)?;
        for r in &log.records {
            let mut push = |metric: &str, value: f64| {
                writeln!(text, "{label},{},{metric},{value}", r.epoch).unwrap();
            };
            push("loss", r.loss);
            if let Some(v) = r.recall10 {
                push("recall10", v);
            }
            if let Some(v) = r.recall20 {
                push("recall20", v);
            }
            if let Some(v) = r.ndcg10 {
                push("ndcg10", v);
            }
            if let Some(v) = r.ndcg20 {
                push("ndcg20", v);
            }
            push("seconds", r.seconds);
        }
    }
    match out {
        Some(path) => atomic_write(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}
