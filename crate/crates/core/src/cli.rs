//! The `lwgcn` command line.
//!
//! Exit codes: 0 success, 1 configuration error, 2 dataset error,
//! 3 numeric divergence, 4 selftest failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};

use crate::artifacts::{dataset_hash, MetricsWriter, OutputPaths, RunManifest, Snapshot};
use crate::config::TrainConfig;
use crate::error::Error;
use crate::graph::{load_dataset, DatasetFormat, RawDataset, SyntheticSpec};
use crate::sampler::Strategy;
use crate::selftest::{self, SelftestOptions};
use crate::trainer::{benchmark, evaluate, train, TrainingData, BENCH_HEADER};
use crate::variance::GradientForm;

pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DATASET: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;
pub const EXIT_SELFTEST: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "lwgcn", version, about = "GCN training with adaptive layer-wise sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics.csv, model.snapshot and manifest.json.
    Train(TrainArgs),
    /// Accuracy of a saved snapshot on a dataset split.
    Eval(EvalArgs),
    /// Dataset utilities.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Time a fixed number of epochs per sampler and print a CSV table.
    Bench(BenchArgs),
    /// Run the built-in oracle checks.
    Selftest(SelftestArgs),
}

/// Flags shared by `train` and `bench`; each one overrides the config file.
#[derive(Debug, Args)]
struct CommonArgs {
    /// Dataset directory with edges.tsv, features.csv, labels.txt and splits.json.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write 0 in the timing column so repeated runs give identical files.
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    skip: bool,
    #[arg(long)]
    two_hop: bool,
    #[arg(long)]
    attention: bool,
    /// Variance penalty weight.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    layer_size: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// One of full, node_wise, iid, adaptive.
    #[arg(long)]
    sampler: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Epochs without validation improvement before stopping (0 disables).
    #[arg(long)]
    early_stop: Option<usize>,
    /// Output directory; defaults to ./runs/<dataset>-<sampler>-seed<seed>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Repeat the run recorded in a manifest.json.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    snapshot: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    split: Split,
    /// Accepted for uniformity; evaluation is exact and draws nothing.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
}

#[derive(Debug, Subcommand)]
enum DatasetCommand {
    /// Check every file-format and graph invariant.
    Validate { dir: PathBuf },
    /// Write a synthetic dataset with planted classes.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// `small` (300 nodes) or `cora` (Cora-sized).
        #[arg(long, default_value = "small")]
        preset: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Comma-separated sampler ids.
    #[arg(long, default_value = "full,node_wise,iid,adaptive")]
    samplers: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SelftestArgs {
    /// Run only checks whose group or name contains this string.
    #[arg(long)]
    filter: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Omit timings from the table.
    #[arg(long)]
    deterministic: bool,
    /// Negative control: flip the sign of the closed-form variance gradient.
    #[arg(long, hide = true)]
    mutate_variance_gradient: bool,
}

/// A failure with the exit code it maps to.
struct Failure {
    code: i32,
    message: String,
}

impl Failure {
    fn config(e: impl ToString) -> Self {
        Self {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }

    fn dataset(e: impl ToString) -> Self {
        Self {
            code: EXIT_DATASET,
            message: e.to_string(),
        }
    }

    /// Code for an error raised while training or evaluating.
    fn from_run(e: Error) -> Self {
        let code = match e {
            Error::Numeric { .. } | Error::Support(_) => EXIT_NUMERIC,
            Error::Validation(_) | Error::Parse { .. } => EXIT_DATASET,
            _ => EXIT_CONFIG,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = std::result::Result<i32, Failure>;

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { 0 };
        }
    };
    let outcome = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Dataset(c) => cmd_dataset(c),
        Command::Bench(a) => cmd_bench(a),
        Command::Selftest(a) => Ok(cmd_selftest(a)),
    };
    match outcome {
        Ok(code) => code,
        Err(f) => {
            error!("{}", f.message);
            f.code
        }
    }
}

fn parse_sampler(id: &str) -> std::result::Result<Strategy, Failure> {
    Strategy::from_str(id.trim()).map_err(Failure::config)
}

/// Config file (if any) overlaid with command-line flags.
fn resolve_config(common: &CommonArgs, base: Option<TrainConfig>) -> std::result::Result<TrainConfig, Failure> {
    let mut c = match (base, &common.config) {
        (Some(c), _) => c,
        (None, Some(path)) => TrainConfig::load(path).map_err(Failure::config)?,
        (None, None) => TrainConfig::default(),
    };
    if let Some(d) = &common.dataset {
        c.dataset = Some(d.clone());
    }
    if let Some(s) = common.seed {
        c.seed = s;
    }
    c.deterministic |= common.deterministic;
    c.skip |= common.skip;
    c.two_hop |= common.two_hop;
    c.attention |= common.attention;
    if common.lambda.is_some() {
        c.lambda = common.lambda;
    }
    if common.layer_size.is_some() {
        c.layer_size = common.layer_size;
    }
    if let Some(b) = common.batch_size {
        c.batch_size = b;
    }
    if let Some(lr) = common.learning_rate {
        c.learning_rate = lr;
    }
    Ok(c)
}

fn load_data(config: &TrainConfig) -> std::result::Result<(PathBuf, RawDataset, TrainingData), Failure> {
    let dir = config
        .dataset
        .clone()
        .ok_or_else(|| Failure::config("no dataset given (use --dataset or the config key)"))?;
    let raw = load_dataset(&dir, DatasetFormat::Directory).map_err(Failure::dataset)?;
    let data = TrainingData::prepare(&raw, config).map_err(|e| match e {
        Error::Config(_) => Failure::config(e),
        e => Failure::dataset(e),
    })?;
    Ok((dir, raw, data))
}

fn default_out_dir(dataset: &Path, config: &TrainConfig) -> PathBuf {
    let name = dataset
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "dataset".into());
    PathBuf::from("runs").join(format!("{name}-{}-seed{}", config.sampler, config.seed))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let recorded = match &a.manifest {
        Some(path) => Some(RunManifest::load(path).map_err(Failure::config)?),
        None => None,
    };
    let mut config = resolve_config(&a.common, recorded.as_ref().map(|m| m.config.clone()))?;
    if let Some(id) = &a.sampler {
        config.sampler = parse_sampler(id)?;
    }
    if let Some(e) = a.epochs {
        config.max_epochs = e;
    }
    if let Some(w) = a.early_stop {
        config.early_stop_window = w;
    }
    config.validate().map_err(Failure::config)?;

    let (dir, _raw, data) = load_data(&config)?;
    let hash = dataset_hash(&dir).map_err(Failure::dataset)?;
    if let Some(m) = &recorded {
        if m.dataset_hash != hash {
            return Err(Failure::dataset(format!(
                "dataset content differs from the manifest ({} vs {})",
                hash, m.dataset_hash
            )));
        }
    }

    let out = a.out.clone().unwrap_or_else(|| default_out_dir(&dir, &config));
    fs::create_dir_all(&out).map_err(|e| Failure::config(Error::io(&out, e)))?;
    let paths = OutputPaths::in_dir(&out);
    let manifest = RunManifest {
        config: config.clone(),
        dataset_hash: hash,
        seed: config.seed,
        outputs: paths.clone(),
    };
    manifest.save(&paths.manifest).map_err(Failure::config)?;

    info!(
        "training {} on {} ({} nodes), seed {}",
        config.sampler,
        dir.display(),
        data.num_nodes(),
        config.seed
    );
    let mut metrics = MetricsWriter::create(&paths.metrics).map_err(Failure::config)?;
    let outcome = train(&config, &data, &mut |r| {
        info!(
            "epoch {:>3}  loss {:.4}  var {:.4e}  val {:.4}  test {:.4}",
            r.epoch, r.loss_c, r.loss_var, r.val_acc, r.test_acc
        );
        metrics.write(r)
    })
    .map_err(Failure::from_run)?;

    Snapshot::new(
        &config,
        outcome.params.clone(),
        outcome.best_epoch,
        outcome.best_val_acc,
    )
    .save(&paths.snapshot)
    .map_err(Failure::config)?;
    let test_at_best = outcome
        .history
        .iter()
        .find(|r| r.epoch == outcome.best_epoch)
        .map_or(f64::NAN, |r| r.test_acc);
    println!(
        "best epoch {}  val_acc {:.4}  test_acc {:.4}  -> {}",
        outcome.best_epoch,
        outcome.best_val_acc,
        test_at_best,
        out.display()
    );
    Ok(0)
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let snap = Snapshot::load(&a.snapshot).map_err(Failure::config)?;
    let config = TrainConfig {
        dataset: Some(a.dataset.clone()),
        ..snap.config.clone()
    };
    let (_, _, data) = load_data(&config)?;
    if data.inputs.feature_dim() != snap.feature_dim || data.num_classes != snap.num_classes {
        return Err(Failure::dataset(format!(
            "snapshot expects {} features and {} classes, dataset has {} and {}",
            snap.feature_dim,
            snap.num_classes,
            data.inputs.feature_dim(),
            data.num_classes
        )));
    }
    let idx = match a.split {
        Split::Train => &data.splits.train,
        Split::Val => &data.splits.val,
        Split::Test => &data.splits.test,
    };
    let options = config.forward_options(data.num_nodes());
    let acc = evaluate(&snap.params, &data.inputs, &options, &data.labels, idx).map_err(Failure::from_run)?;
    println!("{:?} accuracy {acc:.4} over {} nodes", a.split, idx.len());
    Ok(0)
}

fn cmd_dataset(c: DatasetCommand) -> CmdResult {
    match c {
        DatasetCommand::Validate { dir } => {
            let raw = load_dataset(&dir, DatasetFormat::Directory).map_err(Failure::dataset)?;
            println!(
                "ok: {} nodes, {} undirected edges, {} features, {} classes, splits {}/{}/{}",
                raw.num_nodes,
                raw.unique_edges().len(),
                raw.feature_dim(),
                raw.num_classes,
                raw.splits.train.len(),
                raw.splits.val.len(),
                raw.splits.test.len()
            );
            Ok(0)
        }
        DatasetCommand::Synth { out, preset, seed } => {
            let spec = match preset.as_str() {
                "small" => SyntheticSpec {
                    seed,
                    ..Default::default()
                },
                "cora" => SyntheticSpec::cora_like(seed),
                other => {
                    return Err(Failure::config(format!(
                        "unknown preset {other:?} (expected small or cora)"
                    )))
                }
            };
            let raw = spec.generate().map_err(Failure::config)?;
            fs::create_dir_all(&out).map_err(|e| Failure::config(Error::io(&out, e)))?;
            raw.save(&out).map_err(Failure::config)?;
            println!("wrote {} nodes to {}", raw.num_nodes, out.display());
            Ok(0)
        }
    }
}

fn cmd_bench(a: BenchArgs) -> CmdResult {
    let config = resolve_config(&a.common, None)?;
    config.validate().map_err(Failure::config)?;
    let samplers = a
        .samplers
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(parse_sampler)
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if samplers.is_empty() {
        return Err(Failure::config("no samplers requested"));
    }
    let (_, _, data) = load_data(&config)?;
    let rows = benchmark(&config, &data, &samplers, a.epochs).map_err(Failure::from_run)?;
    let mut table = format!("{BENCH_HEADER}\n");
    for r in &rows {
        table.push_str(&r.csv_row());
        table.push('\n');
    }
    print!("{table}");
    if let Some(path) = &a.out {
        fs::write(path, &table).map_err(|e| Failure::config(Error::io(path, e)))?;
    }
    Ok(0)
}

fn cmd_selftest(a: SelftestArgs) -> i32 {
    let mut options = SelftestOptions {
        filter: a.filter,
        ..Default::default()
    };
    if let Some(s) = a.seed {
        options.seed = s;
    }
    if a.mutate_variance_gradient {
        warn!("variance gradient sign flipped; the gradient check is expected to fail");
        options.gradient_form = GradientForm::SignFlipped;
    }
    let results = selftest::run(&options);
    if results.is_empty() {
        println!("no checks match the filter");
        return EXIT_SELFTEST;
    }
    let width = results
        .iter()
        .map(|r| r.group.len() + r.name.len() + 1)
        .max()
        .unwrap_or(0);
    for r in &results {
        let label = format!("{}/{}", r.group, r.name);
        let status = if r.passed { "PASS" } else { "FAIL" };
        if a.deterministic {
            println!("{status}  {label:<width$}  {}", r.detail);
        } else {
            println!("{status}  {label:<width$}  {:>7.2}s  {}", r.seconds, r.detail);
        }
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    println!("{} checks, {} failed", results.len(), failed);
    if failed == 0 {
        0
    } else {
        EXIT_SELFTEST
    }
}
