//! `stlg`: synthetic data generation, training, evaluation and the ablation
//! grid for semi-supervised temporal language grounding.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use stlg_core::ablation::{ablation_csv, ablation_seeds, ablation_text, run_rows, ABLATION_ROWS, ABLATION_SEEDS};
use stlg_core::checkpoint::Checkpoint;
use stlg_core::config::TrainConfig;
use stlg_core::dataset::{load_split_with_workers, save_dataset, Dataset, Split, SplitsConfig, MANIFEST_NAME};
use stlg_core::evaluation::evaluate_model;
use stlg_core::model::ModelType;
use stlg_core::trainer::{losses_csv, metrics_csv, train};

const WORKERS_VAR: &str = "STLG_NUM_WORKERS";
const DATASET_MANIFEST: &str = "dataset.toml";

#[derive(Debug, Parser)]
#[command(name = "stlg", version, about = "Semi-supervised temporal language grounding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModelArg {
    Regression,
    Proposal,
}

impl From<ModelArg> for ModelType {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Regression => ModelType::Regression,
            ModelArg::Proposal => ModelType::Proposal,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write synthetic train/val/test splits and a dataset manifest.
    Generate {
        /// Data generation TOML; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Pretrain and run semi-supervised epochs; writes checkpoints and CSVs.
    Train {
        /// Training TOML; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding `train/` and optionally `val/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
    },
    /// Score a checkpoint on a split and write the metric table.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// A split directory, or a directory holding `test/`.
        #[arg(long)]
        data: PathBuf,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the toggle grid over several seeds and write median tables.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding `train/`, `val/` and `test/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// First seed; the grid uses consecutive seeds from here.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum)]
        model: Option<ModelArg>,
        /// Comma-separated 1-based rows; all rows when omitted.
        #[arg(long, value_delimiter = ',')]
        rows: Option<Vec<usize>>,
        #[arg(long, default_value_t = ABLATION_SEEDS)]
        seeds: usize,
    },
}

/// An error with the process exit code it maps to.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

const USAGE: u8 = 2;
const RUNTIME: u8 = 1;

fn usage(error: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: USAGE,
        error: error.into(),
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<stlg_core::Error>() {
            Some(stlg_core::Error::Config(_)) => USAGE,
            _ => RUNTIME,
        };
        Failure { code, error }
    }
}

type CmdResult = Result<(), Failure>;

fn workers() -> Result<usize, Failure> {
    match std::env::var(WORKERS_VAR) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(usage(anyhow!("{WORKERS_VAR} = {v:?} must be a positive integer"))),
        },
    }
}

fn read_input(path: &Path, what: &str) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| usage(anyhow!("cannot read {what} {}: {e}", path.display())))
}

fn load_train_config(path: Option<&Path>, seed: Option<u64>, model: Option<ModelArg>) -> Result<TrainConfig, Failure> {
    let mut config = match path {
        Some(p) => TrainConfig::from_toml_str(&read_input(p, "config")?)
            .map_err(|e| usage(anyhow!("{}: {e}", p.display())))?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(model) = model {
        config.model_type = model.into();
    }
    Ok(config)
}

fn load_data(root: &Path, split: Split, max_len: usize, required: bool) -> Result<Option<Dataset>, Failure> {
    let dir = root.join(split.name());
    if !dir.join(MANIFEST_NAME).exists() {
        if required {
            return Err(usage(anyhow!("{} has no {MANIFEST_NAME}", dir.display())));
        }
        return Ok(None);
    }
    let data = load_split_with_workers(&dir, split, max_len, workers()?).map_err(anyhow::Error::from)?;
    log::info!("loaded {} {} samples ({} labeled)", data.len(), split.name(), data.num_labeled());
    Ok(Some(data))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create {}", dir.display()))
        .map_err(Failure::from)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(Failure::from)
}

fn generate(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CmdResult {
    let mut cfg = match config {
        Some(p) => SplitsConfig::from_toml_str(&read_input(p, "config")?)
            .map_err(|e| usage(anyhow!("{}: {e}", p.display())))?,
        None => SplitsConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let splits = cfg.generate().map_err(anyhow::Error::from)?;
    for data in [&splits.train, &splits.val, &splits.test] {
        let dir = out.join(data.split.name());
        create_dir(&dir)?;
        save_dataset(&dir, data).map_err(anyhow::Error::from)?;
    }
    write(&out.join(DATASET_MANIFEST), &cfg.to_toml())?;
    println!(
        "wrote {} train ({} labeled), {} val and {} test samples to {}",
        splits.train.len(),
        splits.train.num_labeled(),
        splits.val.len(),
        splits.test.len(),
        out.display()
    );
    Ok(())
}

fn train_cmd(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>, model: Option<ModelArg>) -> CmdResult {
    let config = load_train_config(config, seed, model)?;
    let train_data = load_data(data, Split::Train, config.max_len, true)?.expect("required split");
    let val = load_data(data, Split::Val, config.max_len, false)?;
    create_dir(out)?;
    let outcome = train(&config, &train_data, val.as_ref()).map_err(anyhow::Error::from)?;
    let model = &outcome.state.model;
    let save = |name: &str, params| {
        let path = out.join(name);
        Checkpoint::new(&config, model, params)
            .save(&path)
            .map_err(|e| Failure::from(anyhow::Error::from(e)))
    };
    save("best.ckpt", &outcome.best.params)?;
    save("final.ckpt", &outcome.state.student)?;
    write(&out.join("config.toml"), &config.to_toml())?;
    write(&out.join("losses.csv"), &losses_csv(&outcome.history))?;
    write(&out.join("metrics.csv"), &metrics_csv(&outcome.history))?;
    match &outcome.best.metrics {
        Some(m) => println!("best epoch {}: val R@1,IoU=0.5 = {:.2}", outcome.best.epoch, m.primary()),
        None => println!("trained {} epochs without validation data", outcome.history.len()),
    }
    Ok(())
}

fn evaluate_cmd(checkpoint: &Path, data: &Path, out: Option<&Path>) -> CmdResult {
    if !checkpoint.is_file() {
        return Err(usage(anyhow!("checkpoint {} does not exist", checkpoint.display())));
    }
    let ckpt = Checkpoint::load(checkpoint).map_err(anyhow::Error::from)?;
    let (model, params) = ckpt.model().map_err(anyhow::Error::from)?;
    let (dir, split) = if data.join(MANIFEST_NAME).exists() {
        let split = data
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(Split::from_name)
            .unwrap_or(Split::Test);
        (data.to_path_buf(), split)
    } else {
        (data.join(Split::Test.name()), Split::Test)
    };
    if !dir.join(MANIFEST_NAME).exists() {
        return Err(usage(anyhow!("{} has no {MANIFEST_NAME}", dir.display())));
    }
    let dataset = load_split_with_workers(&dir, split, ckpt.config.max_len, workers()?).map_err(anyhow::Error::from)?;
    let metrics = evaluate_model(&model, &params, &dataset, ckpt.config.nms_threshold).map_err(anyhow::Error::from)?;
    print!("{}", metrics.to_text());
    let out_dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    create_dir(&out_dir)?;
    write(&out_dir.join(format!("eval_{}.csv", split.name())), &metrics.to_csv())
}

#[allow(clippy::too_many_arguments)]
fn ablate_cmd(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    seed: Option<u64>,
    model: Option<ModelArg>,
    rows: Option<Vec<usize>>,
    seeds: usize,
) -> CmdResult {
    let config = load_train_config(config, seed, model)?;
    let rows = rows.unwrap_or_else(|| (1..=ABLATION_ROWS.len()).collect());
    if let Some(bad) = rows.iter().find(|r| !(1..=ABLATION_ROWS.len()).contains(*r)) {
        return Err(usage(anyhow!("ablation row {bad} outside 1..={}", ABLATION_ROWS.len())));
    }
    if seeds == 0 {
        return Err(usage(anyhow!("--seeds must be positive")));
    }
    let train_data = load_data(data, Split::Train, config.max_len, true)?.expect("required split");
    let val = load_data(data, Split::Val, config.max_len, false)?;
    let test = load_data(data, Split::Test, config.max_len, true)?.expect("required split");
    create_dir(out)?;
    let seeds = ablation_seeds(config.seed, seeds);
    let results = run_rows(&config, &rows, &seeds, &train_data, val.as_ref(), &test).map_err(anyhow::Error::from)?;
    let text = ablation_text(&results);
    write(&out.join("ablation.csv"), &ablation_csv(&results))?;
    write(&out.join("ablation.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Generate { config, out, seed } => generate(config.as_deref(), &out, seed),
        Command::Train {
            config,
            data,
            out,
            seed,
            model,
        } => train_cmd(config.as_deref(), &data, &out, seed, model),
        Command::Evaluate { checkpoint, data, out } => evaluate_cmd(&checkpoint, &data, out.as_deref()),
        Command::Ablate {
            config,
            data,
            out,
            seed,
            model,
            rows,
            seeds,
        } => ablate_cmd(config.as_deref(), &data, &out, seed, model, rows, seeds),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
