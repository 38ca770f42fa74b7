use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mlwc::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, StageTag};
use mlwc::composer::{ablate, ablation_tsv, evaluate, train_attgen, AblationRow, EvalError};
use mlwc::config::{parse_config, RunConfig};
use mlwc::data::{load_image_dir, synth_generate, write_image_dir, DataError, DatasetPair};
use mlwc::heads::Level;
use mlwc::pipeline::train_run;
use mlwc::trainer::TrainError;
use mlwc::weightgen::{Generator, WeightGenError};

#[derive(Parser)]
#[command(name = "mlwc", version, about = "Multi-level weight-centric few-shot learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset as Netpbm files.
    SynthData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train all branches; writes CKPT and, for full runs, CKPT's `.stage1.ckpt` sibling.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Stop after stage 1.
        #[arg(long)]
        stage1_only: bool,
        /// Baseline without weight-centric fine-tuning (same as --stage1-only).
        #[arg(long)]
        no_wc: bool,
        /// Per-epoch log as tab-separated text.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fit attention generators on the base classes of a trained checkpoint.
    TrainAttgen {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Repeated-episode evaluation of the combined model.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        generator: Option<Generator>,
        #[arg(long)]
        crops: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        top_k: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        levels: Option<Vec<Level>>,
        /// Tab-separated report.
        #[arg(long)]
        metrics: PathBuf,
        /// Structured JSON report.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Ablation table from `baseline.ckpt` (or `mlwc.stage1.ckpt`) and `mlwc.ckpt` in a directory.
    Ablate {
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        shots: Option<Vec<usize>>,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// List tensor names, shapes and metadata.
    InspectCkpt { ckpt: PathBuf },
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => Failure::Numeric(e.to_string()),
            TrainError::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::WeightGen(WeightGenError::Diverged { .. }) => Failure::Numeric(e.to_string()),
            EvalError::Config(_) | EvalError::MissingAttGen => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

fn read_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    parse_config(&text).map_err(|e| Failure::Usage(e.to_string()))
}

fn log_config(cfg: &RunConfig) {
    eprintln!("# resolved configuration (hash {})", cfg.hash());
    for line in cfg.to_text().lines() {
        eprintln!("#   {line}");
    }
}

/// Writes to stdout, ignoring a closed pipe.
fn emit(text: &str) {
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn load_data(dir: &Path) -> Result<DatasetPair, Failure> {
    Ok(load_image_dir(dir)?)
}

/// `model.ckpt` → `model.stage1.ckpt`.
fn stage1_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    out.with_file_name(format!("{stem}.stage1.ckpt"))
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::SynthData { config, out } => {
            let cfg = read_config(config.as_deref())?;
            log_config(&cfg);
            let pair = synth_generate(&cfg.data)?;
            write_image_dir(&pair, &out)?;
            eprintln!(
                "wrote {} base and {} novel classes to {}",
                pair.base_train.label_space.len(),
                pair.novel_test.label_space.len(),
                out.display()
            );
        }
        Command::Train { config, data, out, stage1_only, no_wc, log } => {
            let cfg = read_config(config.as_deref())?;
            log_config(&cfg);
            let pair = load_data(&data)?;
            let wc = !(stage1_only || no_wc);
            let run = train_run(&cfg, &pair, wc)?;
            let text = run.log.to_tsv_timed();
            match log {
                Some(p) => write_text(&p, &text)?,
                None => emit(&text),
            }
            if wc {
                let first = Checkpoint::from_network(&run.stage1, None, &cfg, StageTag::One, run.stage1_last_epoch());
                save_checkpoint(&first, &stage1_path(&out))?;
                let last = Checkpoint::from_network(run.last(), None, &cfg, StageTag::Two, run.last_epoch());
                save_checkpoint(&last, &out)?;
            } else {
                let only = Checkpoint::from_network(&run.stage1, None, &cfg, StageTag::OneOnly, run.last_epoch());
                save_checkpoint(&only, &out)?;
            }
            eprintln!("wrote {}", out.display());
        }
        Command::TrainAttgen { ckpt, data, out } => {
            let mut stored = load_checkpoint(&ckpt)?;
            let cfg = stored.config()?;
            log_config(&cfg);
            let net = stored.network()?;
            let pair = load_data(&data)?;
            let set = train_attgen(&net, &pair, cfg.attgen.scope, &cfg.attgen.train)?;
            stored.tensors.retain(|name, _| !name.starts_with(mlwc::checkpoint::ATTGEN_PREFIX));
            stored.tensors.extend(mlwc::checkpoint::attgen_tensors(&set));
            save_checkpoint(&stored, &out)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Eval { ckpt, data, shots, trials, generator, crops, seed, top_k, levels, metrics, json } => {
            let stored = load_checkpoint(&ckpt)?;
            let mut cfg = stored.config()?;
            let e = &mut cfg.eval;
            e.shots = shots.unwrap_or(std::mem::take(&mut e.shots));
            e.trials = trials.unwrap_or(e.trials);
            e.generator = generator.unwrap_or(e.generator);
            e.crops = crops.unwrap_or(e.crops);
            e.seed = seed.unwrap_or(e.seed);
            e.top_k = top_k.unwrap_or(e.top_k);
            e.levels = levels.unwrap_or(std::mem::take(&mut e.levels));
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            log_config(&cfg);
            let net = stored.network()?;
            let attgen = stored.attgen()?;
            let pair = load_data(&data)?;
            let report = evaluate(&net, &pair, attgen.as_ref(), &cfg.eval)?;
            write_text(&metrics, &report.to_tsv())?;
            if let Some(p) = json {
                write_text(&p, &report.to_json())?;
            }
            emit(&report.to_tsv());
        }
        Command::Ablate { ckpt_dir, data, out, shots, trials } => {
            let wc = load_checkpoint(&ckpt_dir.join("mlwc.ckpt"))?;
            let baseline_path = [ckpt_dir.join("baseline.ckpt"), ckpt_dir.join("mlwc.stage1.ckpt")]
                .into_iter()
                .find(|p| p.is_file())
                .ok_or_else(|| {
                    Failure::Data(format!("missing checkpoint: no baseline.ckpt or mlwc.stage1.ckpt in {}", ckpt_dir.display()))
                })?;
            let baseline = load_checkpoint(&baseline_path)?;
            let mut cfg = wc.config()?;
            if let Some(s) = shots {
                cfg.eval.shots = s;
            }
            cfg.eval.trials = trials.unwrap_or(cfg.eval.trials);
            cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            log_config(&cfg);
            let pair = load_data(&data)?;
            let table = ablate(&baseline.network()?, &wc.network()?, &pair, &AblationRow::ALL, &cfg.eval)?;
            let text = ablation_tsv(&table);
            write_text(&out, &text)?;
            emit(&text);
        }
        Command::InspectCkpt { ckpt } => {
            let stored = load_checkpoint(&ckpt)?;
            let mut text = format!(
                "stage\t{}\nepoch\t{}\nconfig_hash\t{}\n",
                stored.meta.stage, stored.meta.epoch, stored.meta.config_hash
            );
            for (name, t) in &stored.tensors {
                let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
                text.push_str(&format!("{name}\t{}\n", dims.join("x")));
            }
            for line in stored.meta.config.lines() {
                text.push_str(&format!("# {line}\n"));
            }
            emit(&text);
        }
    }
    Ok(())
}
