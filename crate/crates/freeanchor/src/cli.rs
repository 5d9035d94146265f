//! Command-line front end. The library is the primary interface (see the
//! runnable examples); this module keeps a thin binary around the same entry
//! points for scripting.
//!
//! Exit codes: 0 on success, 1 when a verification or runtime step fails,
//! 2 on usage / configuration errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::synthdata::{generate_dataset, load_dataset, save_dataset, DatasetSpec};
use crate::trainer::{
    evaluate, resume, trace_matching, train, LogRow, LossMode, TrainConfig, TraceRow,
    TRACE_CSV_HEADER,
};

/// Everything one run needs: how to synthesize the data, how to train, and
/// how to post-process detections. Stored as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub train: TrainConfig,
    pub nms_threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let dataset = DatasetSpec::default();
        ExperimentConfig {
            train: TrainConfig::desk_default(dataset.width, dataset.height),
            dataset,
            nms_threshold: 0.5,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[derive(Parser, Debug)]
#[command(name = "freeanchor", about = "Desk-scale detection engine with learned anchor matching")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a dataset and write it as JSON lines (gzip if *.gz).
    Generate {
        /// Experiment config JSON; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output dataset path (.jsonl or .jsonl.gz).
        #[arg(long)]
        output: PathBuf,
        /// Override the dataset seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Overwrite an existing output file.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a dataset and write a checkpoint.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Output checkpoint path (JSON).
        #[arg(long)]
        output: PathBuf,
        /// Optional CSV training log path.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Objective: free_anchor or baseline_iou.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from an existing checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on a dataset and write a JSON report.
    Eval {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report output path; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Verify analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Finite-difference step size.
        #[arg(long, default_value_t = 1e-6)]
        perturb: f64,
        /// Tolerance on the max relative error.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Deliberately damage one gradient entry (negative control).
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Trace per-anchor match probabilities for one scene across checkpoints.
    TraceMatching {
        #[arg(long)]
        dataset: PathBuf,
        /// One or more checkpoint paths, in training order.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Scene id to trace.
        #[arg(long)]
        scene: u64,
        /// CSV output path; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

fn check_output(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::Config(format!(
            "output {} exists; pass --force to overwrite",
            path.display()
        )));
    }
    Ok(())
}

fn load_config(path: &Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::default()),
    }
}

#[derive(Serialize)]
struct Manifest {
    seed: u64,
    num_scenes: usize,
    num_objects: usize,
    objects_per_class: BTreeMap<usize, usize>,
    empty_scenes: usize,
}

fn write_optional(path: &Option<PathBuf>, force: bool, text: &str) -> Result<()> {
    match path {
        Some(p) => {
            check_output(p, force)?;
            fs::write(p, text)?;
            Ok(())
        }
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn cmd_generate(config: &Option<PathBuf>, output: &Path, seed: Option<u64>, force: bool) -> Result<i32> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.dataset.seed = s;
    }
    check_output(output, force)?;
    let scenes = generate_dataset(&cfg.dataset)?;
    save_dataset(output, &scenes)?;
    let mut per_class = BTreeMap::new();
    for o in scenes.iter().flat_map(|s| &s.objects) {
        *per_class.entry(o.class).or_insert(0usize) += 1;
    }
    let manifest = Manifest {
        seed: cfg.dataset.seed,
        num_scenes: scenes.len(),
        num_objects: scenes.iter().map(|s| s.objects.len()).sum(),
        objects_per_class: per_class,
        empty_scenes: scenes.iter().filter(|s| s.objects.is_empty()).count(),
    };
    let manifest_path = output.with_extension("manifest.json");
    check_output(&manifest_path, force)?;
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    log::info!(
        "wrote {} scenes ({} objects) to {}",
        manifest.num_scenes,
        manifest.num_objects,
        output.display()
    );
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    dataset: &Path,
    output: &Path,
    log_path: &Option<PathBuf>,
    config: &Option<PathBuf>,
    mode: &Option<String>,
    iterations: Option<usize>,
    seed: Option<u64>,
    resume_from: &Option<PathBuf>,
    force: bool,
) -> Result<i32> {
    check_output(output, force)?;
    if let Some(p) = log_path {
        check_output(p, force)?;
    }
    let cfg = load_config(config)?;
    let mut train_cfg = cfg.train;
    if let Some(m) = mode {
        train_cfg.mode = m.parse::<LossMode>()?;
    }
    if let Some(it) = iterations {
        train_cfg.iterations = it;
    }
    if let Some(s) = seed {
        train_cfg.seed = s;
    }
    let scenes = load_dataset(dataset)?;
    let result = match resume_from {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            resume(ckpt.params, ckpt.iteration, &scenes, &train_cfg)?
        }
        None => train(&scenes, &train_cfg)?,
    };
    if let Some(p) = log_path {
        let mut text = String::from(LogRow::csv_header());
        text.push('\n');
        for row in &result.log {
            text.push_str(&row.to_csv());
            text.push('\n');
        }
        fs::write(p, text)?;
    }
    Checkpoint::new(train_cfg.iterations, result.params.clone()).save(output)?;
    if let Some(iter) = result.diverged_at {
        log::error!("training diverged at iteration {iter}; wrote last good parameters");
        return Ok(1);
    }
    if let Some(last) = result.log.last() {
        log::info!("final loss {:.6} after {} iterations", last.total, last.iteration + 1);
    }
    Ok(0)
}

fn cmd_eval(
    dataset: &Path,
    checkpoint: &Path,
    output: &Option<PathBuf>,
    config: &Option<PathBuf>,
    force: bool,
) -> Result<i32> {
    let cfg = load_config(config)?;
    let scenes = load_dataset(dataset)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let report = evaluate(&ckpt.params, &scenes, &cfg.train.layout, cfg.nms_threshold)?;
    write_optional(output, force, &serde_json::to_string_pretty(&report)?)?;
    log::info!("AP {:.4}, AP50 {:.4}, AP75 {:.4}", report.ap, report.ap50, report.ap75);
    Ok(0)
}

fn cmd_gradcheck(seed: u64, instances: usize, step: f64, tolerance: f64, corrupt: bool) -> Result<i32> {
    let reports = crate::gradcheck::run_suite(seed, instances, step, corrupt)?;
    let mut worst: f64 = 0.0;
    for (i, report) in reports.iter().enumerate() {
        println!("instance {:3}: max relative error {:.3e}", i, report.max_rel_err);
        worst = worst.max(report.max_rel_err);
    }
    if worst < tolerance {
        println!("gradient check passed: worst {worst:.3e} < {tolerance:.1e}");
        Ok(0)
    } else {
        println!("gradient check FAILED: worst {worst:.3e} >= {tolerance:.1e}");
        Ok(1)
    }
}

fn cmd_trace(
    dataset: &Path,
    checkpoints: &[PathBuf],
    scene_id: u64,
    output: &Option<PathBuf>,
    config: &Option<PathBuf>,
    force: bool,
) -> Result<i32> {
    let cfg = load_config(config)?;
    let scenes = load_dataset(dataset)?;
    let scene = scenes
        .iter()
        .find(|s| s.id == scene_id)
        .ok_or_else(|| Error::Config(format!("scene {scene_id} not found in dataset")))?;
    let ckpts = checkpoints
        .iter()
        .map(|p| Checkpoint::load(p))
        .collect::<Result<Vec<_>>>()?;
    let rows = trace_matching(&ckpts, scene, &cfg.train.layout, &cfg.train.hp)?;
    let mut text = String::from(TRACE_CSV_HEADER);
    text.push('\n');
    for row in &rows {
        text.push_str(&TraceRow::to_csv(row));
        text.push('\n');
    }
    write_optional(output, force, text.trim_end())?;
    Ok(0)
}

/// Execute one parsed command, returning the process exit code.
pub fn execute(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::Generate { config, output, seed, force } => cmd_generate(config, output, *seed, *force),
        Command::Train {
            dataset,
            output,
            log,
            config,
            mode,
            iterations,
            seed,
            resume,
            force,
        } => cmd_train(dataset, output, log, config, mode, *iterations, *seed, resume, *force),
        Command::Eval { dataset, checkpoint, output, config, force } => {
            cmd_eval(dataset, checkpoint, output, config, *force)
        }
        Command::Gradcheck { seed, instances, perturb, tolerance, corrupt_gradient } => {
            cmd_gradcheck(*seed, *instances, *perturb, *tolerance, *corrupt_gradient)
        }
        Command::TraceMatching { dataset, checkpoints, scene, output, config, force } => {
            cmd_trace(dataset, checkpoints, *scene, output, config, *force)
        }
    }
}

/// Parse `args` (including the program name) and run. Returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are not errors.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
