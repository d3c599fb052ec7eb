//! Command dispatch for the `segreg` binary: `synth`, `train`, `eval`,
//! and `gradcheck`, all deterministic under (config, flags, seed).
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 verification failure.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use config::FileConfig;
use segreg_core::dataset::{load_eval_split, load_manifest, load_split, write_dataset, Split};
use segreg_core::error::Error as CoreError;
use segreg_core::eval::{evaluate, EvalOptions, Pipeline};
use segreg_core::net::checkpoint::load_checkpoint;
use segreg_core::train::{train, TrainMode};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Verification(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Verification(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Verification(m) => m,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        CliError::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "segreg",
    about = "Simultaneous segmentation and registration of longitudinal 3D images",
    disable_version_flag = true
)]
pub struct Cli {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Master seed; every random draw derives from it.
    #[arg(long, global = true, default_value_t = 7)]
    pub seed: u64,

    /// Output directory.
    #[arg(long, global = true, default_value = "segreg-out")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic longitudinal dataset with known ground truth.
    Synth(SynthArgs),
    /// Train the joint model or one of the independent baselines.
    Train(TrainArgs),
    /// Evaluate trained pipelines on the test split.
    Eval(EvalArgs),
    /// Verify every analytic gradient against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of pairs to generate.
    #[arg(long)]
    pub pairs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    pub data: PathBuf,

    /// joint | seg | reg
    #[arg(long)]
    pub mode: Option<String>,

    /// Cap on training epochs.
    #[arg(long)]
    pub epochs: Option<u32>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory produced by `synth`.
    #[arg(long)]
    pub data: PathBuf,

    /// Checkpoint of the jointly trained model.
    #[arg(long)]
    pub joint: Option<PathBuf>,

    /// Checkpoint of the independently trained segmentation stream.
    #[arg(long)]
    pub seg: Option<PathBuf>,

    /// Checkpoint of the independently trained registration stream.
    #[arg(long)]
    pub reg: Option<PathBuf>,

    /// Evaluate the literal Σ√(J²) spatial-correlation denominator.
    #[arg(long)]
    pub sc_literal: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Independent seeds to check.
    #[arg(long, default_value_t = 1)]
    pub reps: u32,

    /// Testing hook: corrupt the named check and prove the harness fails.
    #[arg(long)]
    pub inject_fault: Option<String>,
}

fn load_config(path: &Option<PathBuf>) -> Result<FileConfig, CliError> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Data(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Usage(format!("bad config: {e}")))
        }
    }
}

#[derive(Serialize)]
struct ResolvedConfig<'a> {
    command: &'a str,
    seed: u64,
    out: &'a Path,
    #[serde(skip_serializing_if = "Option::is_none")]
    data: Option<&'a Path>,
    config: &'a FileConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pairs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mode: Option<String>,
}

fn echo_resolved(resolved: &ResolvedConfig<'_>) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(resolved)
        .map_err(|e| CliError::Data(format!("config echo: {e}")))?;
    println!("{text}");
    fs::create_dir_all(resolved.out)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", resolved.out.display())))?;
    fs::write(resolved.out.join("resolved_config.json"), text)
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let mut file_cfg = load_config(&cli.config)?;
    match &cli.command {
        Command::Synth(args) => {
            if let Some(pairs) = args.pairs {
                file_cfg.synth.pairs = pairs;
            }
            if file_cfg.synth.pairs == 0 {
                return Err(CliError::Usage("--pairs must be at least 1".into()));
            }
            echo_resolved(&ResolvedConfig {
                command: "synth",
                seed: cli.seed,
                out: &cli.out,
                data: None,
                config: &file_cfg,
                pairs: Some(file_cfg.synth.pairs),
                mode: None,
            })?;
            let manifest = write_dataset(
                &file_cfg.synth.to_core(),
                file_cfg.synth.pairs,
                cli.seed,
                &cli.out,
            )?;
            println!(
                "wrote {} pairs to {} (manifest: {})",
                manifest.pairs.len(),
                cli.out.display(),
                cli.out.join("manifest.json").display()
            );
            Ok(())
        }
        Command::Train(args) => {
            let mode = match &args.mode {
                None => file_cfg.train.mode,
                Some(m) => m
                    .parse::<TrainMode>()
                    .map_err(|_| CliError::Usage(format!("invalid mode {m:?}; use joint|seg|reg")))?,
            };
            if let Some(e) = args.epochs {
                file_cfg.train.epochs_max = e;
            }
            echo_resolved(&ResolvedConfig {
                command: "train",
                seed: cli.seed,
                out: &cli.out,
                data: Some(&args.data),
                config: &file_cfg,
                pairs: None,
                mode: Some(mode.to_string()),
            })?;
            let manifest = load_manifest(&args.data)?;
            let train_set = load_split(&args.data, &manifest, Split::Train)?;
            let val_set = load_split(&args.data, &manifest, Split::Val)?;
            let cfg = file_cfg.train.to_core(mode, cli.seed);
            let outcome = train(&train_set, &val_set, &cfg, &cli.out)?;
            println!(
                "trained {mode}: best epoch {} (val loss {}), stopped by {} after {} epochs",
                outcome.summary.best_epoch,
                outcome.summary.best_val_loss,
                outcome.summary.stop_reason,
                outcome.summary.epochs_run
            );
            println!("checkpoints: {} / {}", cli.out.join("best.json").display(), cli.out.join("last.json").display());
            Ok(())
        }
        Command::Eval(args) => {
            echo_resolved(&ResolvedConfig {
                command: "eval",
                seed: cli.seed,
                out: &cli.out,
                data: Some(&args.data),
                config: &file_cfg,
                pairs: None,
                mode: None,
            })?;
            let mut pipelines = Vec::new();
            if let Some(joint) = &args.joint {
                let (model, _, _) = load_checkpoint(joint)?;
                pipelines.push(Pipeline {
                    name: "joint".into(),
                    theta: model
                        .theta
                        .ok_or_else(|| CliError::Data("joint checkpoint lacks a segmentation stream".into()))?,
                    psi: model
                        .psi
                        .ok_or_else(|| CliError::Data("joint checkpoint lacks a registration stream".into()))?,
                });
            }
            match (&args.seg, &args.reg) {
                (Some(seg), Some(reg)) => {
                    let (seg_model, _, _) = load_checkpoint(seg)?;
                    let (reg_model, _, _) = load_checkpoint(reg)?;
                    pipelines.push(Pipeline {
                        name: "cnn".into(),
                        theta: seg_model
                            .theta
                            .ok_or_else(|| CliError::Data("--seg checkpoint lacks a segmentation stream".into()))?,
                        psi: reg_model
                            .psi
                            .ok_or_else(|| CliError::Data("--reg checkpoint lacks a registration stream".into()))?,
                    });
                }
                (None, None) => {}
                _ => {
                    return Err(CliError::Usage(
                        "the independent pipeline needs both --seg and --reg".into(),
                    ))
                }
            }
            if pipelines.is_empty() {
                return Err(CliError::Usage(
                    "nothing to evaluate: pass --joint and/or --seg with --reg".into(),
                ));
            }
            let manifest = load_manifest(&args.data)?;
            let pairs = load_eval_split(&args.data, &manifest, Split::Test)?;
            let opts = EvalOptions {
                sc_literal: args.sc_literal || file_cfg.eval.sc_literal,
            };
            let report = evaluate(&pipelines, &pairs, &opts, &cli.out)?;
            for s in &report.comparison.structures {
                let stcs: Vec<String> = s
                    .stcs
                    .iter()
                    .map(|(n, v)| format!("{n}={v:.4}"))
                    .collect();
                let kappa: Vec<String> = s
                    .kappa
                    .iter()
                    .map(|(n, v)| format!("{n}={v:.4}"))
                    .collect();
                println!(
                    "structure {}: STCS {} -> winner {}; kappa {} -> winner {}",
                    s.structure,
                    stcs.join(" "),
                    s.stcs_winner,
                    kappa.join(" "),
                    s.kappa_winner
                );
            }
            for r in &report.comparison.registration {
                println!(
                    "registration {}: mean EPE {:.4} vox vs affine-only {:.4} vox",
                    r.pipeline, r.mean_endpoint_error_vox, r.affine_only_residual_vox
                );
            }
            println!(
                "wrote {} and {}",
                cli.out.join("metrics.csv").display(),
                cli.out.join("samplesize.csv").display()
            );
            Ok(())
        }
        Command::Gradcheck(args) => {
            if args.reps == 0 {
                return Err(CliError::Usage("--reps must be at least 1".into()));
            }
            echo_resolved(&ResolvedConfig {
                command: "gradcheck",
                seed: cli.seed,
                out: &cli.out,
                data: None,
                config: &file_cfg,
                pairs: None,
                mode: None,
            })?;
            let reports = segreg_core::check::run_all(cli.seed, args.reps, args.inject_fault.as_deref());
            let mut failures = Vec::new();
            let mut lines = String::new();
            for r in &reports {
                let line = r.line();
                println!("{line}");
                lines.push_str(&line);
                lines.push('\n');
                if !r.pass {
                    failures.push(r.name.clone());
                }
            }
            fs::write(cli.out.join("gradcheck.txt"), lines)
                .map_err(|e| CliError::Data(e.to_string()))?;
            if failures.is_empty() {
                println!("all {} checks passed", reports.len());
                Ok(())
            } else {
                Err(CliError::Verification(format!(
                    "gradient checks failed: {}",
                    failures.join(", ")
                )))
            }
        }
    }
}

/// Full argv-in, exit-code-out entry point (shared by `main` and tests).
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with successful exit.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 1;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
