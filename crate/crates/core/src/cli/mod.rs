//! Command-line front end. Each subcommand resolves the effective config,
//! checks its inputs, and only then creates a run directory.

mod adm;
mod bench;
mod common;
mod eval;
mod finetune;
mod inpaint;
mod sweep;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::config::RunConfig;
use crate::error::{Error, Result};

pub use adm::{cmd_adm, AdmArgs};
pub use bench::{cmd_bench, BenchArgs};
pub use eval::{cmd_eval, EvalArgs};
pub use finetune::{cmd_finetune, FinetuneArgs};
pub use inpaint::{cmd_inpaint, InpaintArgs};
pub use sweep::{cmd_sweep, SweepArgs};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_PIPELINE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "subinpaint", version, about = "Subject-driven inpainting pipeline")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    NoDif,
    NoTas,
    NoAdm,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML run configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set schedule.lambda=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Write into this directory instead of a fresh one under `paths.runs_dir`.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Disable the two-stage sampler (single full-frame pass instead).
    #[arg(long, global = true)]
    pub no_dif: bool,
    /// Disable attribute substitution on the prompt embedding.
    #[arg(long, global = true)]
    pub no_tas: bool,
    /// Train without the regularization set.
    #[arg(long, global = true)]
    pub no_adm: bool,
    /// Same as the matching `--no-*` flag. Repeatable.
    #[arg(long, value_enum, global = true)]
    pub ablate: Vec<Ablation>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the effective configuration as TOML.
    Config {
        /// Also write it to this file.
        #[arg(long)]
        write: Option<PathBuf>,
    },
    /// Build the attribute dictionary, prompts and regularization set.
    Adm(AdmArgs),
    /// Fine-tune adapters on a subject.
    Finetune(FinetuneArgs),
    /// Insert a subject into a background.
    Inpaint(InpaintArgs),
    /// Assemble a benchmark manifest from annotated backgrounds.
    Bench(BenchArgs),
    /// Score inpainting results.
    Eval(EvalArgs),
    /// Re-run a command for each value of one config key.
    Sweep(SweepArgs),
}

impl GlobalArgs {
    /// Loads the config file, applies overrides and ablation flags, and
    /// validates the result.
    pub fn resolve_config(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        let mut cfg = base.with_overrides(&self.overrides)?;
        let mut ablations = self.ablate.clone();
        for (flag, a) in [
            (self.no_dif, Ablation::NoDif),
            (self.no_tas, Ablation::NoTas),
            (self.no_adm, Ablation::NoAdm),
        ] {
            if flag {
                ablations.push(a);
            }
        }
        for a in ablations {
            match a {
                Ablation::NoDif => cfg.dif.enabled = false,
                Ablation::NoTas => cfg.tas.enabled = false,
                Ablation::NoAdm => cfg.adm.enabled = false,
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Config(_) => EXIT_CONFIG,
        _ => EXIT_PIPELINE,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(path) => {
            if let Some(p) = path {
                println!("{}", p.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Runs a parsed command and returns the path of its main artifact.
pub fn execute(cli: &Cli) -> Result<Option<PathBuf>> {
    let cfg = cli.global.resolve_config()?;
    let run_dir = cli.global.run_dir.as_deref();
    match &cli.command {
        Command::Config { write } => {
            let text = cfg.to_toml()?;
            print!("{text}");
            if let Some(path) = write {
                std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
            }
            Ok(None)
        }
        Command::Adm(a) => cmd_adm(&cfg, a, run_dir).map(Some),
        Command::Finetune(a) => cmd_finetune(&cfg, a, run_dir).map(Some),
        Command::Inpaint(a) => cmd_inpaint(&cfg, a, run_dir).map(Some),
        Command::Bench(a) => cmd_bench(&cfg, a, run_dir).map(Some),
        Command::Eval(a) => cmd_eval(&cfg, a, run_dir).map(Some),
        Command::Sweep(a) => cmd_sweep(&cfg, &cli.global, a, run_dir).map(Some),
    }
}

pub fn main() -> i32 {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("SUBINPAINT_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info")),
        )
        .with_writer(std::io::stderr)
        .without_time()
        .try_init();
    run_from(std::env::args_os())
}
