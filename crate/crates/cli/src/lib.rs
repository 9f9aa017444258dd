//! `maskguide` command-line driver.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 a generation stage
//! failed, 4 the serve port is taken, 1 anything else.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use maskguide::jobspec::{OptimizerSpec, RefineSpec, WeightsSpec};
use maskguide::BackendConfig;

pub mod error;
pub mod evaluate;
pub mod generate;
pub mod serve;
pub mod synthesize;

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "maskguide", version, about = "Mask-guided two-stage image generation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one auto-mode job in-process and write its images and traces.
    Generate(generate::GenerateArgs),
    /// Filter a dataset manifest, generate every record and report mean IoU.
    Evaluate(evaluate::EvaluateArgs),
    /// Start the HTTP job service.
    Serve(serve::ServeArgs),
    /// Write a synthetic rectangle-layout manifest for evaluation runs.
    Synthesize(synthesize::SynthesizeArgs),
}

/// Optimizer and weight flags shared by `generate` and `evaluate`.
#[derive(Debug, Clone, Default, Args)]
pub struct TuningArgs {
    /// Loss weights: alpha_clip first, then one alpha_seg for every guide or a single one for all (e.g. `1,5`).
    #[arg(long, value_delimiter = ',', num_args = 1, allow_hyphen_values = true)]
    pub weights: Option<Vec<f64>>,
    /// Stage-1 iteration cap.
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// Scale of the initial Gaussian latent.
    #[arg(long)]
    pub init_scale: Option<f64>,
    /// Stop after this many steps without improvement.
    #[arg(long)]
    pub plateau_patience: Option<usize>,
    /// Stage-2 refinement strength in [0, 1].
    #[arg(long)]
    pub strength: Option<f64>,
    /// Stage-2 step budget.
    #[arg(long)]
    pub refine_steps: Option<usize>,
}

impl TuningArgs {
    pub fn weights_spec(&self) -> Result<WeightsSpec> {
        match self.weights.as_deref() {
            None => Ok(WeightsSpec::default()),
            Some([]) => Err(CliError::Usage("--weights needs at least alpha_clip".into())),
            Some([clip]) => Ok(WeightsSpec {
                alpha_clip: Some(*clip),
                alpha_seg: None,
            }),
            Some([clip, seg @ ..]) => Ok(WeightsSpec {
                alpha_clip: Some(*clip),
                alpha_seg: Some(seg.to_vec()),
            }),
        }
    }

    pub fn optimizer_spec(&self) -> OptimizerSpec {
        OptimizerSpec {
            max_steps: self.max_steps,
            step_size: self.step_size,
            momentum: self.momentum,
            plateau_patience: self.plateau_patience,
            plateau_tolerance: None,
            init_scale: self.init_scale,
        }
    }

    pub fn refine_spec(&self) -> RefineSpec {
        RefineSpec {
            strength: self.strength,
            steps: self.refine_steps,
        }
    }
}

/// `toy` for the built-in toy backends, otherwise a JSON backend config file.
pub fn load_backend_config(arg: &str) -> Result<BackendConfig> {
    if arg == "toy" {
        return Ok(BackendConfig::default());
    }
    let text = std::fs::read_to_string(arg).map_err(|e| CliError::io(format!("reading backend config {arg}"), e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("backend config {arg}: {e}")))
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

pub(crate) fn write_file(path: PathBuf, bytes: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(&path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

/// Parses `args` (including the program name) and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { error::EXIT_USAGE } else { error::EXIT_OK };
        }
    };
    let outcome = match cli.command {
        Command::Generate(a) => generate::run(&a),
        Command::Evaluate(a) => evaluate::run(&a),
        Command::Serve(a) => serve::run(&a),
        Command::Synthesize(a) => synthesize::run(&a),
    };
    match outcome {
        Ok(()) => error::EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
