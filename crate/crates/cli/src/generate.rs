//! `maskguide generate`: one auto-mode job, run in-process.
//!
//! Writes into `--out-dir`:
//!
//! ```text
//! stage1_<i>.png      stage-1 candidate i
//! stage2_<i>_<j>.png  refinement j of candidate i
//! trace.json          per-candidate loss rows
//! job.json            job summary with the SHA-256 of every image
//! ```

use std::path::{Path, PathBuf};

use clap::Args;
use maskguide::codec::image_to_png;
use maskguide::jobspec::{FanOut, JobSpec};
use maskguide::seed::sha256_hex;
use maskguide::{run_job, BackendRegistry, ClassVocabulary, GenerationJob, JobMode, JobStatus};
use serde::Serialize;
use serde_json::json;

use crate::error::{CliError, Result};
use crate::{create_dir, load_backend_config, write_file, TuningArgs};

#[derive(Debug, Clone, Args)]
pub struct GenerateArgs {
    /// Index-map mask (PNG or PGM) whose pixel values are class ids.
    #[arg(long)]
    pub mask: PathBuf,
    /// Vocabulary sidecar JSON mapping class ids to names and colors.
    #[arg(long)]
    pub vocab: PathBuf,
    /// Text prompt.
    #[arg(long)]
    pub prompt: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Stage-1 candidates.
    #[arg(long, default_value_t = 1)]
    pub n_stage1: usize,
    /// Stage-2 refinements per stage-1 candidate.
    #[arg(long, default_value_t = 1)]
    pub n_stage2: usize,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
    /// `toy` or a backend config JSON file.
    #[arg(long, default_value = "toy")]
    pub backend: String,
    #[command(flatten)]
    pub tuning: TuningArgs,
}

#[derive(Debug, Serialize)]
struct Stage1Summary {
    id: String,
    file: String,
    sha256: String,
    final_loss: f64,
    best_step: usize,
    guides: Vec<String>,
}

#[derive(Debug, Serialize)]
struct Stage2Summary {
    id: String,
    source: String,
    file: String,
    sha256: String,
    strength: f64,
    steps: usize,
    seed: u64,
}

pub fn stage1_file(index: usize) -> String {
    format!("stage1_{index}.png")
}

pub fn stage2_file(index: usize, refinement: usize) -> String {
    format!("stage2_{index}_{refinement}.png")
}

/// The job spec these flags describe, with file paths as given.
pub fn job_spec(args: &GenerateArgs) -> Result<JobSpec> {
    Ok(JobSpec {
        prompt: Some(args.prompt.clone()),
        mask_path: Some(args.mask.clone()),
        mask_png_base64: None,
        vocab_path: Some(args.vocab.clone()),
        vocab: None,
        weights: args.tuning.weights_spec()?,
        optimizer: args.tuning.optimizer_spec(),
        refine: args.tuning.refine_spec(),
        fan_out: FanOut {
            n_stage1: args.n_stage1,
            n_stage2: args.n_stage2,
        },
        seed: args.seed,
        mode: JobMode::Auto,
    })
}

pub fn run(args: &GenerateArgs) -> Result<()> {
    let vocab_text = std::fs::read_to_string(&args.vocab)
        .map_err(|e| CliError::Usage(format!("--vocab {}: {e}", args.vocab.display())))?;
    let vocab = ClassVocabulary::from_json(&vocab_text)
        .map_err(|e| CliError::Usage(format!("--vocab {}: {e}", args.vocab.display())))?;
    let config = load_backend_config(&args.backend)?;
    let backends = BackendRegistry::<f64>::with_builtins()
        .build(&config, &vocab)
        .map_err(|e| CliError::Usage(format!("--backend: {e}")))?;

    let spec = job_spec(args)?;
    let job = spec
        .resolve::<f64>("local", Path::new("."), &backends)
        .map_err(CliError::Validation)?;
    let job = run_job(job, JobMode::Auto, &backends, &mut ())?;
    write_outputs(&args.out_dir, &spec, &job)?;
    match (&job.status, &job.failure) {
        (JobStatus::Done, _) => Ok(()),
        (_, Some(f)) => Err(CliError::StageFailed(format!("{:?}: {}", f.stage, f.message))),
        (status, None) => Err(CliError::StageFailed(format!("job ended as {status}"))),
    }
}

fn write_outputs(dir: &Path, spec: &JobSpec, job: &GenerationJob<f64>) -> Result<()> {
    create_dir(dir)?;
    let mut stage1 = Vec::new();
    for (i, r) in job.stage1.iter().enumerate() {
        let png = image_to_png(&r.image)?;
        let file = stage1_file(i);
        stage1.push(Stage1Summary {
            id: r.id.clone(),
            file: file.clone(),
            sha256: sha256_hex(&png),
            final_loss: r.final_loss,
            best_step: r.latent.step,
            guides: r.guides.clone(),
        });
        write_file(dir.join(file), png)?;
    }
    let mut stage2 = Vec::new();
    for r in &job.stage2 {
        let (i, j) = parse_stage2_id(&r.id);
        let png = image_to_png(&r.image)?;
        let file = stage2_file(i, j);
        stage2.push(Stage2Summary {
            id: r.id.clone(),
            source: r.source.clone(),
            file: file.clone(),
            sha256: sha256_hex(&png),
            strength: r.config.strength,
            steps: r.config.steps,
            seed: r.config.seed,
        });
        write_file(dir.join(file), png)?;
    }

    let trace = json!({
        "candidates": job.stage1.iter().map(|r| r.trace_json()).collect::<Vec<_>>(),
    });
    write_file(dir.join("trace.json"), serde_json::to_string_pretty(&trace)?)?;

    let summary = json!({
        "status": job.status,
        "failure": job.failure,
        "prompt": job.prompt,
        "seed": job.seed,
        "fan_out": {"n_stage1": job.n_stage1, "n_stage2": job.n_stage2_per_stage1},
        "weights": job.optimizer_config.weights,
        "spec": spec,
        "stage1": stage1,
        "stage2": stage2,
    });
    write_file(dir.join("job.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(())
}

fn parse_stage2_id(id: &str) -> (usize, usize) {
    let mut parts = id.trim_start_matches("s2-").split('-').map(|p| p.parse().unwrap_or(0));
    (parts.next().unwrap_or(0), parts.next().unwrap_or(0))
}
