//! `maskguide evaluate`: filter a manifest, generate each record, re-segment
//! and score mean IoU. Writes `report.txt` and `report.json` into `--out-dir`.

use std::path::{Path, PathBuf};

use clap::{Args, ValueEnum};
use maskguide::eval::{
    evaluate, filter_records, load_records, parse_manifest, render_reference_rows, render_report, FilterSettings,
    IoUReport, PipelineUnderTest, REFERENCE_ROWS,
};
use maskguide::jobspec::JobSpec;
use maskguide::{BackendRegistry, ClassVocabulary, IouMode};
use serde_json::json;

use crate::error::{CliError, Result};
use crate::{create_dir, load_backend_config, write_file, TuningArgs};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum IouModeArg {
    PerClass,
    ClassAgnostic,
}

impl From<IouModeArg> for IouMode {
    fn from(m: IouModeArg) -> Self {
        match m {
            IouModeArg::PerClass => IouMode::PerClass,
            IouModeArg::ClassAgnostic => IouMode::ClassAgnostic,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    /// JSON-lines manifest of `{"id", "mask_path", "caption", "vocab_path"}`; paths are relative to it.
    #[arg(long)]
    pub manifest: PathBuf,
    /// `toy` or a backend config JSON file.
    #[arg(long)]
    pub backend: String,
    /// Keep every record instead of applying the object-count, area and class filter.
    #[arg(long)]
    pub filter_off: bool,
    /// Records evaluated in parallel.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value = ".")]
    pub out_dir: PathBuf,
    #[arg(long, value_enum, default_value_t = IouModeArg::PerClass)]
    pub iou_mode: IouModeArg,
    /// Also score the same pipeline with every segmentation weight set to zero.
    #[arg(long)]
    pub baseline: bool,
    /// Row label for the measured pipeline.
    #[arg(long, default_value = "ours")]
    pub method: String,
    #[command(flatten)]
    pub tuning: TuningArgs,
}

pub fn run(args: &EvaluateArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.manifest)
        .map_err(|e| CliError::Manifest(format!("{}: {e}", args.manifest.display())))?;
    let entries =
        parse_manifest(&text).map_err(|e| CliError::Manifest(format!("{}: {e}", args.manifest.display())))?;
    let base = args.manifest.parent().unwrap_or(Path::new("."));
    let vocab = match entries.first() {
        Some(e) => {
            let path = base.join(&e.vocab_path);
            let text = std::fs::read_to_string(&path)
                .map_err(|err| CliError::Manifest(format!("{}: {err}", path.display())))?;
            ClassVocabulary::from_json(&text).map_err(|err| CliError::Manifest(format!("{}: {err}", path.display())))?
        }
        None => ClassVocabulary::pascal_voc(),
    };
    let records =
        load_records::<f64>(&entries, base, &vocab).map_err(|e| CliError::Manifest(format!("{}: {e}", args.manifest.display())))?;
    let raw_count = records.len();

    let config = load_backend_config(&args.backend)?;
    let backends = BackendRegistry::<f64>::with_builtins()
        .build(&config, &vocab)
        .map_err(|e| CliError::Usage(format!("--backend: {e}")))?;

    let tuning = JobSpec {
        weights: args.tuning.weights_spec()?,
        optimizer: args.tuning.optimizer_spec(),
        refine: args.tuning.refine_spec(),
        ..JobSpec::default()
    };
    let (optimizer, refine) = tuning
        .tuning::<f64>(backends.guides.len())
        .map_err(CliError::Validation)?;

    let settings = if args.filter_off {
        FilterSettings::disabled()
    } else {
        FilterSettings::default()
    };
    let outcome = filter_records(records, &settings, &vocab);
    let fingerprint = settings.fingerprint();
    let mode: IouMode = args.iou_mode.into();

    let ours = PipelineUnderTest {
        backends: &backends,
        optimizer: optimizer.clone(),
        refine: refine.clone(),
    };
    let mut reports: Vec<(String, IoUReport)> = vec![(
        args.method.clone(),
        evaluate(&outcome.kept, &ours, backends.eval_segmenter.as_ref(), mode, &fingerprint, args.jobs),
    )];
    if args.baseline {
        let mut unguided = optimizer;
        unguided.weights.alpha_seg.iter_mut().for_each(|a| *a = 0.0);
        let baseline = PipelineUnderTest {
            backends: &backends,
            optimizer: unguided,
            refine,
        };
        reports.push((
            "unguided".into(),
            evaluate(&outcome.kept, &baseline, backends.eval_segmenter.as_ref(), mode, &fingerprint, args.jobs),
        ));
    }

    for (method, report) in &reports {
        for m in report.missing.iter().take(5) {
            eprintln!("{method}: record {} missing: {}", m.id, m.error);
        }
        if report.missing.len() > 5 {
            eprintln!("{method}: {} more missing records", report.missing.len() - 5);
        }
    }

    let rows: Vec<(&str, &IoUReport)> = reports.iter().map(|(m, r)| (m.as_str(), r)).collect();
    let mut text = render_report(&rows);
    text.push_str(&format!(
        "records: {raw_count} read, {} kept, {} dropped (excluded class {}, object count {}, small object {})\n",
        outcome.kept.len(),
        outcome.dropped,
        outcome.rejections.excluded_class,
        outcome.rejections.object_count,
        outcome.rejections.small_object,
    ));
    text.push_str("\npublished reference rows:\n");
    text.push_str(&render_reference_rows());

    let doc = json!({
        "iou_mode": format!("{mode:?}"),
        "filter": {
            "settings": settings,
            "fingerprint": fingerprint,
            "records": raw_count,
            "kept": outcome.kept.len(),
            "dropped": outcome.dropped,
            "rejections": outcome.rejections,
        },
        "methods": reports.iter().map(|(m, r)| json!({"method": m, "report": r})).collect::<Vec<_>>(),
        "published": REFERENCE_ROWS.iter().map(|(m, mean, std)| json!({"method": m, "mean": mean, "std": std})).collect::<Vec<_>>(),
    });

    create_dir(&args.out_dir)?;
    write_file(args.out_dir.join("report.txt"), &text)?;
    write_file(args.out_dir.join("report.json"), serde_json::to_string_pretty(&doc)?)?;
    print!("{text}");
    Ok(())
}
