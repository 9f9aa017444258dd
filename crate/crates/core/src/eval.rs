//! IoU evaluation protocol: manifest ingestion, record filtering,
//! generation under test, re-segmentation and aggregate statistics.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backends::{Backends, Segmenter};
use crate::codec::{decode_mask, encode_mask};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::iou::{iou, IouMode};
use crate::mask::SegMask;
use crate::pipeline::{run_job, GenerationJob, JobMode, JobStatus};
use crate::scalar::Scalar;
use crate::seed::{hash64_str, sha256_hex};
use crate::stage1::OptimizerConfig;
use crate::stage2::{resize_bridge, RefineConfig};
use crate::vocab::ClassVocabulary;

/// Published IoU rows (mean, std) for methods that are not re-run here.
pub const REFERENCE_ROWS: [(&str, f64, f64); 3] = [
    ("SI", 0.16, 0.10),
    ("BLD", 0.17, 0.11),
    ("multidiffusion", 0.26, 0.12),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct DatasetRecord<T: Scalar> {
    pub id: String,
    pub target: SegMask<T>,
    pub caption: String,
    /// `(class_id, pixel_fraction)` for each foreground class present, ascending.
    object_stats: Vec<(u8, f64)>,
}

impl<T: Scalar> DatasetRecord<T> {
    pub fn new(id: impl Into<String>, target: SegMask<T>, caption: impl Into<String>) -> Result<Self> {
        if !target.is_hard() {
            return Err(Error::MaskNotHard("ground-truth layout"));
        }
        let object_stats = target
            .class_fractions()
            .into_iter()
            .enumerate()
            .skip(1)
            .filter(|(_, f)| *f > 0.0)
            .map(|(k, f)| (k as u8, f))
            .collect();
        Ok(Self {
            id: id.into(),
            target,
            caption: caption.into(),
            object_stats,
        })
    }

    pub fn object_stats(&self) -> &[(u8, f64)] {
        &self.object_stats
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterSettings {
    pub min_objects: usize,
    pub max_objects: usize,
    pub min_area_fraction: f64,
    /// Records containing any of these classes are dropped.
    pub excluded_classes: Vec<String>,
    pub enabled: bool,
}

impl Default for FilterSettings {
    fn default() -> Self {
        Self {
            min_objects: 2,
            max_objects: 4,
            min_area_fraction: 0.05,
            excluded_classes: vec!["person".into()],
            enabled: true,
        }
    }
}

impl FilterSettings {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    /// Short hash of the settings, stamped into reports.
    pub fn fingerprint(&self) -> String {
        let doc = serde_json::to_string(self).expect("serializable");
        sha256_hex(doc.as_bytes())[..16].to_string()
    }
}

/// Failures per clause; one record can fail several clauses.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClauseRejections {
    pub excluded_class: usize,
    pub object_count: usize,
    pub small_object: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome<T: Scalar> {
    pub kept: Vec<DatasetRecord<T>>,
    pub dropped: usize,
    pub rejections: ClauseRejections,
}

/// Keeps records with `min_objects..=max_objects` foreground classes, none of
/// them excluded, and every one covering at least `min_area_fraction` of the image.
pub fn filter_records<T: Scalar>(
    records: Vec<DatasetRecord<T>>,
    settings: &FilterSettings,
    vocab: &ClassVocabulary,
) -> FilterOutcome<T> {
    if !settings.enabled {
        return FilterOutcome {
            kept: records,
            dropped: 0,
            rejections: ClauseRejections::default(),
        };
    }
    let excluded: Vec<u8> = settings
        .excluded_classes
        .iter()
        .filter_map(|n| vocab.id_of(n))
        .collect();
    let mut rejections = ClauseRejections::default();
    let mut dropped = 0;
    let kept = records
        .into_iter()
        .filter(|r| {
            let stats = r.object_stats();
            let has_excluded = stats.iter().any(|(c, _)| excluded.contains(c));
            let bad_count = !(settings.min_objects..=settings.max_objects).contains(&stats.len());
            let small = stats.iter().any(|(_, f)| *f < settings.min_area_fraction);
            rejections.excluded_class += has_excluded as usize;
            rejections.object_count += bad_count as usize;
            rejections.small_object += small as usize;
            let keep = !(has_excluded || bad_count || small);
            dropped += (!keep) as usize;
            keep
        })
        .collect();
    FilterOutcome {
        kept,
        dropped,
        rejections,
    }
}

/// Produces the final image for a record; the default runs both stages.
pub trait ImageUnderTest<T: Scalar>: Sync {
    fn generate(&self, record: &DatasetRecord<T>, seed: u64) -> Result<Image<T>>;
}

/// Full two-stage pipeline in auto mode with one candidate and one refinement.
pub struct PipelineUnderTest<'a, T: Scalar> {
    pub backends: &'a Backends<T>,
    pub optimizer: OptimizerConfig<T>,
    pub refine: RefineConfig<T>,
}

impl<T: Scalar> ImageUnderTest<T> for PipelineUnderTest<'_, T> {
    fn generate(&self, record: &DatasetRecord<T>, seed: u64) -> Result<Image<T>> {
        let job = GenerationJob::new(
            record.id.clone(),
            record.caption.clone(),
            record.target.clone(),
            self.optimizer.clone(),
            self.refine.clone(),
            seed,
            1,
            1,
        )?;
        let job = run_job(job, JobMode::Auto, self.backends, &mut ())?;
        match job.status {
            JobStatus::Done => Ok(job.stage2.into_iter().next().expect("one refinement").image),
            _ => Err(Error::Backend {
                name: "pipeline".into(),
                message: job.failure.map(|f| f.message).unwrap_or_default(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordIou {
    pub id: String,
    pub iou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingRecord {
    pub id: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IoUReport {
    pub per_record: Vec<RecordIou>,
    pub missing: Vec<MissingRecord>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub n: usize,
    pub protocol_fingerprint: String,
}

impl IoUReport {
    pub fn from_records(per_record: Vec<RecordIou>, missing: Vec<MissingRecord>, fingerprint: String) -> Self {
        let (mean, std) = mean_std(per_record.iter().map(|r| r.iou));
        Self {
            n: per_record.len(),
            per_record,
            missing,
            mean,
            std,
            protocol_fingerprint: fingerprint,
        }
    }
}

/// Mean and population standard deviation; NaN for an empty input.
pub fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Seed used for a record's generation run.
pub fn record_seed(id: &str) -> u64 {
    hash64_str(id)
}

/// Generates, re-segments, hardens and scores each record against its layout.
/// Records run in parallel on up to `jobs` threads; results keep input order.
pub fn evaluate<T: Scalar>(
    records: &[DatasetRecord<T>],
    under_test: &dyn ImageUnderTest<T>,
    eval_segmenter: &dyn Segmenter<T>,
    mode: IouMode,
    fingerprint: &str,
    jobs: usize,
) -> IoUReport {
    let score = |r: &DatasetRecord<T>| -> Result<f64> {
        let image = under_test.generate(r, record_seed(&r.id))?;
        let image = resize_bridge(&image, r.target.width(), r.target.height())?;
        let predicted = eval_segmenter.predict(&image)?.harden();
        iou(&predicted, &r.target, mode)
    };
    let outcomes: Vec<Result<f64>> = if jobs <= 1 {
        records.iter().map(score).collect()
    } else {
        match rayon::ThreadPoolBuilder::new().num_threads(jobs).build() {
            Ok(pool) => pool.install(|| records.par_iter().map(score).collect()),
            Err(_) => records.iter().map(score).collect(),
        }
    };
    let mut per_record = Vec::new();
    let mut missing = Vec::new();
    for (r, outcome) in records.iter().zip(outcomes) {
        match outcome {
            Ok(v) => per_record.push(RecordIou { id: r.id.clone(), iou: v }),
            Err(e) => missing.push(MissingRecord {
                id: r.id.clone(),
                error: e.to_string(),
            }),
        }
    }
    IoUReport::from_records(per_record, missing, fingerprint.to_string())
}

/// Plain-text table, one row per method in input order.
pub fn render_report(rows: &[(&str, &IoUReport)]) -> String {
    let width = rows.iter().map(|(m, _)| m.len()).max().unwrap_or(0).max("method".len());
    let mut out = format!("{:<width$}  IoU\n", "method");
    for (method, report) in rows {
        if report.n == 0 {
            out.push_str(&format!("{method:<width$}  n=0  (missing={})\n", report.missing.len()));
        } else {
            out.push_str(&format!(
                "{method:<width$}  {:.2} ± {:.2}  (n={}, missing={})\n",
                report.mean,
                report.std,
                report.n,
                report.missing.len()
            ));
        }
    }
    let mut prints: Vec<&str> = rows.iter().map(|(_, r)| r.protocol_fingerprint.as_str()).collect();
    prints.dedup();
    out.push_str(&format!("protocol: {}\n", prints.join(", ")));
    out
}

/// Published reference rows appended below measured ones.
pub fn render_reference_rows() -> String {
    let width = REFERENCE_ROWS.iter().map(|(m, ..)| m.len()).max().unwrap_or(0);
    REFERENCE_ROWS
        .iter()
        .map(|(m, mean, std)| format!("{m:<width$}  {mean:.2} ± {std:.2}  (published)\n"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub mask_path: String,
    pub caption: String,
    pub vocab_path: String,
}

/// Parses JSON lines; blank lines are skipped and errors carry 1-based line numbers.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<ManifestEntry>(l).map_err(|e| Error::Manifest {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Loads masks and vocabularies for manifest entries. Paths are relative to `base_dir`.
pub fn load_records<T: Scalar>(
    entries: &[ManifestEntry],
    base_dir: &Path,
    vocab: &ClassVocabulary,
) -> Result<Vec<DatasetRecord<T>>> {
    entries
        .iter()
        .map(|e| {
            let vocab_text = std::fs::read_to_string(base_dir.join(&e.vocab_path))?;
            let record_vocab = ClassVocabulary::from_json(&vocab_text)?;
            if &record_vocab != vocab {
                return Err(Error::Config(format!(
                    "record `{}` uses a vocabulary different from the backends'",
                    e.id
                )));
            }
            let bytes = std::fs::read(base_dir.join(&e.mask_path))?;
            DatasetRecord::new(e.id.clone(), decode_mask(&bytes, vocab)?, e.caption.clone())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub count: usize,
    pub width: usize,
    pub height: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Side length range of each rectangle as a fraction of the image side.
    pub min_side: f64,
    pub max_side: f64,
    pub seed: u64,
}

/// Records made of axis-aligned rectangles of random foreground classes,
/// with captions in the toy prompt grammar.
pub fn synthetic_records<T: Scalar>(spec: &SyntheticSpec, vocab: &ClassVocabulary) -> Result<Vec<DatasetRecord<T>>> {
    let fg: Vec<u8> = vocab.foreground().map(|e| e.id).collect();
    if fg.is_empty() {
        return Err(Error::Config("vocabulary has no foreground classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.count)
        .map(|i| {
            let (w, h) = (spec.width, spec.height);
            let mut ids = vec![0u8; w * h];
            let k = rng.random_range(spec.min_objects..=spec.max_objects);
            let mut classes: Vec<u8> = Vec::new();
            while classes.len() < k.min(fg.len()) {
                let c = fg[rng.random_range(0..fg.len())];
                if !classes.contains(&c) {
                    classes.push(c);
                }
            }
            for &c in &classes {
                let rw = ((rng.random_range(spec.min_side..=spec.max_side) * w as f64).round() as usize).clamp(1, w);
                let rh = ((rng.random_range(spec.min_side..=spec.max_side) * h as f64).round() as usize).clamp(1, h);
                let x0 = rng.random_range(0..=w - rw);
                let y0 = rng.random_range(0..=h - rh);
                for y in y0..y0 + rh {
                    for x in x0..x0 + rw {
                        ids[y * w + x] = c;
                    }
                }
            }
            let mask = SegMask::from_class_map(w, h, vocab.len(), &ids)?;
            let present: Vec<&str> = classes
                .iter()
                .filter(|&&c| ids.contains(&c))
                .map(|&c| vocab.name(c))
                .collect();
            let caption = present
                .iter()
                .map(|n| format!("a {n}"))
                .collect::<Vec<_>>()
                .join(" and ");
            DatasetRecord::new(format!("synthetic-{i:04}"), mask, caption)
        })
        .collect()
}

/// Writes masks, a shared vocabulary sidecar and `manifest.jsonl` into `dir`.
pub fn write_manifest<T: Scalar>(dir: &Path, records: &[DatasetRecord<T>], vocab: &ClassVocabulary) -> Result<()> {
    std::fs::create_dir_all(dir.join("masks"))?;
    std::fs::write(dir.join("vocab.json"), vocab.to_json())?;
    let mut lines = String::new();
    for r in records {
        let enc = encode_mask(&r.target, vocab)?;
        let rel = format!("masks/{}.png", r.id);
        std::fs::write(dir.join(&rel), &enc.png)?;
        let entry = ManifestEntry {
            id: r.id.clone(),
            mask_path: rel,
            caption: r.caption.clone(),
            vocab_path: "vocab.json".into(),
        };
        lines.push_str(&serde_json::to_string(&entry)?);
        lines.push('\n');
    }
    std::fs::write(dir.join("manifest.jsonl"), lines)?;
    Ok(())
}
