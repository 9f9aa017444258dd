//! Job specification document shared by the CLI and the service.
//!
//! ```json
//! {"prompt": "a cat and a dog", "mask_path": "mask.png", "vocab_path": "vocab.json",
//!  "weights": {"alpha_clip": 1.0, "alpha_seg": [5.0]},
//!  "optimizer": {"max_steps": 300}, "refine": {"strength": 0.55},
//!  "fan_out": {"n_stage1": 2, "n_stage2": 2}, "seed": 7, "mode": "auto"}
//! ```
//!
//! The mask may also be sent inline as base64 PNG/PGM (`mask_png_base64`) and
//! the vocabulary inline (`vocab`).

use std::fmt;
use std::path::{Path, PathBuf};

use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::backends::Backends;
use crate::codec::decode_mask;
use crate::error::Error;
use crate::loss::LossWeights;
use crate::mask::SegMask;
use crate::pipeline::{GenerationJob, JobMode};
use crate::scalar::Scalar;
use crate::stage1::{route_guides, OptimizerConfig};
use crate::stage2::RefineConfig;
use crate::vocab::ClassVocabulary;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightsSpec {
    #[serde(default)]
    pub alpha_clip: Option<f64>,
    /// A single entry applies to every registered guide.
    #[serde(default)]
    pub alpha_seg: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub momentum: Option<f64>,
    #[serde(default)]
    pub plateau_patience: Option<usize>,
    #[serde(default)]
    pub plateau_tolerance: Option<f64>,
    #[serde(default)]
    pub init_scale: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RefineSpec {
    #[serde(default)]
    pub strength: Option<f64>,
    #[serde(default)]
    pub steps: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanOut {
    #[serde(default = "one")]
    pub n_stage1: usize,
    #[serde(default = "one")]
    pub n_stage2: usize,
}

fn one() -> usize {
    1
}

impl Default for FanOut {
    fn default() -> Self {
        Self { n_stage1: 1, n_stage2: 1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    #[serde(default)]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_png_base64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<ClassVocabulary>,
    #[serde(default)]
    pub weights: WeightsSpec,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub refine: RefineSpec,
    #[serde(default)]
    pub fan_out: FanOut,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub mode: JobMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

/// Every violated field of a job spec.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationErrors {
    pub errors: Vec<FieldError>,
}

impl ValidationErrors {
    fn push(&mut self, field: &str, message: impl Into<String>) {
        self.errors.push(FieldError {
            field: field.into(),
            message: message.into(),
        });
    }

    pub fn fields(&self) -> Vec<&str> {
        self.errors.iter().map(|e| e.field.as_str()).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }
}

impl fmt::Display for ValidationErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.errors.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{}: {}", e.field, e.message)?;
        }
        Ok(())
    }
}

impl std::error::Error for ValidationErrors {}

impl JobSpec {
    /// Raw mask bytes, from the inline field or the path resolved against `base_dir`.
    pub fn mask_bytes(&self, base_dir: &Path) -> Result<Vec<u8>, String> {
        match (&self.mask_png_base64, &self.mask_path) {
            (Some(b64), _) => base64::engine::general_purpose::STANDARD
                .decode(b64.trim())
                .map_err(|e| format!("invalid base64: {e}")),
            (None, Some(path)) => {
                let p = base_dir.join(path);
                std::fs::read(&p).map_err(|e| format!("cannot read {}: {e}", p.display()))
            }
            (None, None) => Err("either mask_path or mask_png_base64 is required".into()),
        }
    }

    fn vocabulary(&self, base_dir: &Path) -> Result<Option<ClassVocabulary>, String> {
        if let Some(v) = &self.vocab {
            return Ok(Some(v.clone()));
        }
        match &self.vocab_path {
            None => Ok(None),
            Some(path) => {
                let p = base_dir.join(path);
                let text = std::fs::read_to_string(&p).map_err(|e| format!("cannot read {}: {e}", p.display()))?;
                ClassVocabulary::from_json(&text).map(Some).map_err(|e| e.to_string())
            }
        }
    }

    /// Validates the whole spec against `backends` and builds a pending job.
    /// Weights, optimizer and refiner settings alone, validated like in [`JobSpec::resolve`].
    pub fn tuning<T: Scalar>(&self, n_guides: usize) -> Result<(OptimizerConfig<T>, RefineConfig<T>), ValidationErrors> {
        let mut errs = ValidationErrors::default();
        let tuned = self.resolve_tuning(n_guides, &mut errs);
        if errs.is_empty() {
            Ok(tuned)
        } else {
            Err(errs)
        }
    }

    fn resolve_tuning<T: Scalar>(&self, n_guides: usize, errs: &mut ValidationErrors) -> (OptimizerConfig<T>, RefineConfig<T>) {
        let mut weights = LossWeights::<T>::defaults(n_guides);
        if let Some(a) = self.weights.alpha_clip {
            if !(a >= 0.0 && a.is_finite()) {
                errs.push("weights.alpha_clip", format!("{a} must be a finite value >= 0"));
            }
            weights.alpha_clip = T::lit(a);
        }
        if let Some(list) = &self.weights.alpha_seg {
            for (i, a) in list.iter().enumerate() {
                if !(*a >= 0.0 && a.is_finite()) {
                    errs.push(&format!("weights.alpha_seg[{i}]"), format!("{a} must be a finite value >= 0"));
                }
            }
            match list.len() {
                1 => weights.alpha_seg = vec![T::lit(list[0]); n_guides],
                n if n == n_guides => weights.alpha_seg = list.iter().map(|a| T::lit(*a)).collect(),
                n => errs.push(
                    "weights.alpha_seg",
                    format!("{n} weights given for {n_guides} registered guides"),
                ),
            }
        }

        let mut optimizer = OptimizerConfig::<T>::with_defaults(n_guides);
        let o = &self.optimizer;
        if let Some(v) = o.max_steps {
            if v == 0 {
                errs.push("optimizer.max_steps", "must be positive");
            }
            optimizer.max_steps = v;
        }
        if let Some(v) = o.step_size {
            if !(v > 0.0 && v.is_finite()) {
                errs.push("optimizer.step_size", "must be positive");
            }
            optimizer.step_size = T::lit(v);
        }
        if let Some(v) = o.momentum {
            if !(0.0..1.0).contains(&v) {
                errs.push("optimizer.momentum", "must lie in [0, 1)");
            }
            optimizer.momentum = T::lit(v);
        }
        if let Some(v) = o.plateau_patience {
            if v == 0 {
                errs.push("optimizer.plateau_patience", "must be positive");
            }
            optimizer.plateau_patience = v;
        }
        if let Some(v) = o.plateau_tolerance {
            if !(v >= 0.0) {
                errs.push("optimizer.plateau_tolerance", "must be nonnegative");
            }
            optimizer.plateau_tolerance = T::lit(v);
        }
        if let Some(v) = o.init_scale {
            if !(v >= 0.0 && v.is_finite()) {
                errs.push("optimizer.init_scale", "must be nonnegative");
            }
            optimizer.init_scale = T::lit(v);
        }
        optimizer.weights = weights;
        optimizer.seed = self.seed;

        let mut refine = RefineConfig::<T>::default();
        if let Some(s) = self.refine.strength {
            if !(0.0..=1.0).contains(&s) {
                errs.push("refine.strength", format!("{s} outside [0, 1]"));
            }
            refine.strength = T::lit(s);
        }
        if let Some(steps) = self.refine.steps {
            if steps == 0 {
                errs.push("refine.steps", "must be at least 1");
            }
            refine.steps = steps;
        }
        refine.seed = self.seed;
        (optimizer, refine)
    }

    pub fn resolve<T: Scalar>(
        &self,
        id: &str,
        base_dir: &Path,
        backends: &Backends<T>,
    ) -> Result<GenerationJob<T>, ValidationErrors> {
        let mut errs = ValidationErrors::default();

        let prompt = match &self.prompt {
            None => {
                errs.push("prompt", "required");
                None
            }
            Some(p) => match backends.scorer.validate_prompt(p) {
                Ok(()) => Some(p.clone()),
                Err(e) => {
                    errs.push("prompt", e.to_string());
                    None
                }
            },
        };

        let vocab_ok = match self.vocabulary(base_dir) {
            Ok(Some(v)) if v != backends.vocab => {
                errs.push("vocab", "vocabulary differs from the one the backends were configured with");
                false
            }
            Ok(_) => true,
            Err(e) => {
                errs.push("vocab_path", e);
                false
            }
        };

        let mask_field = if self.mask_png_base64.is_some() { "mask_png_base64" } else { "mask_path" };
        let target: Option<SegMask<T>> = if vocab_ok {
            match self
                .mask_bytes(base_dir)
                .and_then(|bytes| decode_mask::<T>(&bytes, &backends.vocab).map_err(|e| e.to_string()))
            {
                Ok(m) => {
                    let (w, h) = backends.image_size();
                    if (m.width(), m.height()) != (w, h) {
                        errs.push(
                            mask_field,
                            format!("mask is {}x{}, generator produces {w}x{h}", m.width(), m.height()),
                        );
                        None
                    } else {
                        Some(m)
                    }
                }
                Err(e) => {
                    errs.push(mask_field, e);
                    None
                }
            }
        } else {
            None
        };

        let (optimizer, refine) = self.resolve_tuning::<T>(backends.guides.len(), &mut errs);

        if self.fan_out.n_stage1 == 0 {
            errs.push("fan_out.n_stage1", "must be positive");
        }
        if self.fan_out.n_stage2 == 0 {
            errs.push("fan_out.n_stage2", "must be positive");
        }

        if let Some(target) = &target {
            if let Err(e) = route_guides(target, &backends.guides) {
                let message = match e {
                    Error::OrphanClass { class_id, .. } => Error::OrphanClass {
                        class_id,
                        name: backends.vocab.name(class_id).to_string(),
                    }
                    .to_string(),
                    other => other.to_string(),
                };
                errs.push(mask_field, message);
            }
        }

        if !errs.is_empty() {
            return Err(errs);
        }
        let job = GenerationJob::new(
            id,
            prompt.expect("validated"),
            target.expect("validated"),
            optimizer,
            refine,
            self.seed,
            self.fan_out.n_stage1,
            self.fan_out.n_stage2,
        );
        job.map_err(|e| {
            let mut errs = ValidationErrors::default();
            errs.push("spec", e.to_string());
            errs
        })
    }
}
