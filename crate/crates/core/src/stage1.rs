//! Controlled generation: gradient descent on the generator latent under the
//! weighted text-score plus segmentation-guidance objective.

use std::collections::BTreeSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backends::{Backends, Segmenter};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::loss::{segmentation_loss_gradient, segmentation_loss_on_planes, total_loss, LossWeights};
use crate::mask::SegMask;
use crate::scalar::Scalar;

pub const DEFAULT_MAX_STEPS: usize = 300;
pub const DEFAULT_STEP_SIZE: f64 = 0.05;
pub const DEFAULT_PLATEAU_PATIENCE: usize = 30;
pub const DEFAULT_PLATEAU_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LatentState<T: Scalar> {
    pub z: Vec<T>,
    pub seed: u64,
    pub step: usize,
}

impl<T: Scalar> LatentState<T> {
    /// Standard-normal initial latent scaled by `scale`, drawn from `seed`.
    pub fn initial(dim: usize, seed: u64, scale: T) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = (0..dim)
            .map(|_| scale * T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        Self { z, seed, step: 0 }
    }
}

/// A segmentation model taking part in guidance, with its index into `LossWeights::alpha_seg`.
pub struct GuideRegistration<T: Scalar> {
    pub name: String,
    pub segmenter: Arc<dyn Segmenter<T>>,
    pub weight_index: usize,
}

impl<T: Scalar> Clone for GuideRegistration<T> {
    fn clone(&self) -> Self {
        Self {
            name: self.name.clone(),
            segmenter: self.segmenter.clone(),
            weight_index: self.weight_index,
        }
    }
}

impl<T: Scalar> std::fmt::Debug for GuideRegistration<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GuideRegistration")
            .field("name", &self.name)
            .field("classes", self.segmenter.supported_classes())
            .field("weight_index", &self.weight_index)
            .finish()
    }
}

impl<T: Scalar> GuideRegistration<T> {
    pub fn new(name: impl Into<String>, segmenter: Arc<dyn Segmenter<T>>, weight_index: usize) -> Result<Self> {
        let name = name.into();
        if segmenter.supported_classes().is_empty() {
            return Err(Error::Config(format!("guide `{name}` supports no classes")));
        }
        Ok(Self {
            name,
            segmenter,
            weight_index,
        })
    }

    /// Background followed by the supported classes.
    pub fn planes(&self) -> Vec<u8> {
        std::iter::once(0)
            .chain(self.segmenter.supported_classes().iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct OptimizerConfig<T: Scalar> {
    pub max_steps: usize,
    pub step_size: T,
    /// Heavy-ball momentum; 0 is plain gradient descent.
    #[serde(default)]
    pub momentum: T,
    pub plateau_patience: usize,
    pub plateau_tolerance: T,
    /// Standard deviation of the initial latent.
    #[serde(default = "one")]
    pub init_scale: T,
    pub weights: LossWeights<T>,
    #[serde(default)]
    pub seed: u64,
}

fn one<T: Scalar>() -> T {
    T::one()
}

impl<T: Scalar> OptimizerConfig<T> {
    pub fn with_defaults(guides: usize) -> Self {
        Self {
            max_steps: DEFAULT_MAX_STEPS,
            step_size: T::lit(DEFAULT_STEP_SIZE),
            momentum: T::zero(),
            plateau_patience: DEFAULT_PLATEAU_PATIENCE,
            plateau_tolerance: T::lit(DEFAULT_PLATEAU_TOLERANCE),
            init_scale: T::one(),
            weights: LossWeights::defaults(guides),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        if !(self.step_size > T::zero()) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if !(self.momentum >= T::zero() && self.momentum < T::one()) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.plateau_patience == 0 {
            return Err(Error::Config("plateau_patience must be positive".into()));
        }
        if !(self.plateau_tolerance >= T::zero()) {
            return Err(Error::Config("plateau_tolerance must be nonnegative".into()));
        }
        if !(self.init_scale >= T::zero()) {
            return Err(Error::Config("init_scale must be nonnegative".into()));
        }
        self.weights.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TraceRow<T: Scalar> {
    pub step: usize,
    pub l_clip: T,
    /// One entry per routed guide, in routing order.
    pub l_seg: Vec<T>,
    pub l_total: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct StageOneResult<T: Scalar> {
    pub id: String,
    pub image: Image<T>,
    pub final_loss: T,
    /// Names of the routed guides, matching `TraceRow::l_seg`.
    pub guides: Vec<String>,
    pub loss_trace: Vec<TraceRow<T>>,
    /// Latent at the best step.
    pub latent: LatentState<T>,
}

impl<T: Scalar> StageOneResult<T> {
    pub fn trace_csv(&self) -> String {
        let mut out = String::from("step,l_clip");
        for g in &self.guides {
            out.push_str(&format!(",l_seg[{g}]"));
        }
        out.push_str(",l_total\n");
        for row in &self.loss_trace {
            out.push_str(&format!("{},{}", row.step, row.l_clip));
            for l in &row.l_seg {
                out.push_str(&format!(",{l}"));
            }
            out.push_str(&format!(",{}\n", row.l_total));
        }
        out
    }

    pub fn trace_json(&self) -> serde_json::Value {
        serde_json::json!({
            "id": self.id,
            "guides": self.guides,
            "best_step": self.latent.step,
            "final_loss": self.final_loss.as_f64(),
            "rows": self.loss_trace.iter().map(|r| serde_json::json!({
                "step": r.step,
                "l_clip": r.l_clip.as_f64(),
                "l_seg": r.l_seg.iter().map(|v| v.as_f64()).collect::<Vec<_>>(),
                "l_total": r.l_total.as_f64(),
            })).collect::<Vec<_>>(),
        })
    }
}

/// Registrations whose supported classes meet the foreground classes of `target`, in registration order.
pub fn route_guides<T: Scalar>(
    target: &SegMask<T>,
    registered: &[GuideRegistration<T>],
) -> Result<Vec<GuideRegistration<T>>> {
    if !target.is_hard() {
        return Err(Error::MaskNotHard("target"));
    }
    let present: BTreeSet<u8> = target.classes_present().into_iter().filter(|&c| c > 0).collect();
    if let Some(&orphan) = present
        .iter()
        .find(|c| !registered.iter().any(|g| g.segmenter.supported_classes().contains(c)))
    {
        return Err(Error::OrphanClass {
            class_id: orphan,
            name: format!("class {orphan}"),
        });
    }
    Ok(registered
        .iter()
        .filter(|g| !g.segmenter.supported_classes().is_disjoint(&present))
        .cloned()
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown<T: Scalar> {
    pub l_clip: T,
    pub l_seg: Vec<T>,
    pub l_total: T,
}

/// The stage-1 objective as a function of the latent, with guides already routed.
pub struct Objective<'a, T: Scalar> {
    backends: &'a Backends<T>,
    prompt: &'a str,
    target: &'a SegMask<T>,
    guides: Vec<GuideRegistration<T>>,
    weights: LossWeights<T>,
}

impl<'a, T: Scalar> Objective<'a, T> {
    pub fn new(
        prompt: &'a str,
        target: &'a SegMask<T>,
        backends: &'a Backends<T>,
        weights: &LossWeights<T>,
    ) -> Result<Self> {
        weights.validate()?;
        let (w, h) = backends.generator.output_size();
        if (target.width(), target.height(), target.num_classes()) != (w, h, backends.vocab.len()) {
            return Err(Error::shape(
                format!("target {}", target.shape_string()),
                format!("generator {}x{}x{}", backends.vocab.len(), h, w),
            ));
        }
        if weights.alpha_seg.len() != backends.guides.len() {
            return Err(Error::LengthMismatch {
                what: "guide weights",
                expected: backends.guides.len(),
                found: weights.alpha_seg.len(),
            });
        }
        backends.scorer.validate_prompt(prompt)?;
        let guides = route_guides(target, &backends.guides).map_err(|e| match e {
            Error::OrphanClass { class_id, .. } => Error::OrphanClass {
                class_id,
                name: backends.vocab.name(class_id).to_string(),
            },
            other => other,
        })?;
        let indices: Vec<usize> = guides.iter().map(|g| g.weight_index).collect();
        let weights = weights.select(&indices)?;
        Ok(Self {
            backends,
            prompt,
            target,
            guides,
            weights,
        })
    }

    pub fn guides(&self) -> &[GuideRegistration<T>] {
        &self.guides
    }

    /// Weights of the routed guides, aligned with `LossBreakdown::l_seg`.
    pub fn active_weights(&self) -> &LossWeights<T> {
        &self.weights
    }

    pub fn loss(&self, z: &[T]) -> Result<LossBreakdown<T>> {
        let image = self.backends.generator.decode(z)?;
        self.loss_of_image(&image)
    }

    fn loss_of_image(&self, image: &Image<T>) -> Result<LossBreakdown<T>> {
        let l_clip = self.backends.scorer.score(image, self.prompt)?;
        let l_seg = self
            .guides
            .iter()
            .map(|g| {
                let pred = g.segmenter.predict(image)?;
                segmentation_loss_on_planes(&pred, self.target, &g.planes())
            })
            .collect::<Result<Vec<_>>>()?;
        let l_total = total_loss(l_clip, &l_seg, &self.weights)?;
        Ok(LossBreakdown { l_clip, l_seg, l_total })
    }

    /// Loss, gradient with respect to `z`, and the decoded image.
    pub fn evaluate(&self, z: &[T]) -> Result<(LossBreakdown<T>, Vec<T>, Image<T>)> {
        let image = self.backends.generator.decode(z)?;
        let l_clip = self.backends.scorer.score(&image, self.prompt)?;
        let mut image_grad: Vec<T> = self
            .backends
            .scorer
            .score_gradient(&image, self.prompt)?
            .into_iter()
            .map(|g| self.weights.alpha_clip * g)
            .collect();
        let mut l_seg = Vec::with_capacity(self.guides.len());
        for (g, alpha) in self.guides.iter().zip(&self.weights.alpha_seg) {
            let planes = g.planes();
            let pred = g.segmenter.predict(&image)?;
            l_seg.push(segmentation_loss_on_planes(&pred, self.target, &planes)?);
            let upstream = segmentation_loss_gradient(&pred, self.target, &planes)?;
            let seg_grad = g.segmenter.predict_vjp(&image, &upstream)?;
            for (acc, v) in image_grad.iter_mut().zip(seg_grad) {
                *acc += *alpha * v;
            }
        }
        let l_total = total_loss(l_clip, &l_seg, &self.weights)?;
        let grad = self.backends.generator.decode_vjp(z, &image_grad)?;
        Ok((LossBreakdown { l_clip, l_seg, l_total }, grad, image))
    }
}

pub fn optimize<T: Scalar>(
    prompt: &str,
    target: &SegMask<T>,
    backends: &Backends<T>,
    config: &OptimizerConfig<T>,
) -> Result<StageOneResult<T>> {
    optimize_with(prompt, target, backends, config, &mut |_| {})
}

/// [`optimize`] with a callback receiving every trace row as it is produced.
pub fn optimize_with<T: Scalar>(
    prompt: &str,
    target: &SegMask<T>,
    backends: &Backends<T>,
    config: &OptimizerConfig<T>,
    on_step: &mut dyn FnMut(&TraceRow<T>),
) -> Result<StageOneResult<T>> {
    config.validate()?;
    if !target.is_hard() {
        return Err(Error::MaskNotHard("target"));
    }
    let objective = Objective::new(prompt, target, backends, &config.weights)?;
    let mut state = LatentState::initial(backends.generator.latent_dim(), config.seed, config.init_scale);
    let mut velocity = vec![T::zero(); state.z.len()];
    let mut trace = Vec::new();
    let mut best: Option<(T, LatentState<T>, Image<T>)> = None;
    let mut stall = 0usize;

    for step in 0..config.max_steps {
        state.step = step;
        let (loss, grad, image) = objective.evaluate(&state.z)?;
        let row = TraceRow {
            step,
            l_clip: loss.l_clip,
            l_seg: loss.l_seg,
            l_total: loss.l_total,
        };
        if !row.l_total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                step,
                l_clip: row.l_clip.as_f64(),
                l_seg: row.l_seg.iter().map(|v| v.as_f64()).collect(),
                l_total: row.l_total.as_f64(),
            });
        }
        on_step(&row);
        let l_total = row.l_total;
        trace.push(row);

        let best_loss = best.as_ref().map(|b| b.0).unwrap_or(T::infinity());
        if l_total < best_loss - config.plateau_tolerance {
            stall = 0;
        } else {
            stall += 1;
        }
        if l_total < best_loss {
            best = Some((l_total, state.clone(), image));
        }
        if stall >= config.plateau_patience || step + 1 == config.max_steps {
            break;
        }

        for ((z, v), g) in state.z.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = config.momentum * *v + *g;
            *z -= config.step_size * *v;
        }
        if state.z.iter().any(|z| !z.is_finite()) {
            let last = trace.last().expect("row pushed this step");
            return Err(Error::NonFinite {
                step,
                l_clip: last.l_clip.as_f64(),
                l_seg: last.l_seg.iter().map(|v| v.as_f64()).collect(),
                l_total: last.l_total.as_f64(),
            });
        }
    }

    let (final_loss, latent, image) = best.expect("at least one step runs");
    Ok(StageOneResult {
        id: String::new(),
        image,
        final_loss,
        guides: objective.guides().iter().map(|g| g.name.clone()).collect(),
        loss_trace: trace,
        latent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::toy::ToySegmenter;
    use crate::vocab::ClassVocabulary;

    fn guides(sets: &[&[u8]]) -> Vec<GuideRegistration<f64>> {
        let v = ClassVocabulary::toy();
        sets.iter()
            .enumerate()
            .map(|(i, s)| {
                let seg = ToySegmenter::<f64>::specialized(format!("g{i}"), &v, s.iter().copied().collect(), 0.05)
                    .unwrap();
                GuideRegistration::new(format!("g{i}"), Arc::new(seg), i).unwrap()
            })
            .collect()
    }

    fn target(ids: &[u8]) -> SegMask<f64> {
        SegMask::from_class_map(ids.len(), 1, 5, ids).unwrap()
    }

    fn names(gs: &[GuideRegistration<f64>]) -> Vec<String> {
        gs.iter().map(|g| g.name.clone()).collect()
    }

    #[test]
    fn routes_single_cover() {
        let gs = guides(&[&[1, 2], &[3, 4]]);
        assert_eq!(names(&route_guides(&target(&[0, 3]), &gs).unwrap()), vec!["g1"]);
    }

    #[test]
    fn routes_both_in_registration_order() {
        let gs = guides(&[&[1, 2], &[3, 4]]);
        assert_eq!(names(&route_guides(&target(&[3, 1]), &gs).unwrap()), vec!["g0", "g1"]);
    }

    #[test]
    fn orphan_class_is_an_error() {
        let gs = guides(&[&[1], &[2]]);
        let err = route_guides(&target(&[0, 4]), &gs).unwrap_err();
        assert!(matches!(err, Error::OrphanClass { class_id: 4, .. }));
    }

    #[test]
    fn overlapping_guides_both_contribute() {
        let gs = guides(&[&[1, 2], &[2, 3]]);
        assert_eq!(names(&route_guides(&target(&[2]), &gs).unwrap()), vec!["g0", "g1"]);
    }

    #[test]
    fn config_validation() {
        let mut c = OptimizerConfig::<f64>::with_defaults(1);
        assert!(c.validate().is_ok());
        c.step_size = 0.0;
        assert!(c.validate().is_err());
        let mut c = OptimizerConfig::<f64>::with_defaults(1);
        c.max_steps = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let v = ClassVocabulary::toy();
        let backends = Backends::<f64>::toy(&v).unwrap();
        let (w, h) = backends.image_size();
        let mut ids = vec![0u8; w * h];
        ids[0] = 1;
        let t = SegMask::from_class_map(w, h, v.len(), &ids).unwrap();
        let mut config = OptimizerConfig::with_defaults(1);
        config.max_steps = 3;
        let r = optimize("a cat", &t, &backends, &config).unwrap();
        let csv = r.trace_csv();
        assert!(csv.starts_with("step,l_clip,l_seg[toy],l_total\n"));
        assert_eq!(csv.lines().count(), 4);
    }
}
