//! Segmentation-guidance loss and the weighted composite objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::SegMask;
use crate::scalar::Scalar;

pub const DEFAULT_ALPHA_CLIP: f64 = 1.0;
pub const DEFAULT_ALPHA_SEG: f64 = 5.0;

/// Weight on the text-image score and one weight per registered guide.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LossWeights<T: Scalar> {
    pub alpha_clip: T,
    pub alpha_seg: Vec<T>,
}

impl<T: Scalar> LossWeights<T> {
    pub fn new(alpha_clip: T, alpha_seg: Vec<T>) -> Result<Self> {
        let w = Self { alpha_clip, alpha_seg };
        w.validate()?;
        Ok(w)
    }

    /// Defaults for `guides` registered guide models.
    pub fn defaults(guides: usize) -> Self {
        Self {
            alpha_clip: T::lit(DEFAULT_ALPHA_CLIP),
            alpha_seg: vec![T::lit(DEFAULT_ALPHA_SEG); guides],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_clip >= T::zero()) || !self.alpha_clip.is_finite() {
            return Err(Error::Config(format!("alpha_clip {} must be a finite value >= 0", self.alpha_clip)));
        }
        if let Some((i, a)) = self
            .alpha_seg
            .iter()
            .enumerate()
            .find(|(_, a)| !(**a >= T::zero()) || !a.is_finite())
        {
            return Err(Error::Config(format!("alpha_seg[{i}] {a} must be a finite value >= 0")));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self {
            alpha_clip: self.alpha_clip * factor,
            alpha_seg: self.alpha_seg.iter().map(|a| *a * factor).collect(),
        }
    }

    /// Weights picked out for a subset of guides, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let alpha_seg = indices
            .iter()
            .map(|&i| {
                self.alpha_seg.get(i).copied().ok_or(Error::LengthMismatch {
                    what: "guide weights",
                    expected: i + 1,
                    found: self.alpha_seg.len(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            alpha_clip: self.alpha_clip,
            alpha_seg,
        })
    }
}

/// Mean squared error over every plane value.
pub fn segmentation_loss<T: Scalar>(pred: &SegMask<T>, target: &SegMask<T>) -> Result<T> {
    pred.check_same_shape(target)?;
    let n = T::lit(pred.data().len() as f64);
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (*p - *t) * (*p - *t))
        .sum::<T>()
        / n)
}

/// Mean squared error over the listed class planes only.
pub fn segmentation_loss_on_planes<T: Scalar>(pred: &SegMask<T>, target: &SegMask<T>, planes: &[u8]) -> Result<T> {
    pred.check_same_shape(target)?;
    check_planes(pred, planes)?;
    let n = T::lit((planes.len() * pred.pixels()) as f64);
    Ok(planes
        .iter()
        .flat_map(|&k| pred.plane(k as usize).iter().zip(target.plane(k as usize)))
        .map(|(p, t)| (*p - *t) * (*p - *t))
        .sum::<T>()
        / n)
}

/// Gradient of [`segmentation_loss_on_planes`] with respect to `pred`, plane-major, zero off the listed planes.
pub fn segmentation_loss_gradient<T: Scalar>(pred: &SegMask<T>, target: &SegMask<T>, planes: &[u8]) -> Result<Vec<T>> {
    pred.check_same_shape(target)?;
    check_planes(pred, planes)?;
    let px = pred.pixels();
    let scale = T::lit(2.0) / T::lit((planes.len() * px) as f64);
    let mut grad = vec![T::zero(); pred.data().len()];
    for &k in planes {
        let k = k as usize;
        for (g, (p, t)) in grad[k * px..(k + 1) * px]
            .iter_mut()
            .zip(pred.plane(k).iter().zip(target.plane(k)))
        {
            *g = scale * (*p - *t);
        }
    }
    Ok(grad)
}

fn check_planes<T: Scalar>(mask: &SegMask<T>, planes: &[u8]) -> Result<()> {
    if planes.is_empty() {
        return Err(Error::Config("no planes selected for segmentation loss".into()));
    }
    if let Some(bad) = planes.iter().find(|&&k| k as usize >= mask.num_classes()) {
        return Err(Error::Config(format!(
            "plane {bad} outside mask of {} classes",
            mask.num_classes()
        )));
    }
    Ok(())
}

/// `alpha_clip * l_clip + sum_i alpha_seg[i] * l_segs[i]`.
pub fn total_loss<T: Scalar>(l_clip: T, l_segs: &[T], weights: &LossWeights<T>) -> Result<T> {
    if l_segs.len() != weights.alpha_seg.len() {
        return Err(Error::LengthMismatch {
            what: "segmentation losses",
            expected: weights.alpha_seg.len(),
            found: l_segs.len(),
        });
    }
    let mut total = weights.alpha_clip * l_clip;
    for (a, l) in weights.alpha_seg.iter().zip(l_segs) {
        total += *a * *l;
    }
    Ok(total)
}
