//! Refinement of a stage-1 image through an img-to-img refiner.

use serde::{Deserialize, Serialize};

use crate::backends::Refiner;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::scalar::Scalar;

pub const DEFAULT_STRENGTH: f64 = 0.55;
pub const DEFAULT_REFINE_STEPS: usize = 25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct RefineConfig<T: Scalar> {
    pub strength: T,
    /// Step budget passed to the refiner.
    pub steps: usize,
    pub seed: u64,
}

impl<T: Scalar> Default for RefineConfig<T> {
    fn default() -> Self {
        Self {
            strength: T::lit(DEFAULT_STRENGTH),
            steps: DEFAULT_REFINE_STEPS,
            seed: 0,
        }
    }
}

impl<T: Scalar> RefineConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.strength >= T::zero() && self.strength <= T::one()) {
            return Err(Error::StrengthRange(self.strength.as_f64()));
        }
        if self.steps == 0 {
            return Err(Error::Config("refine steps must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct StageTwoResult<T: Scalar> {
    pub id: String,
    pub image: Image<T>,
    /// Id of the stage-1 result this was refined from.
    pub source: String,
    pub config: RefineConfig<T>,
}

/// Resizes to the refiner's resolution if it has one, then refines.
pub fn refine<T: Scalar>(
    stage1_image: &Image<T>,
    source: &str,
    prompt: &str,
    config: &RefineConfig<T>,
    refiner: &dyn Refiner<T>,
) -> Result<StageTwoResult<T>> {
    config.validate()?;
    let input = match refiner.output_size() {
        Some((w, h)) => resize_bridge(stage1_image, w, h)?,
        None => stage1_image.clone(),
    };
    let image = refiner
        .refine(&input, prompt, config.strength, config.steps, config.seed)
        .map_err(|e| match e {
            e @ Error::StrengthRange(_) => e,
            other => Error::Backend {
                name: refiner.name().to_string(),
                message: other.to_string(),
            },
        })?;
    if let Some(size) = refiner.output_size() {
        if image.dims() != size {
            return Err(Error::Backend {
                name: refiner.name().to_string(),
                message: format!("returned {:?}, configured output {:?}", image.dims(), size),
            });
        }
    }
    Ok(StageTwoResult {
        id: String::new(),
        image,
        source: source.to_string(),
        config: config.clone(),
    })
}

/// Bilinear resampling with half-pixel centers and clamped edges; identity when sizes match.
pub fn resize_bridge<T: Scalar>(img: &Image<T>, width: usize, height: usize) -> Result<Image<T>> {
    if width == 0 || height == 0 {
        return Err(Error::Config(format!("resize target {width}x{height} must be positive")));
    }
    if img.dims() == (width, height) {
        return Ok(img.clone());
    }
    let (sw, sh) = img.dims();
    let axis = |dst: usize, src_len: usize, dst_len: usize| {
        let pos = (T::lit(dst as f64) + T::lit(0.5)) * T::lit(src_len as f64) / T::lit(dst_len as f64) - T::lit(0.5);
        let pos = pos.max(T::zero()).min(T::lit((src_len - 1) as f64));
        let i0 = pos.floor().to_usize().unwrap_or(0).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, pos - T::lit(i0 as f64))
    };
    let mut data = Vec::with_capacity(width * height * 3);
    for y in 0..height {
        let (y0, y1, ty) = axis(y, sh, height);
        for x in 0..width {
            let (x0, x1, tx) = axis(x, sw, width);
            let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
            for ch in 0..3 {
                let top = a[ch] + (b[ch] - a[ch]) * tx;
                let bottom = c[ch] + (d[ch] - c[ch]) * tx;
                data.push(top + (bottom - top) * ty);
            }
        }
    }
    Image::new(width, height, data)
}
