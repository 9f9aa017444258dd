//! The calibrated toy layout task: one cat square on a 16x16 canvas.
//!
//! Settings were frozen from a sweep with `examples/calibrate.rs` over
//! segmenter temperature, blob count, initial latent spread, selector spread,
//! step size, momentum and segmentation weight. On seeds 0..20 the frozen
//! config scored a mean IoU of 0.846 guided versus 0.344 with `alpha_seg = 0`;
//! on seeds 100..120 and 1000..1020 it scored 0.879 and 0.877.

use rayon::prelude::*;

use crate::backends::{BackendConfig, BackendRegistry, Backends};
use crate::error::Result;
use crate::iou::{iou, IouMode};
use crate::mask::SegMask;
use crate::scalar::Scalar;
use crate::stage1::{optimize, OptimizerConfig};
use crate::vocab::ClassVocabulary;

pub const SIZE: usize = 16;
pub const SQUARE_SIDE: usize = 11;
pub const SQUARE_OFFSET: usize = 2;
pub const PROMPT: &str = "a cat";
pub const ALPHA_SEG: f64 = 50.0;
/// Frozen acceptance threshold on the guided mean IoU.
pub const MIN_MEAN_IOU: f64 = 0.8;
pub const SEEDS: std::ops::Range<u64> = 0..20;

pub fn backend_config() -> BackendConfig {
    let mut config = BackendConfig::default();
    config.params.insert(
        "toy".into(),
        serde_json::json!({
            "width": SIZE,
            "height": SIZE,
            "blobs": 8,
            "temperature": 0.3,
            "selector_spread": 1.0,
        }),
    );
    config
}

pub fn backends<T: Scalar>() -> Result<Backends<T>> {
    BackendRegistry::with_builtins().build(&backend_config(), &ClassVocabulary::toy())
}

pub fn target<T: Scalar>() -> SegMask<T> {
    let vocab = ClassVocabulary::toy();
    let cat = vocab.id_of("cat").expect("toy vocabulary has cat");
    let mut ids = vec![0u8; SIZE * SIZE];
    for y in SQUARE_OFFSET..SQUARE_OFFSET + SQUARE_SIDE {
        for x in SQUARE_OFFSET..SQUARE_OFFSET + SQUARE_SIDE {
            ids[y * SIZE + x] = cat;
        }
    }
    SegMask::from_class_map(SIZE, SIZE, vocab.len(), &ids).expect("valid class map")
}

pub fn optimizer_config<T: Scalar>(alpha_seg: f64, seed: u64) -> OptimizerConfig<T> {
    let mut config = OptimizerConfig::with_defaults(1);
    config.step_size = T::lit(0.1);
    config.momentum = T::lit(0.9);
    config.init_scale = T::lit(1.7);
    config.weights.alpha_seg = vec![T::lit(alpha_seg)];
    config.seed = seed;
    config
}

/// Final IoU of hardened re-segmentation against the target, per seed.
pub fn run<T: Scalar>(alpha_seg: f64, seeds: std::ops::Range<u64>) -> Result<Vec<f64>> {
    let backends = backends::<T>()?;
    let target = target::<T>();
    seeds
        .into_par_iter()
        .map(|seed| {
            let result = optimize(PROMPT, &target, &backends, &optimizer_config(alpha_seg, seed))?;
            let predicted = backends.eval_segmenter.predict(&result.image)?.harden();
            iou(&predicted, &target, IouMode::PerClass)
        })
        .collect()
}
