//! Two-stage mask-controlled image generation.
//!
//! Stage 1 runs gradient descent on a generator latent under a weighted sum
//! of a text-image score and per-model segmentation MSE terms, so the decoded
//! image follows a user-drawn class layout. Stage 2 hands that image to an
//! img-to-img refiner with a strength knob. The numeric core is generic over
//! [`Scalar`] (f32 or f64); the aliases below fix it to f64.
//!
//! Analytic toy backends make every gradient exact and checkable at desk
//! scale; real models plug in through the contracts in [`backends`].

pub mod backends;
pub mod codec;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod image;
pub mod iou;
pub mod jobspec;
pub mod loss;
pub mod mask;
pub mod pipeline;
pub mod scalar;
pub mod seed;
pub mod stage1;
pub mod stage2;
pub mod toytask;
pub mod vocab;

pub use backends::{BackendConfig, BackendRegistry, Backends};
pub use error::{Error, Result};
pub use image::Image;
pub use iou::{iou, IouMode};
pub use loss::{segmentation_loss, total_loss, LossWeights};
pub use mask::SegMask;
pub use pipeline::{run_job, select_candidates, GenerationJob, JobMode, JobStatus};
pub use scalar::Scalar;
pub use stage1::{optimize, route_guides, GuideRegistration, LatentState, OptimizerConfig, StageOneResult};
pub use stage2::{refine, resize_bridge, RefineConfig, StageTwoResult};
pub use vocab::ClassVocabulary;

pub type Image64 = Image<f64>;
pub type Image32 = Image<f32>;
pub type SegMask64 = SegMask<f64>;
pub type SegMask32 = SegMask<f32>;
pub type Backends64 = Backends<f64>;
pub type LossWeights64 = LossWeights<f64>;
pub type OptimizerConfig64 = OptimizerConfig<f64>;
pub type RefineConfig64 = RefineConfig<f64>;
pub type GenerationJob64 = GenerationJob<f64>;
pub type StageOneResult64 = StageOneResult<f64>;
pub type StageTwoResult64 = StageTwoResult<f64>;
