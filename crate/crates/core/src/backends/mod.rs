//! Model contracts used by both stages, the analytic toy implementations,
//! and the registry that assembles a backend set from configuration.
//!
//! Gradients are exposed as vector-Jacobian products: each differentiable
//! contract takes the upstream gradient with respect to its output and returns
//! the gradient with respect to its input. Image gradients use the interleaved
//! layout of [`Image`]; mask gradients use the plane-major layout of [`SegMask`].

use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};

use crate::error::Result;
use crate::image::Image;
use crate::mask::SegMask;
use crate::scalar::Scalar;

pub mod contract;
pub mod prompt;
pub mod registry;
pub mod toy;

pub use registry::{BackendConfig, BackendRegistry, Backends};
pub use toy::{ToyGenerator, ToyRefiner, ToyScorer, ToySegmenter};

/// Maps a latent vector to an image.
pub trait Generator<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn latent_dim(&self) -> usize;
    fn output_size(&self) -> (usize, usize);
    fn decode(&self, z: &[T]) -> Result<Image<T>>;
    /// Gradient with respect to `z` given the gradient with respect to the decoded image.
    fn decode_vjp(&self, z: &[T], upstream: &[T]) -> Result<Vec<T>>;
    /// Exclusive backends are serialized across concurrent jobs.
    fn exclusive(&self) -> bool {
        false
    }
}

/// Text-image loss: lower is a better prompt match.
pub trait Scorer<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, image: &Image<T>, prompt: &str) -> Result<T>;
    fn score_gradient(&self, image: &Image<T>, prompt: &str) -> Result<Vec<T>>;
    /// Rejects prompts the scorer cannot interpret, before any optimization starts.
    fn validate_prompt(&self, _prompt: &str) -> Result<()> {
        Ok(())
    }
    fn exclusive(&self) -> bool {
        false
    }
}

/// Soft per-pixel class prediction over its supported classes plus background.
pub trait Segmenter<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    fn num_classes(&self) -> usize;
    /// Foreground class ids this model predicts. Background (0) is implicit.
    fn supported_classes(&self) -> &BTreeSet<u8>;
    fn predict(&self, image: &Image<T>) -> Result<SegMask<T>>;
    /// Gradient with respect to the image given the gradient with respect to the mask planes.
    fn predict_vjp(&self, image: &Image<T>, upstream: &[T]) -> Result<Vec<T>>;
    fn exclusive(&self) -> bool {
        false
    }
}

/// Img-to-img refinement with a strength in [0,1]: 0 returns the input, 1 ignores it.
pub trait Refiner<T: Scalar>: Send + Sync {
    fn name(&self) -> &str;
    /// Resolution the refiner works at; `None` keeps the input size.
    fn output_size(&self) -> Option<(usize, usize)> {
        None
    }
    fn refine(&self, image: &Image<T>, prompt: &str, strength: T, steps: usize, seed: u64) -> Result<Image<T>>;
    fn exclusive(&self) -> bool {
        false
    }
}

/// Serializes every call into an adapter that declared itself exclusive.
pub struct Exclusive<B: ?Sized> {
    inner: Arc<B>,
    lock: Mutex<()>,
}

impl<B: ?Sized> Exclusive<B> {
    pub fn new(inner: Arc<B>) -> Self {
        Self {
            inner,
            lock: Mutex::new(()),
        }
    }

    fn with<R>(&self, f: impl FnOnce(&B) -> R) -> R {
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        f(&self.inner)
    }
}

impl<T: Scalar, B: Generator<T> + ?Sized> Generator<T> for Exclusive<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }
    fn output_size(&self) -> (usize, usize) {
        self.inner.output_size()
    }
    fn decode(&self, z: &[T]) -> Result<Image<T>> {
        self.with(|b| b.decode(z))
    }
    fn decode_vjp(&self, z: &[T], upstream: &[T]) -> Result<Vec<T>> {
        self.with(|b| b.decode_vjp(z, upstream))
    }
    fn exclusive(&self) -> bool {
        true
    }
}

impl<T: Scalar, B: Scorer<T> + ?Sized> Scorer<T> for Exclusive<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn score(&self, image: &Image<T>, prompt: &str) -> Result<T> {
        self.with(|b| b.score(image, prompt))
    }
    fn score_gradient(&self, image: &Image<T>, prompt: &str) -> Result<Vec<T>> {
        self.with(|b| b.score_gradient(image, prompt))
    }
    fn validate_prompt(&self, prompt: &str) -> Result<()> {
        self.inner.validate_prompt(prompt)
    }
    fn exclusive(&self) -> bool {
        true
    }
}

impl<T: Scalar, B: Segmenter<T> + ?Sized> Segmenter<T> for Exclusive<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn supported_classes(&self) -> &BTreeSet<u8> {
        self.inner.supported_classes()
    }
    fn predict(&self, image: &Image<T>) -> Result<SegMask<T>> {
        self.with(|b| b.predict(image))
    }
    fn predict_vjp(&self, image: &Image<T>, upstream: &[T]) -> Result<Vec<T>> {
        self.with(|b| b.predict_vjp(image, upstream))
    }
    fn exclusive(&self) -> bool {
        true
    }
}

impl<T: Scalar, B: Refiner<T> + ?Sized> Refiner<T> for Exclusive<B> {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn output_size(&self) -> Option<(usize, usize)> {
        self.inner.output_size()
    }
    fn refine(&self, image: &Image<T>, prompt: &str, strength: T, steps: usize, seed: u64) -> Result<Image<T>> {
        self.with(|b| b.refine(image, prompt, strength, steps, seed))
    }
    fn exclusive(&self) -> bool {
        true
    }
}
