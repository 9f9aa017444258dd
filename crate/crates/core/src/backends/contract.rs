//! Conformance checks every backend must pass before it is registered.
//!
//! The toy backends are checked with finite differences. Adapters around
//! real models, whose gradients come from an external autodiff engine, may
//! use [`GradientCheck::ShapeOnly`] instead.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::backends::{Generator, Refiner, Scorer, Segmenter};
use crate::error::Result;
use crate::gradcheck::{central_differences, default_step, relative_error};
use crate::image::Image;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GradientCheck {
    FiniteDifference { points: usize, tolerance: f64 },
    ShapeOnly,
}

impl Default for GradientCheck {
    fn default() -> Self {
        GradientCheck::FiniteDifference {
            points: 10,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ContractReport {
    pub outcomes: Vec<CheckOutcome>,
}

impl ContractReport {
    pub fn passed(&self) -> bool {
        self.outcomes.iter().all(|o| o.passed)
    }

    pub fn failures(&self) -> Vec<&CheckOutcome> {
        self.outcomes.iter().filter(|o| !o.passed).collect()
    }

    fn record(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.outcomes.push(CheckOutcome {
            name: name.into(),
            passed,
            detail: detail.into(),
        });
    }

    fn record_result(&mut self, name: &str, r: Result<(bool, String)>) {
        match r {
            Ok((ok, detail)) => self.record(name, ok, detail),
            Err(e) => self.record(name, false, format!("error: {e}")),
        }
    }
}

fn random_image<T: Scalar>(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image<T> {
    // Interior values so finite-difference probes never hit the clamp.
    let data = (0..w * h * 3).map(|_| T::lit(rng.random_range(0.1..0.9))).collect();
    Image::new(w, h, data).expect("valid random image")
}

fn random_vec<T: Scalar>(rng: &mut ChaCha8Rng, n: usize) -> Vec<T> {
    (0..n).map(|_| T::lit(rng.sample::<f64, _>(StandardNormal))).collect()
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

pub fn check_generator<T: Scalar>(g: &dyn Generator<T>, mode: GradientCheck, seed: u64) -> ContractReport {
    let mut report = ContractReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = g.latent_dim();
    let (w, h) = g.output_size();
    let z = random_vec::<T>(&mut rng, dim);

    report.record_result(
        "generator.decode_deterministic",
        (|| Ok((g.decode(&z)? == g.decode(&z)?, String::new())))(),
    );
    report.record_result(
        "generator.output_size",
        g.decode(&z).map(|img| (img.dims() == (w, h), format!("{:?} vs {:?}", img.dims(), (w, h)))),
    );
    let upstream = random_vec::<T>(&mut rng, w * h * 3);
    report.record_result(
        "generator.gradient_shape",
        g.decode_vjp(&z, &upstream)
            .map(|grad| (grad.len() == dim, format!("{} entries", grad.len()))),
    );
    if let GradientCheck::FiniteDifference { points, tolerance } = mode {
        let mut worst = 0.0f64;
        let outcome = (|| {
            for _ in 0..points {
                let z = random_vec::<T>(&mut rng, dim);
                let u = random_vec::<T>(&mut rng, w * h * 3);
                let analytic = g.decode_vjp(&z, &u)?;
                let numeric = central_differences(&z, default_step(), |zz| Ok(dot(&u, g.decode(zz)?.data())))?;
                worst = worst.max(relative_error(&analytic, &numeric));
            }
            Ok((worst < tolerance, format!("max relative error {worst:.3e}")))
        })();
        report.record_result("generator.gradient_finite_difference", outcome);
    }
    report
}

pub fn check_scorer<T: Scalar>(
    s: &dyn Scorer<T>,
    prompt: &str,
    size: (usize, usize),
    mode: GradientCheck,
    seed: u64,
) -> ContractReport {
    let mut report = ContractReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = random_image::<T>(&mut rng, size.0, size.1);
    report.record_result(
        "scorer.nonnegative",
        s.score(&img, prompt).map(|v| (v >= T::zero() && v.is_finite(), format!("score {v}"))),
    );
    report.record_result(
        "scorer.gradient_shape",
        s.score_gradient(&img, prompt)
            .map(|g| (g.len() == img.data().len(), format!("{} entries", g.len()))),
    );
    if let GradientCheck::FiniteDifference { points, tolerance } = mode {
        let mut worst = 0.0f64;
        let outcome = (|| {
            for _ in 0..points {
                let img = random_image::<T>(&mut rng, size.0, size.1);
                let analytic = s.score_gradient(&img, prompt)?;
                let numeric = central_differences(img.data(), default_step(), |x| {
                    s.score(&Image::new(size.0, size.1, x.to_vec())?, prompt)
                })?;
                worst = worst.max(relative_error(&analytic, &numeric));
            }
            Ok((worst < tolerance, format!("max relative error {worst:.3e}")))
        })();
        report.record_result("scorer.gradient_finite_difference", outcome);
    }
    report
}

pub fn check_segmenter<T: Scalar>(
    s: &dyn Segmenter<T>,
    size: (usize, usize),
    mode: GradientCheck,
    seed: u64,
) -> ContractReport {
    let mut report = ContractReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let img = random_image::<T>(&mut rng, size.0, size.1);
    let k = s.num_classes();
    report.record("segmenter.supports_classes", !s.supported_classes().is_empty(), "");
    report.record_result(
        "segmenter.simplex",
        s.predict(&img).map(|m| {
            let n = m.pixels();
            let tol = T::lit(1e-5).max(T::epsilon() * T::lit(64.0));
            let worst = (0..n)
                .map(|p| ((0..k).map(|c| m.plane(c)[p]).sum::<T>() - T::one()).abs())
                .fold(T::zero(), T::max);
            (m.num_classes() == k && worst < tol, format!("max |sum - 1| = {worst}"))
        }),
    );
    report.record_result(
        "segmenter.planes_cover_supported_classes",
        s.predict(&img).map(|m| {
            let allowed = |c: usize| c == 0 || s.supported_classes().contains(&(c as u8));
            let stray: Vec<usize> = (0..k)
                .filter(|&c| !allowed(c) && m.plane(c).iter().any(|v| *v != T::zero()))
                .collect();
            (stray.is_empty(), format!("unsupported planes with mass: {stray:?}"))
        }),
    );
    let n = size.0 * size.1;
    let upstream = random_vec::<T>(&mut rng, n * k);
    report.record_result(
        "segmenter.gradient_shape",
        s.predict_vjp(&img, &upstream)
            .map(|g| (g.len() == n * 3, format!("{} entries", g.len()))),
    );
    if let GradientCheck::FiniteDifference { points, tolerance } = mode {
        let mut worst = 0.0f64;
        let outcome = (|| {
            for _ in 0..points {
                let img = random_image::<T>(&mut rng, size.0, size.1);
                let u = random_vec::<T>(&mut rng, n * k);
                let analytic = s.predict_vjp(&img, &u)?;
                let numeric = central_differences(img.data(), default_step(), |x| {
                    Ok(dot(&u, s.predict(&Image::new(size.0, size.1, x.to_vec())?)?.data()))
                })?;
                worst = worst.max(relative_error(&analytic, &numeric));
            }
            Ok((worst < tolerance, format!("max relative error {worst:.3e}")))
        })();
        report.record_result("segmenter.gradient_finite_difference", outcome);
    }
    report
}

pub fn check_refiner<T: Scalar>(r: &dyn Refiner<T>, prompt: &str, size: (usize, usize), seed: u64) -> ContractReport {
    let mut report = ContractReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = random_image::<T>(&mut rng, size.0, size.1);
    let b = random_image::<T>(&mut rng, size.0, size.1);
    report.record_result(
        "refiner.strength_zero_identity",
        r.refine(&a, prompt, T::zero(), 1, seed).map(|out| (out == a, String::new())),
    );
    report.record_result(
        "refiner.strength_one_ignores_input",
        (|| {
            let x = r.refine(&a, prompt, T::one(), 1, seed)?;
            let y = r.refine(&b, prompt, T::one(), 1, seed)?;
            Ok((x == y, String::new()))
        })(),
    );
    report.record_result(
        "refiner.deterministic",
        (|| {
            let half = T::lit(0.5);
            Ok((r.refine(&a, prompt, half, 1, seed)? == r.refine(&a, prompt, half, 1, seed)?, String::new()))
        })(),
    );
    report.record(
        "refiner.rejects_strength_out_of_range",
        r.refine(&a, prompt, T::lit(1.5), 1, seed).is_err() && r.refine(&a, prompt, T::lit(-0.5), 1, seed).is_err(),
        "",
    );
    report
}
