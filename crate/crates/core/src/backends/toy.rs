//! Analytic toy backends. Every forward map here has a hand-derived adjoint,
//! so the whole stage-1 loss is exactly differentiable and cheap at desk scale.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backends::prompt::{parse_prompt, target_histogram};
use crate::backends::{Generator, Refiner, Scorer, Segmenter};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::mask::SegMask;
use crate::scalar::{sigmoid, Scalar};
use crate::seed::{hash64, hash64_str};
use crate::vocab::ClassVocabulary;

pub const PARAMS_PER_BLOB: usize = 5;
pub const DEFAULT_BLOBS: usize = 4;
pub const DEFAULT_SELECTOR_SPREAD: f64 = 0.5;
pub const DEFAULT_TEMPERATURE: f64 = 0.05;
pub const DEFAULT_BACKGROUND_SHARE: f64 = 0.5;

fn rgb<T: Scalar>(c: [f64; 3]) -> [T; 3] {
    c.map(T::lit)
}

fn check_len(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::LengthMismatch { what, expected, found })
    }
}

/// Renders `k` soft elliptical blobs over the background color.
///
/// Each blob takes five latent entries, each squashed by a sigmoid:
/// center x, center y, radius x, radius y (normalized image units) and a
/// class selector that blends the foreground prototype colors.
#[derive(Debug, Clone)]
pub struct ToyGenerator<T: Scalar> {
    width: usize,
    height: usize,
    blobs: usize,
    /// Width of each class bump on the selector axis, in units of class spacing.
    selector_spread: f64,
    background: [T; 3],
    foreground: Vec<[T; 3]>,
}

struct Blob<T> {
    cx: T,
    cy: T,
    rx: T,
    ry: T,
    color: [T; 3],
    dcolor_dsel: [T; 3],
    /// sigmoid'(z) for the five parameters.
    dsig: [T; PARAMS_PER_BLOB],
}

impl<T: Scalar> ToyGenerator<T> {
    pub fn new(vocab: &ClassVocabulary, width: usize, height: usize, blobs: usize) -> Result<Self> {
        if width == 0 || height == 0 || blobs == 0 {
            return Err(Error::Config("toy generator needs positive size and blob count".into()));
        }
        if vocab.len() < 2 {
            return Err(Error::Config("toy generator needs at least one foreground class".into()));
        }
        Ok(Self {
            width,
            height,
            blobs,
            selector_spread: DEFAULT_SELECTOR_SPREAD,
            background: rgb(vocab.entries()[0].color),
            foreground: vocab.foreground().map(|e| rgb(e.color)).collect(),
        })
    }

    /// Configures the blob count from a latent dimension, which must be a multiple of five.
    pub fn with_latent_dim(vocab: &ClassVocabulary, width: usize, height: usize, latent_dim: usize) -> Result<Self> {
        if latent_dim == 0 || latent_dim % PARAMS_PER_BLOB != 0 {
            return Err(Error::Config(format!(
                "toy latent_dim {latent_dim} is not a positive multiple of {PARAMS_PER_BLOB}"
            )));
        }
        Self::new(vocab, width, height, latent_dim / PARAMS_PER_BLOB)
    }

    /// Wider bumps let a blob's color drift between classes under gradient descent.
    pub fn with_selector_spread(mut self, spread: f64) -> Result<Self> {
        if !(spread > 0.0 && spread.is_finite()) {
            return Err(Error::Config(format!("selector spread {spread} must be positive")));
        }
        self.selector_spread = spread;
        Ok(self)
    }

    fn blob_params(&self, z: &[T]) -> Vec<Blob<T>> {
        let f = self.foreground.len();
        let spread = T::lit(self.selector_spread) / T::lit(f as f64);
        z.chunks_exact(PARAMS_PER_BLOB)
            .map(|c| {
                let p: Vec<T> = c.iter().map(|&v| sigmoid(v)).collect();
                // Selector weights: softmax of -((s - center_k) / spread)^2.
                let sel = p[4];
                let logits: Vec<T> = (0..f)
                    .map(|k| {
                        let center = (T::lit(k as f64) + T::lit(0.5)) / T::lit(f as f64);
                        let d = (sel - center) / spread;
                        -d * d
                    })
                    .collect();
                let m = logits.iter().cloned().fold(T::neg_infinity(), T::max);
                let e: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
                let total: T = e.iter().cloned().sum();
                let w: Vec<T> = e.iter().map(|&v| v / total).collect();
                let g: Vec<T> = (0..f)
                    .map(|k| {
                        let center = (T::lit(k as f64) + T::lit(0.5)) / T::lit(f as f64);
                        -T::lit(2.0) * (sel - center) / (spread * spread)
                    })
                    .collect();
                let mean_g: T = w.iter().zip(&g).map(|(a, b)| *a * *b).sum();
                let mut color = [T::zero(); 3];
                let mut dcolor = [T::zero(); 3];
                for k in 0..f {
                    let dw = w[k] * (g[k] - mean_g);
                    for ch in 0..3 {
                        color[ch] += w[k] * self.foreground[k][ch];
                        dcolor[ch] += dw * self.foreground[k][ch];
                    }
                }
                let mut dsig = [T::zero(); PARAMS_PER_BLOB];
                for j in 0..PARAMS_PER_BLOB {
                    dsig[j] = p[j] * (T::one() - p[j]);
                }
                Blob {
                    cx: p[0],
                    cy: p[1],
                    rx: p[2],
                    ry: p[3],
                    color,
                    dcolor_dsel: dcolor,
                    dsig,
                }
            })
            .collect()
    }

    fn coords(&self, x: usize, y: usize) -> (T, T) {
        (
            (T::lit(x as f64) + T::lit(0.5)) / T::lit(self.width as f64),
            (T::lit(y as f64) + T::lit(0.5)) / T::lit(self.height as f64),
        )
    }

    fn check_latent(&self, z: &[T]) -> Result<()> {
        check_len("latent entries", self.latent_dim(), z.len())
    }
}

fn intensity<T: Scalar>(b: &Blob<T>, u: T, v: T) -> T {
    let dx = (u - b.cx) / b.rx;
    let dy = (v - b.cy) / b.ry;
    (-(dx * dx + dy * dy)).exp()
}

impl<T: Scalar> Generator<T> for ToyGenerator<T> {
    fn name(&self) -> &str {
        "toy"
    }

    fn latent_dim(&self) -> usize {
        self.blobs * PARAMS_PER_BLOB
    }

    fn output_size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn decode(&self, z: &[T]) -> Result<Image<T>> {
        self.check_latent(z)?;
        let blobs = self.blob_params(z);
        let mut data = Vec::with_capacity(self.width * self.height * 3);
        let mut inten = vec![T::zero(); blobs.len()];
        for y in 0..self.height {
            for x in 0..self.width {
                let (u, v) = self.coords(x, y);
                let mut s = T::zero();
                let mut keep = T::one();
                for (b, i) in blobs.iter().zip(inten.iter_mut()) {
                    *i = intensity(b, u, v);
                    s += *i;
                    keep *= T::one() - *i;
                }
                let cover = T::one() - keep;
                for ch in 0..3 {
                    let bg = self.background[ch];
                    let value = if s > T::zero() {
                        let fg: T = blobs.iter().zip(&inten).map(|(b, i)| *i * b.color[ch]).sum::<T>() / s;
                        (T::one() - cover) * bg + cover * fg
                    } else {
                        bg
                    };
                    data.push(value);
                }
            }
        }
        Image::new(self.width, self.height, data)
    }

    fn decode_vjp(&self, z: &[T], upstream: &[T]) -> Result<Vec<T>> {
        self.check_latent(z)?;
        check_len("image gradient entries", self.width * self.height * 3, upstream.len())?;
        let blobs = self.blob_params(z);
        let nb = blobs.len();
        // Per blob: d/dcx, d/dcy, d/drx, d/dry, d/dcolor[3].
        let mut acc = vec![[T::zero(); 7]; nb];
        let mut inten = vec![T::zero(); nb];
        let mut prefix = vec![T::one(); nb + 1];
        let mut suffix = vec![T::one(); nb + 1];
        for y in 0..self.height {
            for x in 0..self.width {
                let (u, v) = self.coords(x, y);
                let base = (y * self.width + x) * 3;
                let gc = [upstream[base], upstream[base + 1], upstream[base + 2]];
                let mut s = T::zero();
                for (b, i) in blobs.iter().zip(inten.iter_mut()) {
                    *i = intensity(b, u, v);
                    s += *i;
                }
                if !(s > T::zero()) {
                    continue;
                }
                for b in 0..nb {
                    prefix[b + 1] = prefix[b] * (T::one() - inten[b]);
                }
                for b in (0..nb).rev() {
                    suffix[b] = suffix[b + 1] * (T::one() - inten[b]);
                }
                let cover = T::one() - prefix[nb];
                let mut fg = [T::zero(); 3];
                for ch in 0..3 {
                    fg[ch] = blobs.iter().zip(&inten).map(|(b, i)| *i * b.color[ch]).sum::<T>() / s;
                }
                for b in 0..nb {
                    let others = prefix[b] * suffix[b + 1];
                    let mut g_int = T::zero();
                    for ch in 0..3 {
                        let d = others * (fg[ch] - self.background[ch]) + cover * (blobs[b].color[ch] - fg[ch]) / s;
                        g_int += gc[ch] * d;
                        acc[b][4 + ch] += gc[ch] * cover * inten[b] / s;
                    }
                    let blob = &blobs[b];
                    let i = inten[b];
                    let du = u - blob.cx;
                    let dv = v - blob.cy;
                    let rx2 = blob.rx * blob.rx;
                    let ry2 = blob.ry * blob.ry;
                    let two = T::lit(2.0);
                    acc[b][0] += g_int * i * two * du / rx2;
                    acc[b][1] += g_int * i * two * dv / ry2;
                    acc[b][2] += g_int * i * two * du * du / (rx2 * blob.rx);
                    acc[b][3] += g_int * i * two * dv * dv / (ry2 * blob.ry);
                }
            }
        }
        let mut grad = Vec::with_capacity(self.latent_dim());
        for (blob, a) in blobs.iter().zip(&acc) {
            let g_sel: T = (0..3).map(|ch| a[4 + ch] * blob.dcolor_dsel[ch]).sum();
            let g_param = [a[0], a[1], a[2], a[3], g_sel];
            for j in 0..PARAMS_PER_BLOB {
                grad.push(g_param[j] * blob.dsig[j]);
            }
        }
        Ok(grad)
    }
}

/// Softmax over negative squared color distance to each class prototype.
#[derive(Debug, Clone)]
pub struct ToySegmenter<T: Scalar> {
    name: String,
    supported: BTreeSet<u8>,
    /// Background followed by the supported classes, ascending.
    active: Vec<u8>,
    prototypes: Vec<[T; 3]>,
    temperature: T,
}

impl<T: Scalar> ToySegmenter<T> {
    /// Segmenter covering every class of the vocabulary.
    pub fn full(vocab: &ClassVocabulary, temperature: f64) -> Result<Self> {
        let all: BTreeSet<u8> = vocab.foreground().map(|e| e.id).collect();
        Self::specialized("toy", vocab, all, temperature)
    }

    /// Segmenter restricted to `classes`; it predicts only those planes plus background.
    pub fn specialized(
        name: impl Into<String>,
        vocab: &ClassVocabulary,
        classes: BTreeSet<u8>,
        temperature: f64,
    ) -> Result<Self> {
        let name = name.into();
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("segmenter `{name}` temperature must be positive")));
        }
        if classes.is_empty() {
            return Err(Error::Config(format!("segmenter `{name}` supports no classes")));
        }
        if let Some(bad) = classes.iter().find(|&&c| c == 0 || c as usize >= vocab.len()) {
            return Err(Error::Config(format!(
                "segmenter `{name}` lists class {bad}, which is background or outside the vocabulary"
            )));
        }
        let active = std::iter::once(0).chain(classes.iter().copied()).collect();
        Ok(Self {
            name,
            supported: classes,
            active,
            prototypes: vocab.entries().iter().map(|e| rgb(e.color)).collect(),
            temperature: T::lit(temperature),
        })
    }

    fn softmax_at(&self, c: [T; 3], out: &mut [T]) {
        for (slot, &k) in out.iter_mut().zip(&self.active) {
            let p = self.prototypes[k as usize];
            let d: T = (0..3).map(|ch| (c[ch] - p[ch]) * (c[ch] - p[ch])).sum();
            *slot = -d / self.temperature;
        }
        let m = out.iter().cloned().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for v in out.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in out.iter_mut() {
            *v /= total;
        }
    }
}

impl<T: Scalar> Segmenter<T> for ToySegmenter<T> {
    fn name(&self) -> &str {
        &self.name
    }

    fn num_classes(&self) -> usize {
        self.prototypes.len()
    }

    fn supported_classes(&self) -> &BTreeSet<u8> {
        &self.supported
    }

    fn predict(&self, image: &Image<T>) -> Result<SegMask<T>> {
        let n = image.width() * image.height();
        let mut data = vec![T::zero(); n * self.num_classes()];
        let mut probs = vec![T::zero(); self.active.len()];
        for (p, c) in image.data().chunks_exact(3).enumerate() {
            self.softmax_at([c[0], c[1], c[2]], &mut probs);
            for (&k, &w) in self.active.iter().zip(&probs) {
                data[k as usize * n + p] = w;
            }
        }
        SegMask::from_planes(image.width(), image.height(), self.num_classes(), data)
    }

    fn predict_vjp(&self, image: &Image<T>, upstream: &[T]) -> Result<Vec<T>> {
        let n = image.width() * image.height();
        check_len("mask gradient entries", n * self.num_classes(), upstream.len())?;
        let mut grad = vec![T::zero(); n * 3];
        let mut probs = vec![T::zero(); self.active.len()];
        let two = T::lit(2.0);
        for (p, c) in image.data().chunks_exact(3).enumerate() {
            let c = [c[0], c[1], c[2]];
            self.softmax_at(c, &mut probs);
            let mean: T = self
                .active
                .iter()
                .zip(&probs)
                .map(|(&k, &w)| w * upstream[k as usize * n + p])
                .sum();
            for (&k, &w) in self.active.iter().zip(&probs) {
                let dlogit = w * (upstream[k as usize * n + p] - mean);
                let proto = self.prototypes[k as usize];
                for ch in 0..3 {
                    grad[p * 3 + ch] -= dlogit * two * (c[ch] - proto[ch]) / self.temperature;
                }
            }
        }
        Ok(grad)
    }
}

/// Squared distance between the image's soft class histogram and the prompt's target histogram.
#[derive(Debug, Clone)]
pub struct ToyScorer<T: Scalar> {
    vocab: ClassVocabulary,
    segmenter: ToySegmenter<T>,
    background_share: f64,
}

impl<T: Scalar> ToyScorer<T> {
    pub fn new(vocab: &ClassVocabulary, temperature: f64, background_share: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&background_share) {
            return Err(Error::Config(format!("background_share {background_share} outside [0,1]")));
        }
        Ok(Self {
            vocab: vocab.clone(),
            segmenter: ToySegmenter::full(vocab, temperature)?,
            background_share,
        })
    }

    pub fn target(&self, prompt: &str) -> Result<Vec<T>> {
        let mentions = parse_prompt(prompt, &self.vocab)?;
        Ok(target_histogram(&mentions, self.vocab.len(), self.background_share)
            .into_iter()
            .map(T::lit)
            .collect())
    }

    /// Mean of each predicted class plane over pixels.
    pub fn histogram(&self, image: &Image<T>) -> Result<Vec<T>> {
        let mask = self.segmenter.predict(image)?;
        let n = T::lit(mask.pixels() as f64);
        Ok((0..mask.num_classes())
            .map(|k| mask.plane(k).iter().cloned().sum::<T>() / n)
            .collect())
    }
}

impl<T: Scalar> Scorer<T> for ToyScorer<T> {
    fn name(&self) -> &str {
        "toy"
    }

    fn score(&self, image: &Image<T>, prompt: &str) -> Result<T> {
        let target = self.target(prompt)?;
        let hist = self.histogram(image)?;
        Ok(hist.iter().zip(&target).map(|(h, t)| (*h - *t) * (*h - *t)).sum())
    }

    fn score_gradient(&self, image: &Image<T>, prompt: &str) -> Result<Vec<T>> {
        let target = self.target(prompt)?;
        let hist = self.histogram(image)?;
        let n = image.width() * image.height();
        let scale = T::lit(2.0) / T::lit(n as f64);
        let mut upstream = vec![T::zero(); n * hist.len()];
        for (k, (h, t)) in hist.iter().zip(&target).enumerate() {
            let g = scale * (*h - *t);
            upstream[k * n..(k + 1) * n].iter_mut().for_each(|v| *v = g);
        }
        self.segmenter.predict_vjp(image, &upstream)
    }

    fn validate_prompt(&self, prompt: &str) -> Result<()> {
        parse_prompt(prompt, &self.vocab).map(|_| ())
    }
}

/// Blends the input with a procedural image seeded by `(seed, prompt)`:
/// `(1 - strength) * input + strength * pattern`.
#[derive(Debug, Clone)]
pub struct ToyRefiner {
    vocab: ClassVocabulary,
    output_size: Option<(usize, usize)>,
}

const PATTERN_GRID: usize = 4;

impl ToyRefiner {
    pub fn new(vocab: &ClassVocabulary, output_size: Option<(usize, usize)>) -> Result<Self> {
        if let Some((w, h)) = output_size {
            if w == 0 || h == 0 {
                return Err(Error::Config("toy refiner output size must be positive".into()));
            }
        }
        Ok(Self {
            vocab: vocab.clone(),
            output_size,
        })
    }

    /// Low-frequency color field drawn from the prompt's class colors and background.
    pub fn pattern<T: Scalar>(&self, width: usize, height: usize, prompt: &str, seed: u64) -> Result<Image<T>> {
        let mentions = parse_prompt(prompt, &self.vocab)?;
        let mut palette: Vec<[f64; 3]> = vec![self.vocab.entries()[0].color];
        palette.extend(mentions.iter().map(|&m| self.vocab.entries()[m as usize].color));
        let mut rng = ChaCha8Rng::seed_from_u64(hash64(&[seed, hash64_str(prompt)]));
        let g = PATTERN_GRID;
        let grid: Vec<[f64; 3]> = (0..g * g)
            .map(|_| {
                let base = palette[rng.random_range(0..palette.len())];
                base.map(|c| (c + rng.random_range(-0.1..0.1)).clamp(0.0, 1.0))
            })
            .collect();
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            let fy = (y as f64 + 0.5) / height as f64 * (g - 1) as f64;
            let y0 = (fy.floor() as usize).min(g - 2);
            let ty = fy - y0 as f64;
            for x in 0..width {
                let fx = (x as f64 + 0.5) / width as f64 * (g - 1) as f64;
                let x0 = (fx.floor() as usize).min(g - 2);
                let tx = fx - x0 as f64;
                for ch in 0..3 {
                    let a = grid[y0 * g + x0][ch] * (1.0 - tx) + grid[y0 * g + x0 + 1][ch] * tx;
                    let b = grid[(y0 + 1) * g + x0][ch] * (1.0 - tx) + grid[(y0 + 1) * g + x0 + 1][ch] * tx;
                    data.push(T::lit(a * (1.0 - ty) + b * ty));
                }
            }
        }
        Image::new(width, height, data)
    }
}

impl<T: Scalar> Refiner<T> for ToyRefiner {
    fn name(&self) -> &str {
        "toy"
    }

    fn output_size(&self) -> Option<(usize, usize)> {
        self.output_size
    }

    fn refine(&self, image: &Image<T>, prompt: &str, strength: T, _steps: usize, seed: u64) -> Result<Image<T>> {
        if !(strength >= T::zero() && strength <= T::one()) {
            return Err(Error::StrengthRange(strength.as_f64()));
        }
        let pattern: Image<T> = self.pattern(image.width(), image.height(), prompt, seed)?;
        let keep = T::one() - strength;
        let data = image
            .data()
            .iter()
            .zip(pattern.data())
            .map(|(a, b)| keep * *a + strength * *b)
            .collect();
        Image::new(image.width(), image.height(), data)
    }
}
