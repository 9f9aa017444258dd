//! Backend selection from a configuration document:
//!
//! ```json
//! {"generator": "toy", "scorer": "toy", "segmenters": ["toy"], "refiner": "toy",
//!  "params": {"toy": {"width": 32, "height": 32}}}
//! ```
//!
//! `params` holds one parameter block per backend name. Builtin names resolve
//! to the toy backends; adapters for real models register their own factories.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backends::toy::{self, ToyGenerator, ToyRefiner, ToyScorer, ToySegmenter};
use crate::backends::{Exclusive, Generator, Refiner, Scorer, Segmenter};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stage1::GuideRegistration;
use crate::vocab::ClassVocabulary;

pub const DEFAULT_IMAGE_SIZE: usize = 32;

fn toy_name() -> String {
    "toy".into()
}

fn toy_list() -> Vec<String> {
    vec!["toy".into()]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    #[serde(default = "toy_name")]
    pub generator: String,
    #[serde(default = "toy_name")]
    pub scorer: String,
    #[serde(default = "toy_list")]
    pub segmenters: Vec<String>,
    #[serde(default = "toy_name")]
    pub refiner: String,
    /// Segmenter used to re-segment final images during evaluation.
    #[serde(default = "toy_name")]
    pub eval_segmenter: String,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            generator: toy_name(),
            scorer: toy_name(),
            segmenters: toy_list(),
            refiner: toy_name(),
            eval_segmenter: toy_name(),
            params: BTreeMap::new(),
        }
    }
}

impl BackendConfig {
    pub fn params_for(&self, name: &str) -> Value {
        self.params.get(name).cloned().unwrap_or(Value::Null)
    }
}

/// A resolved backend set.
pub struct Backends<T: Scalar> {
    pub vocab: ClassVocabulary,
    pub generator: Arc<dyn Generator<T>>,
    pub scorer: Arc<dyn Scorer<T>>,
    pub guides: Vec<GuideRegistration<T>>,
    pub refiner: Arc<dyn Refiner<T>>,
    pub eval_segmenter: Arc<dyn Segmenter<T>>,
}

impl<T: Scalar> Clone for Backends<T> {
    fn clone(&self) -> Self {
        Self {
            vocab: self.vocab.clone(),
            generator: self.generator.clone(),
            scorer: self.scorer.clone(),
            guides: self.guides.clone(),
            refiner: self.refiner.clone(),
            eval_segmenter: self.eval_segmenter.clone(),
        }
    }
}

impl<T: Scalar> std::fmt::Debug for Backends<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("generator", &self.generator.name())
            .field("scorer", &self.scorer.name())
            .field("guides", &self.guides.iter().map(|g| g.name.as_str()).collect::<Vec<_>>())
            .field("refiner", &self.refiner.name())
            .finish()
    }
}

impl<T: Scalar> Backends<T> {
    /// All-toy backends with default parameters and one full-vocabulary guide.
    pub fn toy(vocab: &ClassVocabulary) -> Result<Self> {
        BackendRegistry::with_builtins().build(&BackendConfig::default(), vocab)
    }

    pub fn with_guides(mut self, guides: Vec<GuideRegistration<T>>) -> Self {
        self.guides = guides;
        self
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.generator.output_size()
    }
}

type Factory<B> = Box<dyn Fn(&str, &Value, &ClassVocabulary) -> Result<Arc<B>> + Send + Sync>;

/// Name → factory tables for each backend role.
pub struct BackendRegistry<T: Scalar> {
    generators: HashMap<String, Factory<dyn Generator<T>>>,
    scorers: HashMap<String, Factory<dyn Scorer<T>>>,
    segmenters: HashMap<String, Factory<dyn Segmenter<T>>>,
    refiners: HashMap<String, Factory<dyn Refiner<T>>>,
}

fn get_f64(params: &Value, key: &str, default: f64) -> Result<f64> {
    match params.get(key) {
        None | Some(Value::Null) => Ok(default),
        Some(v) => v
            .as_f64()
            .ok_or_else(|| Error::Config(format!("parameter `{key}` must be a number"))),
    }
}

fn get_usize(params: &Value, key: &str, default: usize) -> Result<usize> {
    match params.get(key) {
        None | Some(Value::Null) => Ok(default),
        Some(v) => v
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| Error::Config(format!("parameter `{key}` must be a nonnegative integer"))),
    }
}

fn class_list(name: &str, params: &Value, vocab: &ClassVocabulary) -> Result<BTreeSet<u8>> {
    let Some(list) = params.get("classes").and_then(Value::as_array) else {
        return Err(Error::Config(format!(
            "segmenter `{name}` needs a `classes` list in its parameter block"
        )));
    };
    list.iter()
        .map(|v| match v {
            Value::String(s) => vocab
                .id_of(s)
                .ok_or_else(|| Error::Config(format!("segmenter `{name}`: unknown class `{s}`"))),
            Value::Number(n) => n
                .as_u64()
                .and_then(|n| u8::try_from(n).ok())
                .ok_or_else(|| Error::Config(format!("segmenter `{name}`: bad class id {n}"))),
            other => Err(Error::Config(format!("segmenter `{name}`: bad class entry {other}"))),
        })
        .collect()
}

impl<T: Scalar> BackendRegistry<T> {
    pub fn empty() -> Self {
        Self {
            generators: HashMap::new(),
            scorers: HashMap::new(),
            segmenters: HashMap::new(),
            refiners: HashMap::new(),
        }
    }

    /// Registry with the toy backends under the name `toy`.
    ///
    /// Segmenter names other than `toy` resolve to a specialized toy segmenter
    /// when their parameter block has `"kind": "toy"` and a `classes` list.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        r.register_generator("toy", |_, p, vocab| {
            let g = ToyGenerator::<T>::new(
                vocab,
                get_usize(p, "width", DEFAULT_IMAGE_SIZE)?,
                get_usize(p, "height", DEFAULT_IMAGE_SIZE)?,
                get_usize(p, "blobs", toy::DEFAULT_BLOBS)?,
            )?
            .with_selector_spread(get_f64(p, "selector_spread", toy::DEFAULT_SELECTOR_SPREAD)?)?;
            Ok(Arc::new(g) as Arc<dyn Generator<T>>)
        });
        r.register_scorer("toy", |_, p, vocab| {
            let s = ToyScorer::<T>::new(
                vocab,
                get_f64(p, "temperature", toy::DEFAULT_TEMPERATURE)?,
                get_f64(p, "background_share", toy::DEFAULT_BACKGROUND_SHARE)?,
            )?;
            Ok(Arc::new(s) as Arc<dyn Scorer<T>>)
        });
        r.register_segmenter("toy", |name, p, vocab| {
            let temperature = get_f64(p, "temperature", toy::DEFAULT_TEMPERATURE)?;
            let seg = if p.get("classes").is_some() {
                ToySegmenter::<T>::specialized(name, vocab, class_list(name, p, vocab)?, temperature)?
            } else {
                ToySegmenter::<T>::full(vocab, temperature)?
            };
            Ok(Arc::new(seg) as Arc<dyn Segmenter<T>>)
        });
        r.register_refiner("toy", |_, p, vocab| {
            let size = match (p.get("output_width"), p.get("output_height")) {
                (None, None) => None,
                _ => Some((
                    get_usize(p, "output_width", DEFAULT_IMAGE_SIZE)?,
                    get_usize(p, "output_height", DEFAULT_IMAGE_SIZE)?,
                )),
            };
            Ok(Arc::new(ToyRefiner::new(vocab, size)?) as Arc<dyn Refiner<T>>)
        });
        r
    }

    pub fn register_generator(
        &mut self,
        name: &str,
        f: impl Fn(&str, &Value, &ClassVocabulary) -> Result<Arc<dyn Generator<T>>> + Send + Sync + 'static,
    ) {
        self.generators.insert(name.into(), Box::new(f));
    }

    pub fn register_scorer(
        &mut self,
        name: &str,
        f: impl Fn(&str, &Value, &ClassVocabulary) -> Result<Arc<dyn Scorer<T>>> + Send + Sync + 'static,
    ) {
        self.scorers.insert(name.into(), Box::new(f));
    }

    pub fn register_segmenter(
        &mut self,
        name: &str,
        f: impl Fn(&str, &Value, &ClassVocabulary) -> Result<Arc<dyn Segmenter<T>>> + Send + Sync + 'static,
    ) {
        self.segmenters.insert(name.into(), Box::new(f));
    }

    pub fn register_refiner(
        &mut self,
        name: &str,
        f: impl Fn(&str, &Value, &ClassVocabulary) -> Result<Arc<dyn Refiner<T>>> + Send + Sync + 'static,
    ) {
        self.refiners.insert(name.into(), Box::new(f));
    }

    fn segmenter(&self, config: &BackendConfig, name: &str, vocab: &ClassVocabulary) -> Result<Arc<dyn Segmenter<T>>> {
        let params = config.params_for(name);
        // A parameter block's `kind` selects the factory; otherwise the name does.
        let kind = params.get("kind").and_then(Value::as_str).unwrap_or(name);
        let factory = self
            .segmenters
            .get(kind)
            .ok_or_else(|| Error::Config(format!("unknown segmenter backend `{kind}`")))?;
        let seg = factory(name, &params, vocab)?;
        if seg.num_classes() != vocab.len() {
            return Err(Error::Config(format!(
                "segmenter `{name}` predicts {} planes, vocabulary has {}",
                seg.num_classes(),
                vocab.len()
            )));
        }
        Ok(if seg.exclusive() {
            Arc::new(Exclusive::new(seg))
        } else {
            seg
        })
    }

    pub fn build(&self, config: &BackendConfig, vocab: &ClassVocabulary) -> Result<Backends<T>> {
        fn lookup<'a, B: ?Sized>(
            table: &'a HashMap<String, Factory<B>>,
            role: &str,
            name: &str,
            config: &BackendConfig,
        ) -> Result<&'a Factory<B>> {
            let params = config.params_for(name);
            let kind = params.get("kind").and_then(Value::as_str).unwrap_or(name);
            table
                .get(kind)
                .ok_or_else(|| Error::Config(format!("unknown {role} backend `{kind}`")))
        }

        let gen = lookup(&self.generators, "generator", &config.generator, config)?(
            &config.generator,
            &config.params_for(&config.generator),
            vocab,
        )?;
        let gen: Arc<dyn Generator<T>> = if gen.exclusive() { Arc::new(Exclusive::new(gen)) } else { gen };

        let scorer = lookup(&self.scorers, "scorer", &config.scorer, config)?(
            &config.scorer,
            &config.params_for(&config.scorer),
            vocab,
        )?;
        let scorer: Arc<dyn Scorer<T>> = if scorer.exclusive() { Arc::new(Exclusive::new(scorer)) } else { scorer };

        let refiner = lookup(&self.refiners, "refiner", &config.refiner, config)?(
            &config.refiner,
            &config.params_for(&config.refiner),
            vocab,
        )?;
        let refiner: Arc<dyn Refiner<T>> = if refiner.exclusive() { Arc::new(Exclusive::new(refiner)) } else { refiner };

        if config.segmenters.is_empty() {
            return Err(Error::Config("at least one guide segmenter is required".into()));
        }
        let mut seen = BTreeSet::new();
        let guides = config
            .segmenters
            .iter()
            .enumerate()
            .map(|(i, name)| {
                if !seen.insert(name.as_str()) {
                    return Err(Error::Config(format!("segmenter `{name}` listed twice")));
                }
                GuideRegistration::new(name.clone(), self.segmenter(config, name, vocab)?, i)
            })
            .collect::<Result<Vec<_>>>()?;
        let eval_segmenter = self.segmenter(config, &config.eval_segmenter, vocab)?;

        Ok(Backends {
            vocab: vocab.clone(),
            generator: gen,
            scorer,
            guides,
            refiner,
            eval_segmenter,
        })
    }
}
