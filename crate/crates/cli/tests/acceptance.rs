//! Acceptance gate: one PASS/FAIL line per top-level criterion.
//!
//! Every check compares the library against an oracle written here from
//! scratch (brute-force loops, pixel counting, finite differences) or against
//! a second full run. Exits non-zero when any check fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::process::Command;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use maskguide::backends::{Segmenter, ToyRefiner, ToySegmenter};
use maskguide::codec::encode_mask;
use maskguide::eval::{filter_records, load_records, parse_manifest, synthetic_records, write_manifest, FilterSettings, SyntheticSpec};
use maskguide::seed::sha256_hex;
use maskguide::stage1::Objective;
use maskguide::{
    iou, optimize, refine, segmentation_loss, toytask, total_loss, BackendConfig, BackendRegistry, Backends,
    ClassVocabulary, Error, GuideRegistration, Image, IouMode, JobStatus, LossWeights, OptimizerConfig, RefineConfig, SegMask,
};
use maskguide_service::{EventKind, JobEvent, Service, ServiceConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::Value;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(name: &str, started: Instant, budget: Duration) -> Result<(), String> {
    let took = started.elapsed();
    ensure(took < budget, || format!("{name} took {took:.1?}, budget {budget:?}"))
}

fn toy_backends(width: usize, height: usize, blobs: usize) -> Backends<f64> {
    let mut config = BackendConfig::default();
    config
        .params
        .insert("toy".into(), serde_json::json!({"width": width, "height": height, "blobs": blobs}));
    BackendRegistry::with_builtins().build(&config, &ClassVocabulary::toy()).unwrap()
}

// ---------------------------------------------------------------- gradients

fn two_class_target() -> SegMask<f64> {
    let mut ids = vec![0u8; 256];
    for y in 2..9 {
        for x in 3..10 {
            ids[y * 16 + x] = 1;
        }
    }
    for y in 9..14 {
        for x in 8..15 {
            ids[y * 16 + x] = 3;
        }
    }
    SegMask::from_class_map(16, 16, 5, &ids).unwrap()
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

fn gradient_fidelity() -> Outcome {
    let started = Instant::now();
    let backends = toy_backends(16, 16, 4);
    let dim = backends.generator.latent_dim();
    ensure(dim <= 20, || format!("latent_dim {dim}"))?;
    let target = two_class_target();
    let weights = LossWeights::defaults(1);
    let objective = Objective::new("a cat and a car", &target, &backends, &weights).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(20_240_611);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let z: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let (_, analytic, _) = objective.evaluate(&z).map_err(|e| e.to_string())?;
        let mut numeric = Vec::with_capacity(dim);
        for i in 0..dim {
            let mut plus = z.clone();
            let mut minus = z.clone();
            plus[i] += h;
            minus[i] -= h;
            let lp = objective.loss(&plus).map_err(|e| e.to_string())?.l_total;
            let lm = objective.loss(&minus).map_err(|e| e.to_string())?.l_total;
            numeric.push((lp - lm) / (2.0 * h));
        }
        let diff = norm(analytic.iter().zip(&numeric).map(|(a, n)| a - n));
        let scale = norm(analytic.iter().copied()).max(norm(numeric.iter().copied())).max(1e-12);
        worst = worst.max(diff / scale);
    }
    ensure(worst < 1e-4, || format!("worst relative error {worst:.3e}"))?;
    within("gradient check", started, Duration::from_secs(30))?;
    Ok(format!("latent_dim {dim}, worst relative error {worst:.2e}, {:.1?}", started.elapsed()))
}

// ---------------------------------------------------------------- efficacy

fn guidance_efficacy() -> Outcome {
    let started = Instant::now();
    let guided = toytask::run::<f64>(toytask::ALPHA_SEG, toytask::SEEDS).map_err(|e| e.to_string())?;
    let unguided = toytask::run::<f64>(0.0, toytask::SEEDS).map_err(|e| e.to_string())?;
    ensure(guided.len() == 20 && unguided.len() == 20, || "expected 20 seeds per arm".into())?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (g, u) = (mean(&guided), mean(&unguided));
    ensure(g > u, || format!("guided {g:.4} does not beat unguided {u:.4}"))?;
    ensure(g > toytask::MIN_MEAN_IOU, || format!("guided mean IoU {g:.4} below {}", toytask::MIN_MEAN_IOU))?;
    within("efficacy runs", started, Duration::from_secs(120))?;
    Ok(format!("mean IoU guided {g:.4} vs unguided {u:.4}, {:.1?}", started.elapsed()))
}

// ---------------------------------------------------------------- losses

/// Gradient descent on the scorer alone, written without the stage-1 module.
fn scorer_only_run(backends: &Backends<f64>, prompt: &str, config: &OptimizerConfig<f64>) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut z: Vec<f64> = (0..backends.generator.latent_dim())
        .map(|_| config.init_scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut velocity = vec![0.0; z.len()];
    let mut trace = Vec::new();
    let mut best = (f64::INFINITY, Vec::new());
    let mut stall = 0;
    for step in 0..config.max_steps {
        let image = backends.generator.decode(&z).unwrap();
        let loss = config.weights.alpha_clip * backends.scorer.score(&image, prompt).unwrap();
        trace.push(loss);
        stall = if loss < best.0 - config.plateau_tolerance { 0 } else { stall + 1 };
        if loss < best.0 {
            best = (loss, image.data().to_vec());
        }
        if stall >= config.plateau_patience || step + 1 == config.max_steps {
            break;
        }
        let g_img: Vec<f64> = backends
            .scorer
            .score_gradient(&image, prompt)
            .unwrap()
            .iter()
            .map(|g| config.weights.alpha_clip * g)
            .collect();
        let g = backends.generator.decode_vjp(&z, &g_img).unwrap();
        for ((zi, vi), gi) in z.iter_mut().zip(velocity.iter_mut()).zip(&g) {
            *vi = config.momentum * *vi + gi;
            *zi -= config.step_size * *vi;
        }
    }
    (trace, best.1)
}

fn loss_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for case in 0..100 {
        let (w, h, k) = (rng.random_range(1..7usize), rng.random_range(1..7usize), rng.random_range(1..6usize));
        let n = w * h * k;
        let p: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let pm = SegMask::from_planes(w, h, k, p.clone()).map_err(|e| e.to_string())?;
        let tm = SegMask::from_planes(w, h, k, t.clone()).map_err(|e| e.to_string())?;
        let mut acc = 0.0;
        for i in 0..n {
            acc += (p[i] - t[i]) * (p[i] - t[i]);
        }
        let expected_seg = acc / n as f64;
        let got_seg = segmentation_loss(&pm, &tm).map_err(|e| e.to_string())?;
        worst = worst.max((got_seg - expected_seg).abs());
        ensure((got_seg - expected_seg).abs() <= 1e-12, || {
            format!("case {case}: segmentation loss {got_seg} vs {expected_seg}")
        })?;

        let guides = rng.random_range(0..5usize);
        let l_clip = rng.random_range(0.0..10.0);
        let alpha_clip = rng.random_range(0.0..10.0);
        let l_segs: Vec<f64> = (0..guides).map(|_| rng.random_range(0.0..10.0)).collect();
        let alphas: Vec<f64> = (0..guides).map(|_| rng.random_range(0.0..10.0)).collect();
        let mut expected_total = alpha_clip * l_clip;
        for i in 0..guides {
            expected_total += alphas[i] * l_segs[i];
        }
        let weights = LossWeights::new(alpha_clip, alphas).map_err(|e| e.to_string())?;
        let got_total = total_loss(l_clip, &l_segs, &weights).map_err(|e| e.to_string())?;
        let err = (got_total - expected_total).abs() / expected_total.abs().max(1.0);
        worst = worst.max(err);
        ensure(err <= 1e-12, || format!("case {case}: total loss {got_total} vs {expected_total}"))?;

        let zeroed = LossWeights::new(alpha_clip, vec![0.0; guides]).map_err(|e| e.to_string())?;
        let reduced = total_loss(l_clip, &l_segs, &zeroed).map_err(|e| e.to_string())?;
        ensure(reduced == alpha_clip * l_clip, || {
            format!("case {case}: alpha_seg = 0 gave {reduced}, scorer-only {}", alpha_clip * l_clip)
        })?;
    }

    // The same reduction through the full optimizer, compared step for step.
    let backends = toy_backends(16, 16, 3);
    let ids: Vec<u8> = (0..256).map(|i| if (i % 16) < 8 && i / 16 > 4 { 2 } else { 0 }).collect();
    let target = SegMask::from_class_map(16, 16, 5, &ids).map_err(|e| e.to_string())?;
    let mut config = OptimizerConfig::with_defaults(1);
    config.weights = LossWeights::new(1.5, vec![0.0]).map_err(|e| e.to_string())?;
    config.max_steps = 120;
    config.momentum = 0.5;
    config.seed = 42;
    let result = optimize("a dog", &target, &backends, &config).map_err(|e| e.to_string())?;
    let (trace, best_image) = scorer_only_run(&backends, "a dog", &config);
    let got: Vec<f64> = result.loss_trace.iter().map(|r| r.l_total).collect();
    ensure(got == trace, || "alpha_seg = 0 trajectory differs from the scorer-only run".into())?;
    ensure(result.image.data() == &best_image[..], || "alpha_seg = 0 best image differs".into())?;
    Ok(format!("100 random inputs, worst deviation {worst:.1e}; {}-step scorer-only run bit-identical", trace.len()))
}

// ---------------------------------------------------------------- routing

struct Counting {
    inner: ToySegmenter<f64>,
    calls: AtomicUsize,
}

impl Segmenter<f64> for Counting {
    fn name(&self) -> &str {
        self.inner.name()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn supported_classes(&self) -> &BTreeSet<u8> {
        self.inner.supported_classes()
    }
    fn predict(&self, image: &Image<f64>) -> maskguide::Result<SegMask<f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(image)
    }
    fn predict_vjp(&self, image: &Image<f64>, upstream: &[f64]) -> maskguide::Result<Vec<f64>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_vjp(image, upstream)
    }
}

fn subset(bits: u32) -> BTreeSet<u8> {
    (1..=4u8).filter(|c| bits & (1 << (c - 1)) != 0).collect()
}

fn routing_correctness() -> Outcome {
    let vocab = ClassVocabulary::toy();
    let base = toy_backends(5, 1, 2);
    let mut config = OptimizerConfig::with_defaults(2);
    config.max_steps = 1;
    let mut cases = 0;
    let mut orphans = 0;
    for a in 1..16u32 {
        for b in 1..16u32 {
            let sets = [subset(a), subset(b)];
            for t in 0..16u32 {
                let present = subset(t);
                let counters: Vec<Arc<Counting>> = sets
                    .iter()
                    .enumerate()
                    .map(|(i, s)| {
                        Arc::new(Counting {
                            inner: ToySegmenter::specialized(format!("g{i}"), &vocab, s.clone(), 0.05).unwrap(),
                            calls: AtomicUsize::new(0),
                        })
                    })
                    .collect();
                let guides = counters
                    .iter()
                    .enumerate()
                    .map(|(i, c)| GuideRegistration::new(format!("g{i}"), c.clone() as Arc<dyn Segmenter<f64>>, i).unwrap())
                    .collect();
                let backends = base.clone().with_guides(guides);
                let mut ids = vec![0u8; 5];
                for (slot, &c) in ids.iter_mut().zip(&present) {
                    *slot = c;
                }
                let target = SegMask::from_class_map(5, 1, 5, &ids).unwrap();
                let prompt = "a cat";
                let outcome = optimize(prompt, &target, &backends, &config);
                let invoked: Vec<bool> = counters.iter().map(|c| c.calls.load(Ordering::SeqCst) > 0).collect();
                let label = format!("guides {a:04b}/{b:04b}, target {t:04b}");

                let orphan = present.iter().find(|c| !sets[0].contains(c) && !sets[1].contains(c));
                if let Some(&class) = orphan {
                    orphans += 1;
                    match outcome {
                        Err(Error::OrphanClass { class_id, .. }) => {
                            ensure(class_id == class, || format!("{label}: orphan {class_id}, expected {class}"))?
                        }
                        other => return Err(format!("{label}: expected an orphan error, got {other:?}")),
                    }
                    ensure(invoked == [false, false], || format!("{label}: a guide ran before the orphan error"))?;
                } else {
                    let result = outcome.map_err(|e| format!("{label}: {e}"))?;
                    let expected: Vec<bool> = sets.iter().map(|s| !s.is_disjoint(&present)).collect();
                    ensure(invoked == expected, || format!("{label}: invoked {invoked:?}, expected {expected:?}"))?;
                    let names: Vec<String> = (0..2).filter(|&i| expected[i]).map(|i| format!("g{i}")).collect();
                    ensure(result.guides == names, || format!("{label}: routed {:?}", result.guides))?;
                }
                cases += 1;
            }
        }
    }
    ensure(cases == 15 * 15 * 16, || format!("{cases} cases"))?;
    Ok(format!("{cases} assignments checked, {orphans} orphan cases rejected"))
}

// ---------------------------------------------------------------- IoU

fn iou_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..100 {
        let (w, h, k) = (rng.random_range(1..9usize), rng.random_range(1..9usize), rng.random_range(2..7u8));
        let p: Vec<u8> = (0..w * h).map(|_| rng.random_range(0..k)).collect();
        let t: Vec<u8> = (0..w * h).map(|_| rng.random_range(0..k)).collect();
        let pm = SegMask::<f64>::from_class_map(w, h, k as usize, &p).map_err(|e| e.to_string())?;
        let tm = SegMask::<f64>::from_class_map(w, h, k as usize, &t).map_err(|e| e.to_string())?;

        let mut scores = Vec::new();
        for c in 1..k {
            let (mut inter, mut union) = (0usize, 0usize);
            for i in 0..w * h {
                let (a, b) = (p[i] == c, t[i] == c);
                inter += (a && b) as usize;
                union += (a || b) as usize;
            }
            if union > 0 {
                scores.push(inter as f64 / union as f64);
            }
        }
        let per_class = if scores.is_empty() {
            1.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        };
        let (mut inter, mut union) = (0usize, 0usize);
        for i in 0..w * h {
            inter += (p[i] > 0 && p[i] == t[i]) as usize;
            union += (p[i] > 0 || t[i] > 0) as usize;
        }
        let agnostic = if union == 0 { 1.0 } else { inter as f64 / union as f64 };

        let got = iou(&pm, &tm, IouMode::PerClass).map_err(|e| e.to_string())?;
        ensure(got == per_class, || format!("case {case}: per-class {got} vs {per_class}"))?;
        let got = iou(&pm, &tm, IouMode::ClassAgnostic).map_err(|e| e.to_string())?;
        ensure(got == agnostic, || format!("case {case}: class-agnostic {got} vs {agnostic}"))?;
    }
    Ok("100 random pairs exact in both modes".into())
}

// ---------------------------------------------------------------- filter

fn filter_protocol() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let vocab = ClassVocabulary::pascal_voc();
    let spec = SyntheticSpec {
        count: 200,
        width: 20,
        height: 20,
        min_objects: 0,
        max_objects: 6,
        min_side: 0.1,
        max_side: 0.5,
        seed: 77,
    };
    let generated = synthetic_records::<f64>(&spec, &vocab).map_err(|e| e.to_string())?;
    write_manifest(dir.path(), &generated, &vocab).map_err(|e| e.to_string())?;
    let text = std::fs::read_to_string(dir.path().join("manifest.jsonl")).map_err(|e| e.to_string())?;
    let entries = parse_manifest(&text).map_err(|e| e.to_string())?;
    let records = load_records::<f64>(&entries, dir.path(), &vocab).map_err(|e| e.to_string())?;
    ensure(records.len() == 200, || format!("{} records", records.len()))?;

    let person = vocab.id_of("person").ok_or("no person class")?;
    let mut expected = Vec::new();
    let mut clause_hits = [0usize; 3];
    for r in &records {
        let ids = r.target.class_map().ok_or("soft target mask")?;
        let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
        for &c in ids.iter().filter(|&&c| c != 0) {
            *counts.entry(c).or_default() += 1;
        }
        let excluded = counts.contains_key(&person);
        let bad_count = !(2..=4).contains(&counts.len());
        let small = counts.values().any(|&n| (n as f64) < 0.05 * ids.len() as f64);
        for (slot, hit) in clause_hits.iter_mut().zip([excluded, bad_count, small]) {
            *slot += hit as usize;
        }
        if !(excluded || bad_count || small) {
            expected.push(r.id.clone());
        }
    }

    let outcome = filter_records(records, &FilterSettings::default(), &vocab);
    let kept: Vec<String> = outcome.kept.iter().map(|r| r.id.clone()).collect();
    ensure(kept == expected, || format!("kept {} records, oracle kept {}", kept.len(), expected.len()))?;
    ensure(outcome.dropped == 200 - expected.len(), || format!("dropped {}", outcome.dropped))?;
    let counted = [
        outcome.rejections.excluded_class,
        outcome.rejections.object_count,
        outcome.rejections.small_object,
    ];
    ensure(counted == clause_hits, || format!("clause counts {counted:?} vs oracle {clause_hits:?}"))?;
    ensure(clause_hits.iter().all(|&c| c > 0) && !expected.is_empty(), || {
        format!("manifest does not exercise every clause: {clause_hits:?}, kept {}", expected.len())
    })?;
    Ok(format!(
        "200 records, {} kept; clause hits excluded {} / count {} / small {}",
        expected.len(),
        clause_hits[0],
        clause_hits[1],
        clause_hits[2]
    ))
}

// ---------------------------------------------------------------- refiner

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image<f64> {
    Image::new(w, h, (0..w * h * 3).map(|_| rng.random::<f64>()).collect()).unwrap()
}

fn refiner_endpoints() -> Outcome {
    let refiner = ToyRefiner::new(&ClassVocabulary::toy(), None).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let prompts = ["a cat", "a dog and a car", "a bird"];
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    for trial in 0..20 {
        let prompt = prompts[trial % prompts.len()];
        let (w, h) = (rng.random_range(2..14usize), rng.random_range(2..14usize));
        let seed = rng.random::<u64>();
        let input = random_image(&mut rng, w, h);
        let other = random_image(&mut rng, w, h);
        let cfg = |strength: f64| RefineConfig { strength, steps: 25, seed };

        let same = refine(&input, "s1-0", prompt, &cfg(0.0), &refiner).map_err(|e| e.to_string())?;
        ensure(same.image == input, || format!("trial {trial}: strength 0 changed the image"))?;

        let a = refine(&input, "s1-0", prompt, &cfg(1.0), &refiner).map_err(|e| e.to_string())?;
        let b = refine(&other, "s1-1", prompt, &cfg(1.0), &refiner).map_err(|e| e.to_string())?;
        ensure(a.image == b.image, || format!("trial {trial}: strength 1 depends on the input"))?;

        let mut last = -1.0;
        for s in grid {
            let out = refine(&input, "s1-0", prompt, &cfg(s), &refiner).map_err(|e| e.to_string())?;
            let d = norm(out.image.data().iter().zip(input.data()).map(|(o, i)| o - i));
            ensure(d >= last, || format!("trial {trial}: distance {d} at strength {s} after {last}"))?;
            last = d;
        }
    }
    Ok("20 random inputs: identity at 0, input-free at 1, monotone over 5 strengths".into())
}

// ---------------------------------------------------------------- end to end

struct CliRun {
    dir: PathBuf,
    job: Value,
}

impl CliRun {
    /// (id, sha256) for every stage-1 then stage-2 image, checked against the files.
    fn hashes(&self) -> Result<Vec<(String, String)>, String> {
        let mut out = Vec::new();
        for stage in ["stage1", "stage2"] {
            for r in self.job[stage].as_array().ok_or("job.json has no results")? {
                let file = self.dir.join(r["file"].as_str().unwrap_or_default());
                let bytes = std::fs::read(&file).map_err(|e| format!("{}: {e}", file.display()))?;
                let sha = r["sha256"].as_str().unwrap_or_default().to_string();
                ensure(sha256_hex(&bytes) == sha, || format!("{} does not match its recorded hash", file.display()))?;
                out.push((r["id"].as_str().unwrap_or_default().to_string(), sha));
            }
        }
        Ok(out)
    }
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Result<Self, String> {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let root = tmp.path().to_path_buf();
        let enc = encode_mask(&toytask::target::<f64>(), &ClassVocabulary::toy()).map_err(|e| e.to_string())?;
        std::fs::write(root.join("mask.png"), enc.png).map_err(|e| e.to_string())?;
        std::fs::write(root.join("vocab.json"), enc.vocabulary_json).map_err(|e| e.to_string())?;
        let backend = serde_json::to_string(&toytask::backend_config()).map_err(|e| e.to_string())?;
        std::fs::write(root.join("backend.json"), backend).map_err(|e| e.to_string())?;
        Ok(Self { _tmp: tmp, root })
    }

    fn generate(&self, name: &str) -> Result<CliRun, String> {
        let dir = self.root.join(name);
        let out = Command::new(env!("CARGO_BIN_EXE_maskguide"))
            .arg("generate")
            .arg("--mask")
            .arg(self.root.join("mask.png"))
            .arg("--vocab")
            .arg(self.root.join("vocab.json"))
            .arg("--backend")
            .arg(self.root.join("backend.json"))
            .args(["--prompt", toytask::PROMPT, "--seed", "17", "--n-stage1", "2", "--n-stage2", "2"])
            .args(["--weights", "1,50", "--max-steps", "60", "--step-size", "0.1", "--momentum", "0.9"])
            .args(["--init-scale", "1.7", "--strength", "0.4"])
            .arg("--out-dir")
            .arg(&dir)
            .output()
            .map_err(|e| e.to_string())?;
        ensure(out.status.success(), || {
            format!("generate exited {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr))
        })?;
        let text = std::fs::read_to_string(dir.join("job.json")).map_err(|e| e.to_string())?;
        let job = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        Ok(CliRun { dir, job })
    }
}

fn determinism() -> Outcome {
    let ws = Workspace::new()?;
    let first = ws.generate("first")?.hashes()?;
    let second = ws.generate("second")?.hashes()?;
    let stage1 = first.iter().filter(|(id, _)| id.starts_with("s1-")).count();
    let stage2 = first.iter().filter(|(id, _)| id.starts_with("s2-")).count();
    ensure(stage1 == 2 && stage2 == 4, || format!("fan-out gave {stage1} and {stage2} results"))?;
    ensure(first == second, || "artifact hashes differ between identical runs".into())?;
    let distinct: BTreeSet<&String> = first.iter().map(|(_, h)| h).collect();
    Ok(format!("{stage1} + {stage2} artifacts bit-identical across two runs ({} distinct images)", distinct.len()))
}

fn parse_sse(text: &str) -> Result<Vec<(u64, String, JobEvent)>, String> {
    let mut frames = Vec::new();
    for block in text.split("\n\n") {
        let (mut id, mut event, mut data) = (None, None, String::new());
        for line in block.lines() {
            if let Some(v) = line.strip_prefix("id:") {
                id = Some(v.trim().parse::<u64>().map_err(|e| e.to_string())?);
            } else if let Some(v) = line.strip_prefix("event:") {
                event = Some(v.trim().to_string());
            } else if let Some(v) = line.strip_prefix("data:") {
                data.push_str(v.trim_start());
            }
        }
        if let (Some(id), Some(event)) = (id, event) {
            frames.push((id, event, serde_json::from_str(&data).map_err(|e| e.to_string())?));
        }
    }
    Ok(frames)
}

async fn served_hashes(base: &str, spec: &Value) -> Result<Vec<(String, String)>, String> {
    let client = reqwest::Client::new();
    let resp = client.post(format!("{base}/jobs")).json(spec).send().await.map_err(|e| e.to_string())?;
    ensure(resp.status().as_u16() == 201, || format!("submit returned {}", resp.status()))?;
    let body: Value = resp.json().await.map_err(|e| e.to_string())?;
    let id = body["id"].as_str().ok_or("no job id")?.to_string();

    let text = client
        .get(format!("{base}/jobs/{id}/events"))
        .send()
        .await
        .map_err(|e| e.to_string())?
        .text()
        .await
        .map_err(|e| e.to_string())?;
    let frames = parse_sse(&text)?;
    let seqs: Vec<u64> = frames.iter().map(|f| f.0).collect();
    ensure(seqs == (1..=seqs.len() as u64).collect::<Vec<_>>(), || format!("event ids {seqs:?}"))?;
    match frames.last().map(|f| &f.2.kind) {
        Some(EventKind::Status { status: JobStatus::Done, .. }) => {}
        other => return Err(format!("stream ended with {other:?}")),
    }
    let mut ready = Vec::new();
    for (_, _, event) in &frames {
        match &event.kind {
            EventKind::Stage1Ready { id, artifact } | EventKind::Stage2Ready { id, artifact, .. } => {
                ready.push((id.clone(), artifact.clone()))
            }
            _ => {}
        }
    }

    // Replay after completion must deliver the same log.
    let replay = client
        .get(format!("{base}/jobs/{id}/events"))
        .send()
        .await
        .map_err(|e| e.to_string())?
        .text()
        .await
        .map_err(|e| e.to_string())?;
    let replayed: Vec<JobEvent> = parse_sse(&replay)?.into_iter().map(|f| f.2).collect();
    let original: Vec<JobEvent> = frames.into_iter().map(|f| f.2).collect();
    ensure(replayed == original, || "late replay differs from the live stream".into())?;

    for (rid, artifact) in &ready {
        let resp = client
            .get(format!("{base}/artifacts/{artifact}"))
            .send()
            .await
            .map_err(|e| e.to_string())?;
        ensure(resp.status().as_u16() == 200, || format!("artifact {rid} returned {}", resp.status()))?;
        let bytes = resp.bytes().await.map_err(|e| e.to_string())?;
        ensure(&sha256_hex(&bytes) == artifact, || format!("artifact {rid} bytes do not match its id"))?;
    }
    Ok(ready)
}

fn service_round_trip() -> Outcome {
    let ws = Workspace::new()?;
    let cli = ws.generate("cli")?;
    let expected = cli.hashes()?;
    let spec = cli.job["spec"].clone();

    let config = ServiceConfig {
        storage_root: ws.root.join("store"),
        input_root: ws.root.clone(),
        backends: toytask::backend_config(),
        ..ServiceConfig::default()
    };
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    let served = runtime.block_on(async {
        let service = Service::open(config).map_err(|e| e.to_string())?;
        let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(|e| e.to_string())?;
        let base = format!("http://{}", listener.local_addr().map_err(|e| e.to_string())?);
        let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
        let server = tokio::spawn(maskguide_service::http::serve(listener, service, async {
            let _ = stopped.await;
        }));
        let served = served_hashes(&base, &spec).await;
        let _ = stop.send(());
        let _ = server.await;
        served
    })?;
    ensure(served == expected, || format!("served {served:?}\nCLI    {expected:?}"))?;
    Ok(format!("{} artifacts from submit, event replay and fetch match the CLI bit for bit", served.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient fidelity", gradient_fidelity),
        ("guidance efficacy", guidance_efficacy),
        ("loss exactness", loss_exactness),
        ("routing correctness", routing_correctness),
        ("IoU oracle equivalence", iou_oracle),
        ("filter protocol", filter_protocol),
        ("refiner endpoints", refiner_endpoints),
        ("determinism", determinism),
        ("service round-trip", service_round_trip),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into());
            Err(format!("panic: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL  {name}: {reason}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
