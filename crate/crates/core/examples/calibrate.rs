//! Sweeps toy-task settings and prints mean final IoU over 20 seeds, guided
//! and unguided. This produced the frozen values in `maskguide::toytask`.
//!
//! ```text
//! cargo run --release -p maskguide --example calibrate -- \
//!     [temperature] [blobs] [init_scale] [selector_spread] [first_seed]
//! ```

use maskguide::backends::BackendRegistry;
use maskguide::{iou, optimize, toytask, Backends, ClassVocabulary, IouMode, OptimizerConfig};

fn main() {
    let args: Vec<f64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("numeric argument"))
        .collect();
    let arg = |i: usize, default: f64| args.get(i).copied().unwrap_or(default);
    let (temperature, blobs, init_scale, spread) = (arg(0, 0.3), arg(1, 8.0) as usize, arg(2, 1.7), arg(3, 1.0));
    let first_seed = arg(4, 0.0) as u64;

    let mut config = toytask::backend_config();
    config.params.insert(
        "toy".into(),
        serde_json::json!({
            "width": toytask::SIZE,
            "height": toytask::SIZE,
            "blobs": blobs,
            "temperature": temperature,
            "selector_spread": spread,
        }),
    );
    let backends: Backends<f64> = BackendRegistry::with_builtins()
        .build(&config, &ClassVocabulary::toy())
        .expect("toy backends");
    let target = toytask::target::<f64>();
    println!("temperature={temperature} blobs={blobs} init_scale={init_scale} spread={spread} seeds={first_seed}..");

    for &(step_size, momentum) in &[(0.05, 0.0), (0.2, 0.0), (1.0, 0.0), (0.05, 0.9), (0.1, 0.9)] {
        for &alpha_seg in &[0.0, 5.0, 50.0] {
            let started = std::time::Instant::now();
            let scores: Vec<f64> = (first_seed..first_seed + 20)
                .map(|seed| {
                    let mut c: OptimizerConfig<f64> = toytask::optimizer_config(alpha_seg, seed);
                    c.step_size = step_size;
                    c.momentum = momentum;
                    c.init_scale = init_scale;
                    let r = optimize(toytask::PROMPT, &target, &backends, &c).expect("optimize");
                    let pred = backends.eval_segmenter.predict(&r.image).expect("segment").harden();
                    iou(&pred, &target, IouMode::PerClass).expect("iou")
                })
                .collect();
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            let worst = scores.iter().cloned().fold(f64::INFINITY, f64::min);
            println!(
                "step={step_size:<5} momentum={momentum:<4} alpha_seg={alpha_seg:<5} mean_iou={mean:.4} worst={worst:.4} ({:.1?})",
                started.elapsed()
            );
        }
    }
}
