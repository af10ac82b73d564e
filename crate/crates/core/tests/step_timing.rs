//! Manual timing probe for the desk-scale step cost (run with --ignored).

use dacal_core::dacal::{dacal_step, DacalConfig, Variant};
use dacal_core::datasets::{make_benchmark, BenchmarkConfig};
use dacal_core::models::{MtnConfig, SegNetConfig};
use dacal_core::self_training::{baseline_step, SelfTrainConfig, TrainState};

#[test]
#[ignore]
fn time_desk_scale_steps() {
    let bench = make_benchmark(&BenchmarkConfig {
        source_train: 4,
        target_train: 4,
        target_val: 1,
        ..Default::default()
    })
    .unwrap();
    let mut state = TrainState::new(
        SegNetConfig::default(),
        MtnConfig::default(),
        500,
        0.01,
        0.9,
        1,
    );
    let srefs: Vec<_> = bench.source_train.images[..2].iter().collect();
    let lrefs: Vec<_> = bench.source_train.labels[..2].iter().collect();
    let trefs: Vec<_> = bench.target_train.images[..2].iter().collect();

    let cfg = DacalConfig::default();
    // warm up
    dacal_step(&mut state, &srefs, &lrefs, &trefs, &cfg).unwrap();
    let t = std::time::Instant::now();
    let n = 10;
    for _ in 0..n {
        dacal_step(&mut state, &srefs, &lrefs, &trefs, &cfg).unwrap();
    }
    let per = t.elapsed().as_secs_f64() / n as f64;
    println!("dacal_step (PH): {:.1} ms/iter -> 500 iters = {:.1}s", per * 1e3, per * 500.0);

    let cfg_bi = DacalConfig { variant: Variant::Bi, ..Default::default() };
    let t = std::time::Instant::now();
    for _ in 0..n {
        dacal_step(&mut state, &srefs, &lrefs, &trefs, &cfg_bi).unwrap();
    }
    let per_bi = t.elapsed().as_secs_f64() / n as f64;
    println!("dacal_step (BI): {:.1} ms/iter", per_bi * 1e3);

    let base = SelfTrainConfig::default();
    let t = std::time::Instant::now();
    for _ in 0..n {
        baseline_step(&mut state, &srefs, &lrefs, &trefs, &base).unwrap();
    }
    let per_b = t.elapsed().as_secs_f64() / n as f64;
    println!("baseline_step: {:.1} ms/iter", per_b * 1e3);
    println!(
        "12-run acceptance estimate: {:.1} min",
        (3.0 * (per + per_bi + per_b + 0.4 * per_b) * 500.0) / 60.0
    );
}
