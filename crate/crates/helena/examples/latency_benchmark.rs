//! Times single-sample inference for the default model and prints its
//! complexity counters.
//!
//!     cargo run --release --example latency_benchmark

use helena::eval::benchmark_inference;
use helena::model::{build, count_flops, ModelConfig};
use helena::stream_rng;

fn main() {
    let cfg = ModelConfig::default();
    let weights = build::<f32, _>(&cfg, &mut stream_rng(0, 201)).unwrap();

    println!(
        "grid {}x{}, {} tokens of width {}",
        cfg.n_s,
        cfg.n_d,
        cfg.tokens(),
        cfg.d
    );
    println!("parameters: {}", weights.count_params());
    println!("forward FLOPs: {}", count_flops(&cfg));

    // Ten warm-up passes run first; only the hundred after them are timed.
    let stats = benchmark_inference(&weights, 100).unwrap();
    println!(
        "\nlatency over {} runs: mean {:.3} ms  std {:.3} ms  min {:.3} ms  max {:.3} ms",
        stats.runs, stats.mean_ms, stats.std_ms, stats.min_ms, stats.max_ms
    );
    println!(
        "effective throughput: {:.2} GFLOP/s",
        count_flops(&cfg) as f64 / (stats.mean_ms * 1e-3) / 1e9
    );
}
