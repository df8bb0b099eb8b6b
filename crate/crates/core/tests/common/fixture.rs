//! A small benchmark for integration tests that need trained models.

use l2tlab::experiment::{Benchmark, BenchmarkConfig};

pub fn small_config() -> BenchmarkConfig {
    BenchmarkConfig::small()
}

pub fn small_bench(seed: u64) -> (BenchmarkConfig, Benchmark) {
    let cfg = small_config();
    let bench = Benchmark::build(&cfg, seed).unwrap();
    (cfg, bench)
}
