//! Times training steps of VIT and L2T on synthetic sequences of equal
//! length but different instruction/response splits.

use l2tlab::conversation::MaskMode;
use l2tlab::experiment::{Benchmark, BenchmarkConfig};
use l2tlab::metrics::{bench_samples, split_lengths, throughput_bench};
use l2tlab::model::TinyMLLM;

fn main() {
    let cfg = BenchmarkConfig::small();
    let bench = Benchmark::build(&cfg, 0).unwrap();
    let mc = bench.model_config(&cfg);
    let model = TinyMLLM::new(mc.clone()).unwrap();
    for ratio in [0.1, 1.0, 10.0] {
        let (li, la) = split_lengths(ratio, 48);
        let samples = bench_samples(&bench.pre, ratio, 48, mc.feature_dim, 32, 8).unwrap();
        let res = throughput_bench(&model, &samples, &[MaskMode::Vit, MaskMode::L2t], 4, 20).unwrap();
        println!(
            "L_I/L_A = {ratio:>4} ({li:>2}/{la:>2}): vit {:.1} samples/s, l2t {:.1} samples/s, ratio {:.3}",
            res[0].samples_per_s,
            res[1].samples_per_s,
            res[1].samples_per_s / res[0].samples_per_s
        );
    }
}
