//! Prompts a model fine-tuned with every non-image token supervised with
//! images alone, and splits its output into new instruction/response pairs.

use l2tlab::conversation::MaskMode;
use l2tlab::experiment::{Benchmark, BenchmarkConfig};
use l2tlab::model::GenerateConfig;
use l2tlab::trainer::{finetune, self_generate, TrainConfig};

fn main() {
    let mut cfg = BenchmarkConfig::small();
    cfg.n = 1200;
    cfg.n_train = 1000;
    cfg.model.d_model = 32;
    cfg.model.d_ff = 64;
    cfg.finetune.epochs = 3;
    let bench = Benchmark::build(&cfg, 2).unwrap();
    let (mut model, _) = bench.pretrained_model(&cfg).unwrap();
    let tc = TrainConfig {
        mask_mode: MaskMode::L2tFull,
        ..cfg.finetune.clone()
    };
    finetune(&mut model, &bench.train, &tc).unwrap();

    let (records, report) =
        self_generate(&model, &bench.train_records, 40, &bench.pre, &GenerateConfig::greedy(48), 3).unwrap();
    println!(
        "{} attempted, {} malformed ({:.1}%), {} usable pairs",
        report.attempted,
        report.malformed,
        100.0 * report.malformed_rate(),
        records.len()
    );
    for r in records.iter().take(5) {
        let t = &r.sample.turns[0];
        println!("  user: {}\n  assistant: {}", t.instruction, t.response);
    }
}
