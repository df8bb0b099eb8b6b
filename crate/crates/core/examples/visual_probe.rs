//! Measures how much one fine-tuned model relies on the image: response NLL,
//! visual contribution against noise images, and attention onto the visual
//! tokens at the answer position.

use l2tlab::conversation::MaskMode;
use l2tlab::experiment::{Benchmark, BenchmarkConfig};
use l2tlab::metrics::{attention_probe, response_nll, visual_contribution};
use l2tlab::trainer::{finetune, TrainConfig};

fn main() {
    let mut cfg = BenchmarkConfig::small();
    cfg.n = 1200;
    cfg.n_train = 1000;
    cfg.model.d_model = 32;
    cfg.model.d_ff = 64;
    cfg.finetune.epochs = 3;
    let bench = Benchmark::build(&cfg, 1).unwrap();
    let (mut model, _) = bench.pretrained_model(&cfg).unwrap();
    let tc = TrainConfig {
        mask_mode: MaskMode::L2t,
        ..cfg.finetune.clone()
    };
    finetune(&mut model, &bench.train, &tc).unwrap();

    for s in bench.test.iter().take(6) {
        let nll = response_nll(&model, s).unwrap();
        let vc = visual_contribution(&model, s, 0, 4).unwrap();
        let probe = attention_probe(&model, s).unwrap();
        let mass = probe.masses.iter().sum::<f64>() / probe.masses.len() as f64;
        println!(
            "{:<12} {:<9} nll {nll:>7.3}  vc {:>7.3} ({:>6.3}/token)  visual attention {mass:.3}",
            s.id,
            format!("{:?}", s.task_kind),
            vc.sum,
            vc.per_token
        );
    }
}
