//! Pretrains the connector once, fine-tunes under every mask mode and
//! prints the evaluation of each cell.

use l2tlab::conversation::MaskMode;
use l2tlab::experiment::{run_cell, Benchmark, BenchmarkConfig};

fn main() {
    let mut cfg = BenchmarkConfig::small();
    cfg.n = 1200;
    cfg.n_train = 1000;
    cfg.pretrain_n = 200;
    cfg.model.d_model = 32;
    cfg.model.d_ff = 64;
    cfg.finetune.epochs = 2;
    let bench = Benchmark::build(&cfg, 0).unwrap();
    println!(
        "{} train / {} test samples, vocabulary {}, {} mined templates",
        bench.train.len(),
        bench.test.len(),
        bench.pre.vocab.len(),
        bench.pre.templates.len()
    );
    let (pretrained, log) = bench.pretrained_model(&cfg).unwrap();
    let first = log.rows.first().unwrap().loss;
    let last = log.rows.last().unwrap().loss;
    println!("pretrain: {} steps, loss {first:.3} -> {last:.3}", log.rows.len());

    println!("{:<11} {:>6} {:>9} {:>9} {:>8} {:>8}", "mode", "acc", "test nll", "train nll", "vc", "attn");
    for mode in MaskMode::ALL {
        let cell = run_cell(&bench, &pretrained, &cfg, mode, None).unwrap();
        let r = &cell.result;
        println!(
            "{:<11} {:>6.3} {:>9.3} {:>9.3} {:>8.3} {:>8.3}",
            mode.name(),
            r.test_accuracy,
            r.test_response_nll,
            r.train_response_nll,
            r.test_vc,
            r.test_attn_visual
        );
    }
}
