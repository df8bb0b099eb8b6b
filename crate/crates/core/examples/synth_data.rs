//! Generates a few synthetic records and shows the phrasing shortcut.

use l2tlab::synthworld::{gen_dataset, phrasing_lookup_accuracy, GenConfig, LeakChannel, ShortcutConfig, SynthImage};

fn main() {
    for leak in [0.0, 0.9] {
        let cfg = GenConfig {
            n: 2000,
            seed: 3,
            split: 0.9,
            shortcut: ShortcutConfig {
                leak_prob: leak,
                leak_channel: LeakChannel::Phrasing,
            },
            ..GenConfig::default()
        };
        let (train, test) = gen_dataset(&cfg).unwrap();
        println!(
            "leak {leak}: {} train / {} test, phrasing-lookup accuracy {:.3}",
            train.len(),
            test.len(),
            phrasing_lookup_accuracy(&train)
        );
        if leak > 0.0 {
            for r in &train[..5] {
                let img = SynthImage::from_feature(&r.image, cfg.grid_size).unwrap();
                println!("  [{:?}] {}", r.sample.task_kind, img.caption());
                for t in &r.sample.turns {
                    println!("    user: {}\n    assistant: {}", t.instruction, t.response);
                }
            }
        }
    }
}
