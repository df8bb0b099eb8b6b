//! Mines frequent instruction sentences from synthetic data at several
//! thresholds.

use l2tlab::synthworld::{gen_dataset, GenConfig};
use l2tlab::templates::{count_sentences, select};

fn main() {
    let (train, _) = gen_dataset(&GenConfig {
        n: 3000,
        seed: 1,
        ..GenConfig::default()
    })
    .unwrap();
    let counts = count_sentences(train.iter().flat_map(|r| r.sample.turns.iter().map(|t| t.instruction.as_str())));
    println!("{} distinct sentences in {} samples", counts.0.len(), counts.1);
    for theta in [0.01, 0.05, 0.2, 0.5] {
        let set = select(counts.clone(), theta);
        println!("theta {theta}: {} templates", set.len());
        if theta == 0.05 {
            let mut top: Vec<_> = set.task_templates.iter().collect();
            top.sort_by(|a, b| b.1.cmp(a.1));
            for (s, c) in top.iter().take(8) {
                println!("  {c:>5}  {s}");
            }
        }
    }
}
