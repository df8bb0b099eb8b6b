//! Scores object hallucination in captions: oracle captions, then the same
//! captions with one invented object appended to every other one.

use std::collections::BTreeSet;

use l2tlab::metrics::chair;
use l2tlab::synthworld::{gen_pretrain_pairs, SynthImage, OBJECTS};

fn main() {
    let vocab: BTreeSet<String> = OBJECTS.iter().map(|s| s.to_string()).collect();
    let records = gen_pretrain_pairs(200, 4, 3, 4);
    let gts: Vec<Vec<String>> = records.iter().map(|r| r.gt_objects.clone()).collect();
    let mut captions: Vec<String> = records
        .iter()
        .map(|r| SynthImage::from_feature(&r.image, 3).unwrap().caption())
        .collect();
    let clean = chair(&captions, &gts, &vocab).unwrap();
    println!("oracle captions: CHAIR_s {:.3}, CHAIR_i {:.3}", clean.chair_s, clean.chair_i);

    for (i, (c, gt)) in captions.iter_mut().zip(&gts).enumerate().filter(|(i, _)| i % 2 == 0) {
        let extra = OBJECTS.iter().cycle().skip(i).find(|o| !gt.iter().any(|g| g == *o)).unwrap();
        *c = format!("{} There is also a {extra}.", c);
    }
    let noisy = chair(&captions, &gts, &vocab).unwrap();
    println!(
        "with inventions:  CHAIR_s {:.3}, CHAIR_i {:.3} ({} of {} mentions hallucinated)",
        noisy.chair_s, noisy.chair_i, noisy.n_hallucinated, noisy.n_mentioned
    );
    println!("example: {}", captions[0]);
}
