//! Brute-force reference implementations, independent of the library paths
//! they check.

use std::collections::{BTreeMap, BTreeSet};

use l2tlab::synthworld::OBJECTS;
use l2tlab::templates::split_sentences;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `(mentioned, hallucinated, flagged captions)` by scanning every object
/// word against every caption token.
pub fn brute_chair(captions: &[String], gt: &[Vec<String>]) -> (usize, usize, usize) {
    let (mut mentioned, mut hallucinated, mut flagged) = (0, 0, 0);
    for (cap, truth) in captions.iter().zip(gt) {
        let tokens: Vec<String> = cap
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
            .collect();
        let mut any = false;
        for obj in OBJECTS {
            if tokens.iter().any(|t| t == obj) {
                mentioned += 1;
                if !truth.iter().any(|g| g == obj) {
                    hallucinated += 1;
                    any = true;
                }
            }
        }
        flagged += usize::from(any);
    }
    (mentioned, hallucinated, flagged)
}

pub fn random_captions(rng: &mut ChaCha8Rng, n: usize) -> (Vec<String>, Vec<Vec<String>>) {
    let filler = ["a", "the", "big", "red", "on", "left", "near", "Small", "blue"];
    let mut caps = Vec::new();
    let mut gts = Vec::new();
    for _ in 0..n {
        let k = rng.gen_range(0..8);
        let mut words = Vec::new();
        for _ in 0..k {
            if rng.gen_bool(0.5) {
                let o = OBJECTS.choose(rng).unwrap();
                words.push(if rng.gen_bool(0.2) { o.to_uppercase() } else { o.to_string() });
            } else {
                words.push(filler.choose(rng).unwrap().to_string());
            }
        }
        let sep = if rng.gen_bool(0.5) { ", " } else { " " };
        caps.push(format!("{}.", words.join(sep)));
        let n_gt = rng.gen_range(0..5);
        gts.push(
            OBJECTS
                .choose_multiple(rng, n_gt)
                .map(|s| s.to_string())
                .collect(),
        );
    }
    (caps, gts)
}

/// Planted templates with the given sample counts out of `n`; every other
/// sentence unique.
pub fn planted_corpus(n: usize, planted: &[(&str, usize)]) -> Vec<String> {
    (0..n)
        .map(|i| {
            let mut parts = vec![format!("Unique content number w{i} here.")];
            for (t, c) in planted {
                if i < *c {
                    parts.push(t.to_string());
                }
            }
            parts.join(" ")
        })
        .collect()
}

/// For each distinct sentence, scan every sample.
pub fn brute_counts(corpus: &[String]) -> BTreeMap<String, usize> {
    let all: BTreeSet<String> = corpus.iter().flat_map(|c| split_sentences(c)).collect();
    all.into_iter()
        .map(|s| {
            let c = corpus.iter().filter(|c| split_sentences(c).contains(&s)).count();
            (s, c)
        })
        .collect()
}
