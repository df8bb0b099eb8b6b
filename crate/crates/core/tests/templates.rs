mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::oracles::{brute_counts, planted_corpus};
use l2tlab::templates::{
    count_sentences, merge_counts, mine_templates, select, TemplateSet,
};
use l2tlab::tokenizer::Vocab;
use proptest::prelude::*;

#[test]
fn planted_templates_mined_with_full_precision_and_recall() {
    let planted = [
        ("Answer the question using a single word or phrase.", 60),
        ("Reference OCR token:", 30),
        ("Answer briefly!", 2),
    ];
    let corpus = planted_corpus(100, &planted);
    let set = mine_templates(corpus.iter().map(String::as_str), 0.01).unwrap();
    let want: BTreeSet<String> = planted.iter().map(|p| p.0.to_string()).collect();
    let got: BTreeSet<String> = set.task_templates.keys().cloned().collect();
    assert_eq!(got, want);
    let brute = brute_counts(&corpus);
    for (s, f) in &set.task_templates {
        assert_eq!(brute[s], *f);
    }

    let strict = mine_templates(corpus.iter().map(String::as_str), 0.5).unwrap();
    assert_eq!(
        strict.task_templates.keys().collect::<Vec<_>>(),
        vec!["Answer the question using a single word or phrase."]
    );
}

#[test]
fn unique_sentence_not_mined() {
    let corpus = planted_corpus(100, &[]);
    let set = mine_templates(corpus.iter().map(String::as_str), 0.01).unwrap();
    assert!(set.task_templates.is_empty());
}

#[test]
fn shipped_list_round_trips() {
    let set = TemplateSet::llava_mix();
    assert_eq!(set.len(), 10);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.txt");
    set.save(&path).unwrap();
    assert_eq!(TemplateSet::load(&path).unwrap(), set);

    let empty = TemplateSet::default();
    empty.save(&path).unwrap();
    assert_eq!(std::fs::read_to_string(&path).unwrap(), "");
    assert_eq!(TemplateSet::load(&path).unwrap(), empty);
}

fn arb_corpus() -> impl Strategy<Value = Vec<String>> {
    let sentence = prop_oneof![
        Just("Answer the question using a single word or phrase.".to_string()),
        Just("Describe the image.".to_string()),
        Just("Be brief!".to_string()),
        "[a-d]{1,3}[.?]",
    ];
    prop::collection::vec(prop::collection::vec(sentence, 1..4).prop_map(|v| v.join(" ")), 1..40)
}

proptest! {
    #[test]
    fn raising_theta_never_adds(corpus in arb_corpus(), a in 0.01f64..0.98, b in 0.01f64..0.98) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let low = mine_templates(corpus.iter().map(String::as_str), lo).unwrap();
        let high = mine_templates(corpus.iter().map(String::as_str), hi).unwrap();
        for k in high.task_templates.keys() {
            prop_assert!(low.contains(k));
        }
    }

    #[test]
    fn order_and_sharding_do_not_matter(corpus in arb_corpus(), cut in 0usize..40, theta in 0.01f64..0.9) {
        let base = mine_templates(corpus.iter().map(String::as_str), theta).unwrap();
        let mut rev = corpus.clone();
        rev.reverse();
        prop_assert_eq!(&base, &mine_templates(rev.iter().map(String::as_str), theta).unwrap());
        let cut = cut.min(corpus.len());
        let merged = merge_counts(
            count_sentences(corpus[..cut].iter().map(String::as_str)),
            count_sentences(corpus[cut..].iter().map(String::as_str)),
        );
        prop_assert_eq!(&base, &select(merged, theta));
        let brute = brute_counts(&corpus);
        for (s, f) in &base.task_templates {
            prop_assert_eq!(brute[s], *f);
            prop_assert!(*f as f64 >= theta * corpus.len() as f64);
        }
    }

    #[test]
    fn save_load_identity(corpus in arb_corpus(), theta in 0.01f64..0.9) {
        let mut set = mine_templates(corpus.iter().map(String::as_str), theta).unwrap();
        set.system_templates = vec!["A chat.".into(), "user: {image}".into()];
        prop_assert_eq!(TemplateSet::parse(&set.to_file_string()).unwrap(), set);
    }

    #[test]
    fn vocab_frequency_order_matches_counter(lines in prop::collection::vec("[a-e]{1,2}( [a-e]{1,2}){0,6}", 1..20), cap in 6usize..40) {
        let v = Vocab::build(lines.iter().map(String::as_str), cap).unwrap();
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for l in &lines {
            for w in l.split(' ') {
                *counts.entry(w.to_string()).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let expect: Vec<String> = ranked.into_iter().take(cap - 5).map(|p| p.0).collect();
        prop_assert_eq!(&v.tokens()[5..], &expect[..]);
    }

    #[test]
    fn encode_decode_normalizes(words in prop::collection::vec("[A-Za-z]{1,5}[.,?]?", 1..10)) {
        let text = words.join("  ");
        let v = Vocab::build([text.as_str()], 1000).unwrap();
        let ids = v.encode(&text);
        prop_assert!(ids.iter().all(|&i| i >= 5));
        prop_assert_eq!(v.decode(&ids).unwrap(), l2tlab::tokenizer::normalize(&text));
    }
}
