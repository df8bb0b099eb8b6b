mod common;

use std::collections::BTreeSet;

use common::fixture::small_bench;
use common::oracles::{brute_chair, random_captions};
use l2tlab::conversation::{response_mask, Role, SerializedSample, TaskKind};
use l2tlab::experiment::Benchmark;
use l2tlab::metrics::{
    attention_probe, chair, noise_feature, probe_from_attention, response_nll, visual_contribution,
    visual_contribution_with_noise,
};
use l2tlab::model::{Input, LogitModel, TinyMLLM, Visual};
use l2tlab::synthworld::OBJECTS;
use l2tlab::tensor::{Graph, Reduction, Tensor};
use l2tlab::trainer::PreparedSample;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Uniform or next-token-forced logits over a 7-token vocabulary.
struct Toy {
    forced: bool,
}

impl LogitModel for Toy {
    fn vocab_size(&self) -> usize {
        7
    }
    fn max_seq_len(&self) -> usize {
        64
    }
    fn batch_logits(&self, inputs: &[Input<'_>]) -> l2tlab::model::Result<Vec<Tensor>> {
        Ok(inputs
            .iter()
            .map(|inp| {
                let t = inp.ids.len();
                let mut d = vec![0.0; t * 7];
                if self.forced {
                    for p in 0..t - 1 {
                        d[p * 7 + inp.ids[p + 1]] = 60.0;
                    }
                }
                Tensor::new(vec![t, 7], d).unwrap()
            })
            .collect())
    }
}

/// `<bos> u : 5 a : 6 <eos>` by hand: one instruction token, a 2-token
/// response (word plus `<eos>`).
fn hand_sample() -> PreparedSample {
    use Role::*;
    let ser = SerializedSample {
        ids: vec![0, 5, 6, 5, 6, 6, 5, 1],
        roles: vec![Format, Format, Format, InstrContent, Format, Format, Response, Response],
        visual_slot_count: 0,
        image_start: 3,
        answer_anchors: vec![5],
        instruction_spans: vec![3..4],
        response_spans: vec![6..8],
    };
    PreparedSample {
        id: "hand".into(),
        task_kind: TaskKind::Qa,
        ser,
        image: Vec::new(),
        answer: None,
        gt_objects: Vec::new(),
    }
}

#[test]
fn response_nll_uniform_and_forced() {
    let s = hand_sample();
    let uniform = response_nll(&Toy { forced: false }, &s).unwrap();
    assert!((uniform - 2.0 * 7f64.ln()).abs() < 1e-12);
    let forced = response_nll(&Toy { forced: true }, &s).unwrap();
    assert!(forced < 1e-20);
}

fn trained_bench() -> (Benchmark, TinyMLLM) {
    let (cfg, bench) = small_bench(7);
    let (mut model, _) = bench.pretrained_model(&cfg).unwrap();
    let tc = l2tlab::trainer::TrainConfig {
        mask_mode: l2tlab::conversation::MaskMode::L2t,
        ..cfg.finetune.clone()
    };
    l2tlab::trainer::finetune(&mut model, &bench.train, &tc).unwrap();
    (bench, model)
}

#[test]
fn response_nll_equals_masked_cross_entropy_sum() {
    let (bench, model) = trained_bench();
    for s in bench.test.iter().take(20) {
        let out = model.forward(s.visual(), &s.ser.ids).unwrap();
        let mut g = Graph::new();
        let l = g.leaf(&out.logits, false);
        let ce = g
            .cross_entropy_masked(l, &s.ser.targets(), &response_mask(&s.ser).supervised, Reduction::Sum)
            .unwrap();
        assert!((response_nll(&model, s).unwrap() - g.value(ce).item()).abs() < 1e-12);
    }
}

#[test]
fn vc_vanishes_without_visual_signal() {
    let (bench, mut model) = trained_bench();
    let s = &bench.test[0];
    let same = visual_contribution_with_noise(&model, s, &[s.image.clone()]).unwrap();
    assert_eq!(same.sum, 0.0);
    let vc = visual_contribution(&model, s, 9, 1).unwrap();
    assert_ne!(vc.sum, 0.0);
    model.scale_connector(0.0);
    for s in bench.test.iter().take(10) {
        let vc = visual_contribution(&model, s, 9, 1).unwrap();
        assert_eq!(vc.sum, 0.0);
        assert!(vc.per_turn.iter().all(|&x| x == 0.0));
        // averaging several draws only adds rounding
        assert!(visual_contribution(&model, s, 9, 3).unwrap().sum.abs() < 1e-12);
    }
}

#[test]
fn vc_is_additive_over_turns() {
    let (bench, model) = trained_bench();
    // two turns sharing one image
    let mut rec = bench.test_records[0].clone();
    let mut second = bench.test_records[1].sample.turns[0].clone();
    second.instruction = format!("And also: {}", second.instruction);
    rec.sample.turns.push(second);
    let s = bench.pre.prepare_one(&rec).unwrap();
    assert_eq!(s.ser.response_spans.len(), 2);
    let noise = noise_feature(s.image.len(), 123, 0);
    let vc = visual_contribution_with_noise(&model, &s, &[noise.clone()]).unwrap();
    assert!((vc.sum - vc.per_turn.iter().sum::<f64>()).abs() < 1e-10);

    // independent per-turn evaluation from raw logits of the same contexts
    let real = model.forward(Some(Visual::Feature(&s.image)), &s.ser.ids).unwrap().logits;
    let fake = model.forward(Some(Visual::Feature(&noise)), &s.ser.ids).unwrap().logits;
    let logp = |l: &Tensor, r: usize| {
        let row = l.row(r - 1);
        let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
        row[s.ser.ids[r]] - lse
    };
    for (k, span) in s.ser.response_spans.iter().enumerate() {
        let turn: f64 = span.clone().map(|r| logp(&real, r) - logp(&fake, r)).sum();
        assert!((turn - vc.per_turn[k]).abs() < 1e-10);
    }
}

#[test]
fn probe_rows_are_stochastic() {
    let (bench, model) = trained_bench();
    for s in bench.test.iter().take(30) {
        let p = attention_probe(&model, s).unwrap();
        assert_eq!(p.anchor, s.ser.answer_anchor_index().unwrap());
        for (m, row) in p.masses.iter().zip(&p.rows) {
            assert!((0.0..=1.0).contains(m));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn uniform_attention_gives_slot_share() {
    // 40 positions, 9 slots starting at 14, anchor at the last position
    let t = 40;
    let heads = 3;
    let mut d = vec![0.0; heads * t * t];
    for h in 0..heads {
        for i in 0..t {
            for j in 0..=i {
                d[(h * t + i) * t + j] = 1.0 / (i + 1) as f64;
            }
        }
    }
    let att = Tensor::new(vec![heads, t, t], d).unwrap();
    let mut roles = vec![Role::InstrContent; t];
    roles[14..23].fill(Role::ImageSlot);
    let ser = SerializedSample {
        ids: vec![5; t],
        roles,
        visual_slot_count: 9,
        image_start: 14,
        answer_anchors: vec![t - 1],
        instruction_spans: vec![23..t - 1],
        response_spans: vec![t..t],
    };
    let p = probe_from_attention(&att, &ser, "u").unwrap();
    for m in &p.masses {
        assert!((m - 9.0 / 40.0).abs() < 1e-12);
    }
    let none = SerializedSample {
        answer_anchors: vec![],
        ..ser
    };
    assert!(probe_from_attention(&att, &none, "u").is_err());
}

#[test]
fn chair_matches_brute_force_on_1000_captions() {
    let vocab: BTreeSet<String> = OBJECTS.iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (caps, gts) = random_captions(&mut rng, 1000);
    let r = chair(&caps, &gts, &vocab).unwrap();
    let (m, h, f) = brute_chair(&caps, &gts);
    assert_eq!((r.n_mentioned, r.n_hallucinated), (m, h));
    assert_eq!(r.chair_i, h as f64 / m as f64);
    assert_eq!(r.chair_s, f as f64 / 1000.0);
    assert!(chair::<&str>(&[], &[], &vocab).is_err());
}

proptest! {
    #[test]
    fn chair_never_drops_when_hallucinating_more(seed in any::<u64>(), which in 0usize..20, obj in 0usize..30) {
        let vocab: BTreeSet<String> = OBJECTS.iter().map(|s| s.to_string()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut caps, gts) = random_captions(&mut rng, 20);
        let before = chair(&caps, &gts, &vocab).unwrap();
        let (m, h, f) = brute_chair(&caps, &gts);
        prop_assert_eq!((before.n_mentioned, before.n_hallucinated), (m, h));
        prop_assert_eq!(before.chair_s, f as f64 / 20.0);
        prop_assume!(!gts[which].iter().any(|g| g == OBJECTS[obj]));
        caps[which] = format!("{} and a {}.", caps[which].trim_end_matches('.'), OBJECTS[obj]);
        let after = chair(&caps, &gts, &vocab).unwrap();
        prop_assert!(after.chair_i >= before.chair_i);
        prop_assert!(after.chair_s >= before.chair_s);
    }
}
