use std::collections::HashSet;

use l2tlab::conversation::{
    annotate_task_templates, build_loss_mask, loss_mask_unchecked, serialize, ChatTemplate, ConversationError,
    ConversationSample, MaskMode, Role, TaskKind, Turn,
};
use l2tlab::model::{MllmConfig, TinyMLLM, Visual};
use l2tlab::synthworld::{gen_dataset, GenConfig, QA_TEMPLATE};
use l2tlab::templates::TemplateSet;
use l2tlab::tensor::{Graph, Reduction};
use l2tlab::tokenizer::Vocab;
use proptest::prelude::*;

fn qa_templates() -> TemplateSet {
    let mut t = TemplateSet::default();
    t.task_templates.insert(QA_TEMPLATE.to_string(), 0);
    t
}

fn sample(turns: &[(&str, &str)]) -> ConversationSample {
    ConversationSample {
        image_id: "img".into(),
        turns: turns
            .iter()
            .map(|(i, r)| Turn {
                instruction: i.to_string(),
                response: r.to_string(),
            })
            .collect(),
        task_kind: TaskKind::Qa,
    }
}

fn vocab_for(chat: &ChatTemplate, texts: &[&str]) -> Vocab {
    let mut lines: Vec<&str> = texts.to_vec();
    lines.push(&chat.system);
    lines.push(&chat.user);
    lines.push(&chat.assistant);
    Vocab::build(lines, 10_000).unwrap()
}

fn role_name(r: Role) -> &'static str {
    match r {
        Role::SysTemplate => "SYS_TEMPLATE",
        Role::TaskTemplate => "TASK_TEMPLATE",
        Role::InstrContent => "INSTR_CONTENT",
        Role::Format => "FORMAT",
        Role::ImageSlot => "IMAGE_SLOT",
        Role::Response => "RESPONSE",
    }
}

#[test]
fn one_turn_qa_matches_golden_fixture() {
    let chat = ChatTemplate::with_slots(4);
    let instr = "What color is the box? Answer the question using a single word or phrase.";
    let s = sample(&[(instr, "Red")]);
    let vocab = vocab_for(&chat, &[instr, "Red"]);
    let ser = serialize(&s, &chat, &qa_templates(), &vocab).unwrap();

    let golden: Vec<(String, String)> = include_str!("fixtures/golden_qa_n4.tsv")
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| {
            let (t, r) = l.split_once('\t').unwrap();
            (t.to_string(), r.to_string())
        })
        .collect();
    let got: Vec<(String, String)> = ser
        .ids
        .iter()
        .zip(&ser.roles)
        .map(|(&id, &r)| (vocab.token(id).unwrap().to_string(), role_name(r).to_string()))
        .collect();
    assert_eq!(got, golden);
    assert_eq!(ser.visual_slot_count, 4);
    // anchor is the colon of the assistant tag
    let anchor = ser.answer_anchor_index().unwrap();
    assert_eq!(vocab.token(ser.ids[anchor]), Some(":"));
    assert_eq!(ser.roles[anchor + 1], Role::Response);
}

#[test]
fn image_slots_only_before_first_turn() {
    let chat = ChatTemplate::with_slots(3);
    let s = sample(&[("What is left?", "cup"), ("And right?", "box")]);
    let vocab = vocab_for(&chat, &["What is left? cup And right? box"]);
    let ser = serialize(&s, &chat, &TemplateSet::default(), &vocab).unwrap();
    let slots: Vec<usize> = (0..ser.len()).filter(|&i| ser.roles[i] == Role::ImageSlot).collect();
    assert_eq!(slots, (ser.image_start..ser.image_start + 3).collect::<Vec<_>>());
    assert!(slots.iter().all(|&p| p < ser.instruction_spans[0].start));
    assert_eq!(ser.answer_anchors.len(), 2);
    // L2T supervises the second turn's instruction too
    let m = build_loss_mask(&ser, MaskMode::L2t).unwrap();
    let second = ser.instruction_spans[1].clone();
    assert!(second.clone().all(|p| m.supervised[p - 1]));
}

#[test]
fn empty_preamble_has_no_system_tokens() {
    let mut chat = ChatTemplate::with_slots(2);
    chat.system = String::new();
    let s = sample(&[("What is this?", "cup")]);
    let vocab = vocab_for(&chat, &["What is this? cup"]);
    let ser = serialize(&s, &chat, &TemplateSet::default(), &vocab).unwrap();
    assert!(!ser.roles.contains(&Role::SysTemplate));
    assert!(!chat.system_templates().contains(&String::new()));
}

#[test]
fn invalid_samples_rejected() {
    let chat = ChatTemplate::with_slots(2);
    let vocab = vocab_for(&chat, &["x"]);
    let empty = sample(&[]);
    assert!(matches!(
        serialize(&empty, &chat, &TemplateSet::default(), &vocab),
        Err(ConversationError::InvalidSample(_))
    ));
    let blank = sample(&[("  ", "x")]);
    assert!(serialize(&blank, &chat, &TemplateSet::default(), &vocab).is_err());
}

#[test]
fn annotate_zero_and_full_template() {
    let t = qa_templates();
    let none = annotate_task_templates("Where is the cup? Look closely.", &t);
    assert!(none.iter().all(|(_, r)| *r == Role::InstrContent));
    let all = annotate_task_templates(QA_TEMPLATE, &t);
    assert_eq!(all, vec![(QA_TEMPLATE.to_string(), Role::TaskTemplate)]);
}

fn corpus() -> Vec<l2tlab::conversation::Record> {
    let cfg = GenConfig {
        n: 400,
        seed: 5,
        ..GenConfig::default()
    };
    let (mut a, b) = gen_dataset(&cfg).unwrap();
    a.extend(b);
    a
}

#[test]
fn serialization_is_injective_on_corpus() {
    let chat = ChatTemplate::with_slots(4);
    let recs = corpus();
    let texts: Vec<String> = recs
        .iter()
        .flat_map(|r| r.sample.turns.iter().flat_map(|t| [t.instruction.clone(), t.response.clone()]))
        .collect();
    let vocab = vocab_for(&chat, &texts.iter().map(String::as_str).collect::<Vec<_>>());
    let tpl = TemplateSet::llava_mix();
    let mut seen_samples = HashSet::new();
    let mut seen_ser = HashSet::new();
    for r in &recs {
        let ser = serialize(&r.sample, &chat, &tpl, &vocab).unwrap();
        let key_s = serde_json::to_string(&r.sample.turns).unwrap();
        if seen_samples.insert(key_s) {
            assert!(seen_ser.insert((ser.ids.clone(), ser.roles.clone())));
        }
    }
}

#[test]
fn l2t_restricted_to_responses_equals_vit_loss() {
    let chat = ChatTemplate::with_slots(4);
    let recs = corpus();
    let texts: Vec<String> = recs
        .iter()
        .flat_map(|r| r.sample.turns.iter().flat_map(|t| [t.instruction.clone(), t.response.clone()]))
        .collect();
    let vocab = vocab_for(&chat, &texts.iter().map(String::as_str).collect::<Vec<_>>());
    let model = TinyMLLM::new(MllmConfig {
        d_model: 16,
        n_layers: 1,
        n_heads: 2,
        d_ff: 32,
        vocab_size: vocab.len(),
        n_visual_tokens: 4,
        feature_dim: recs[0].image.len(),
        d_enc: 8,
        ..MllmConfig::default()
    })
    .unwrap();
    let tpl = TemplateSet::llava_mix();
    for r in recs.iter().take(20) {
        let ser = serialize(&r.sample, &chat, &tpl, &vocab).unwrap();
        let out = model.forward(Some(Visual::Feature(&r.image)), &ser.ids).unwrap();
        let targets = ser.targets();
        let l2t = loss_mask_unchecked(&ser, MaskMode::L2t);
        let restricted: Vec<bool> = (0..ser.len())
            .map(|t| l2t.supervised[t] && ser.roles[t + 1] == Role::Response)
            .collect();
        let vit = build_loss_mask(&ser, MaskMode::Vit).unwrap();
        let mut g = Graph::new();
        let lv = g.leaf(&out.logits, false);
        let a = g.cross_entropy_masked(lv, &targets, &restricted, Reduction::Sum).unwrap();
        let b = g.cross_entropy_masked(lv, &targets, &vit.supervised, Reduction::Sum).unwrap();
        assert!((g.value(a).item() - g.value(b).item()).abs() <= 1e-12);
    }
}

fn arb_sentence() -> impl Strategy<Value = String> {
    prop_oneof![
        Just(QA_TEMPLATE.to_string()),
        "[a-z]{1,6}( [a-z]{1,6}){0,3}[.?]",
    ]
}

fn arb_instruction() -> impl Strategy<Value = String> {
    prop::collection::vec(arb_sentence(), 1..4).prop_map(|v| v.join(" "))
}

proptest! {
    #[test]
    fn masks_nest(
        turns in prop::collection::vec((arb_instruction(), "[a-z]{1,8}( [a-z]{1,8}){0,2}"), 1..3),
        slots in 1usize..5,
        empty_sys in any::<bool>(),
    ) {
        let mut chat = ChatTemplate::with_slots(slots);
        if empty_sys {
            chat.system.clear();
        }
        let pairs: Vec<(&str, &str)> = turns.iter().map(|(i, r)| (i.as_str(), r.as_str())).collect();
        let s = sample(&pairs);
        let texts: Vec<&str> = turns.iter().flat_map(|(i, r)| [i.as_str(), r.as_str()]).collect();
        let vocab = vocab_for(&chat, &texts);
        let ser = serialize(&s, &chat, &qa_templates(), &vocab).unwrap();
        prop_assert_eq!(ser.ids.len(), ser.roles.len());
        let m = |mode| loss_mask_unchecked(&ser, mode).supervised;
        let chain = [m(MaskMode::Vit), m(MaskMode::L2t), m(MaskMode::L2tNoSys), m(MaskMode::L2tFull)];
        for w in chain.windows(2) {
            for t in 0..ser.len() {
                prop_assert!(!w[0][t] || w[1][t]);
            }
        }
        for mode in MaskMode::ALL {
            let mask = m(mode);
            for t in 0..ser.len() {
                if mask[t] {
                    prop_assert!(mode.permits(ser.roles[t + 1]));
                    prop_assert_ne!(ser.roles[t + 1], Role::ImageSlot);
                }
            }
        }
        for (k, &a) in ser.answer_anchors.iter().enumerate() {
            prop_assert_eq!(ser.roles[a], Role::Format);
            prop_assert_eq!(a + 1, ser.response_spans[k].start);
            prop_assert_eq!(vocab.token(ser.ids[a]), Some(":"));
        }
    }
}
