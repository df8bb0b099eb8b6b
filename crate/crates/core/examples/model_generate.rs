//! Runs a fresh model forward, decodes greedily and with beam search, and
//! round-trips a checkpoint.

use l2tlab::model::{generate, GenerateConfig, MllmConfig, ParamGroup, TinyMLLM, Visual};
use l2tlab::tokenizer::{BOS, IMAGE};

fn main() {
    let cfg = MllmConfig {
        d_model: 32,
        n_layers: 2,
        n_heads: 4,
        d_ff: 64,
        vocab_size: 40,
        n_visual_tokens: 4,
        feature_dim: 20,
        d_enc: 16,
        max_seq_len: 48,
        ..MllmConfig::default()
    };
    let model = TinyMLLM::new(cfg).unwrap();
    for g in [ParamGroup::Encoder, ParamGroup::Connector, ParamGroup::Decoder] {
        println!("{g:?}: {} parameters", model.group_param_count(g));
    }
    let feature: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
    let prompt = [BOS, 7, IMAGE, IMAGE, IMAGE, IMAGE, 9, 11];
    let out = model.forward(Some(Visual::Feature(&feature)), &prompt).unwrap();
    println!("logits {:?}, {} attention maps", out.logits.shape(), out.attentions.len());

    let greedy = generate(&model, Some(Visual::Feature(&feature)), &prompt, &GenerateConfig::greedy(12)).unwrap();
    let beam = generate(&model, Some(Visual::Feature(&feature)), &prompt, &GenerateConfig::beam(5, 12)).unwrap();
    println!("greedy: {greedy:?}\nbeam5:  {beam:?}");

    let dir = std::env::temp_dir().join("l2tlab-example");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    model.save(&path).unwrap();
    let back = TinyMLLM::load(&path).unwrap();
    let again = back.forward(Some(Visual::Feature(&feature)), &prompt).unwrap();
    println!("checkpoint round trip identical: {}", again.logits == out.logits);
}
