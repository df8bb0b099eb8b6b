//! Serializes one conversation and shows which positions each mask mode
//! supervises.

use l2tlab::conversation::{build_loss_mask, serialize, ChatTemplate, ConversationSample, MaskMode, TaskKind, Turn};
use l2tlab::templates::TemplateSet;
use l2tlab::tokenizer::Vocab;

fn main() {
    let chat = ChatTemplate::with_slots(2);
    let sample = ConversationSample {
        image_id: "demo".into(),
        turns: vec![Turn {
            instruction: "What color is the cup? Answer the question using a single word or phrase.".into(),
            response: "Red".into(),
        }],
        task_kind: TaskKind::Qa,
    };
    let mut templates = TemplateSet::llava_mix();
    templates.system_templates = chat.system_templates();
    let texts = [chat.system.as_str(), chat.user.as_str(), chat.assistant.as_str(), "What color is the cup? Answer the question using a single word or phrase. Red"];
    let vocab = Vocab::build(texts.iter().copied(), 128).unwrap();
    let ser = serialize(&sample, &chat, &templates, &vocab).unwrap();
    let masks: Vec<_> = MaskMode::ALL.iter().map(|&m| build_loss_mask(&ser, m).unwrap()).collect();

    // position t predicts token t + 1
    print!("{:>4} {:<14} {:<14}", "pos", "target", "target role");
    for m in MaskMode::ALL {
        print!(" {:>10}", m.name());
    }
    println!();
    for t in 0..ser.len() - 1 {
        print!("{t:>4} {:<14} {:<14}", vocab.token(ser.ids[t + 1]).unwrap(), format!("{:?}", ser.roles[t + 1]));
        for m in &masks {
            print!(" {:>10}", if m.supervised[t] { "x" } else { "" });
        }
        println!();
    }
    for m in &masks {
        println!("{}: {} supervised positions", m.mode, m.count());
    }
}
