//! Builds a vocabulary and round-trips text through it.

use l2tlab::tokenizer::{normalize, words, Vocab};

fn main() {
    let corpus = [
        "What color is the cup? Answer the question using a single word or phrase.",
        "Is there a dog in the image?",
        "A red cup and a small dog.",
    ];
    let vocab = Vocab::build(corpus.iter().copied(), 64).unwrap();
    println!("{} tokens: {:?}", vocab.len(), &vocab.tokens()[..12]);
    let text = "Is there a red dog? Zebra!";
    println!("words: {:?}", words(text));
    let ids = vocab.encode(text);
    println!("ids: {ids:?}");
    println!("decoded: {}", vocab.decode(&ids).unwrap());
    println!("normalized: {}", normalize(text));
}
