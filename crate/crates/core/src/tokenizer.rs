//! Closed-vocabulary word tokenizer.
//!
//! Text is lowercased, split on whitespace, and every non-alphanumeric
//! character becomes its own token. The five special tokens use an
//! angle-bracket form that the splitter can never produce from text, since
//! `<` and `>` are always split off.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use thiserror::Error;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
pub const IMAGE: usize = 3;
pub const UNK: usize = 4;
pub const SPECIALS: [&str; 5] = ["<bos>", "<eos>", "<pad>", "<image>", "<unk>"];

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("vocabulary size {0} cannot hold the special tokens plus one word")]
    TooSmall(usize),
    #[error("token id {0} is not in the vocabulary")]
    InvalidId(usize),
    #[error("malformed vocab file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Splits text into lowercase word and punctuation tokens.
pub fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() {
                cur.extend(ch.to_lowercase());
            } else {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// The text `decode(encode(text))` yields when `text` has no unknown words.
pub fn normalize(text: &str) -> String {
    words(text).join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Keeps the `max_size - 5` most frequent tokens, ties broken
    /// lexicographically, after the specials at ids 0..5.
    pub fn build<'s, I>(corpus: I, max_size: usize) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = &'s str>,
    {
        if max_size < SPECIALS.len() + 1 {
            return Err(TokenizerError::TooSmall(max_size));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        for line in corpus {
            for w in words(line) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if counts.is_empty() {
            return Err(TokenizerError::EmptyCorpus);
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - SPECIALS.len());
        Ok(Self::from_tokens(
            SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(ranked.into_iter().map(|(w, _)| w))
                .collect(),
        ))
    }

    fn from_tokens(id_to_token: Vec<String>) -> Self {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self {
            token_to_id,
            id_to_token,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String, TokenizerError> {
        let toks = ids
            .iter()
            .map(|&i| self.token(i).ok_or(TokenizerError::InvalidId(i)))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(toks.join(" "))
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let mut s = self.id_to_token.join("\n");
        s.push('\n');
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text = fs::read_to_string(path)?;
        let toks: Vec<String> = text.lines().map(str::to_string).collect();
        if toks.len() < SPECIALS.len() || toks[..SPECIALS.len()] != SPECIALS {
            return Err(TokenizerError::Malformed(
                "first lines must be the special tokens".into(),
            ));
        }
        let v = Self::from_tokens(toks);
        if v.token_to_id.len() != v.id_to_token.len() {
            return Err(TokenizerError::Malformed("duplicate token".into()));
        }
        Ok(v)
    }
}
