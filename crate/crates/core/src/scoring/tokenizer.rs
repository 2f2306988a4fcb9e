use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::TokenSequence;
use crate::error::{Error, Result};

pub const BOS: &str = "<bos>";
pub const UNK: &str = "<unk>";
pub const BOS_ID: u32 = 0;
pub const UNK_ID: u32 = 1;

/// Lower-cased word-level tokenizer; ASCII punctuation marks are tokens of
/// their own.
///
/// Encoding is word-local, so the encoding of `context ++ text` is always
/// the concatenation of the two encodings and the context is an exact
/// prefix of the joint sequence. Every sequence starts with `<bos>`, which
/// therefore always belongs to the prompt: an empty context yields
/// `prompt_len == 1`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: HashMap<String, u32>,
}

impl From<Vec<String>> for Tokenizer {
    fn from(vocab: Vec<String>) -> Self {
        let index = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { vocab, index }
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.vocab
    }
}

pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for raw in text.split_whitespace() {
        let mut cur = String::new();
        for ch in raw.chars() {
            if ch.is_ascii_punctuation() && ch != '_' && ch != '\'' {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.extend(ch.to_lowercase());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

impl Tokenizer {
    /// Builds a vocabulary in order of first appearance.
    pub fn fit<'a, I>(texts: I) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut vocab = vec![BOS.to_string(), UNK.to_string()];
        let mut index: HashMap<String, u32> = vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        for text in texts {
            for w in split_words(text) {
                if !index.contains_key(&w) {
                    index.insert(w.clone(), vocab.len() as u32);
                    vocab.push(w);
                }
            }
        }
        Self { vocab, index }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .into_iter()
            .map(|w| self.index.get(&w).copied().unwrap_or(UNK_ID))
            .collect()
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| self.vocab.get(i as usize).map(String::as_str).unwrap_or(UNK))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `<bos> context text`, with everything up to the end of the context
    /// marked as prompt.
    pub fn tokenize(&self, text: &str, context: &str) -> Result<TokenSequence> {
        let target = self.encode(text);
        if target.is_empty() {
            return Err(Error::Tokenize(format!(
                "text {text:?} produces no target tokens"
            )));
        }
        let mut ids = Vec::with_capacity(1 + target.len());
        ids.push(BOS_ID);
        ids.extend(self.encode(context));
        let prompt_len = ids.len();
        ids.extend(target);
        Ok(TokenSequence { ids, prompt_len })
    }
}
