use std::collections::{BTreeMap, HashMap};

use crate::encoders::TokenSequence;
use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";

/// Lowercases and splits on every character that is not alphanumeric.
pub fn preprocess(sentence: &str) -> Result<Vec<String>> {
    let tokens: Vec<String> = sentence
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_owned)
        .collect();
    if tokens.is_empty() {
        return Err(Error::Empty("sentence after preprocessing"));
    }
    Ok(tokens)
}

/// Retrieval vocabulary. Index 0 is the unknown-word token; every other word
/// occurred at least `min_count` times in the training captions.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

impl Vocabulary {
    pub const UNK_INDEX: usize = 0;

    pub fn build<'a, I, S>(sentences: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a S>,
        S: AsRef<[String]> + 'a + ?Sized,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for s in sentences {
            for w in s.as_ref() {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        let kept = counts
            .into_iter()
            .filter(|&(w, c)| c >= min_count && w != UNK)
            .map(|(w, _)| w.to_owned());
        Self::from_words(kept, min_count)
    }

    /// Vocabulary from an ordered word list (without the unknown token).
    pub fn from_words(words: impl IntoIterator<Item = String>, min_count: usize) -> Self {
        let mut all = vec![UNK.to_owned()];
        all.extend(words);
        let index = all.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Vocabulary {
            words: all,
            index,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }

    /// Retained words in index order, excluding the unknown token.
    pub fn words(&self) -> &[String] {
        &self.words[1..]
    }

    pub fn index_of(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(Self::UNK_INDEX)
    }

    pub fn encode(&self, sentence_id: impl Into<String>, tokens: &[String]) -> TokenSequence {
        TokenSequence::new(sentence_id, tokens.iter().map(|w| self.index_of(w)).collect())
    }

    /// Preprocesses a raw sentence and maps it to indices.
    pub fn sentence(&self, sentence_id: impl Into<String>, raw: &str) -> Result<TokenSequence> {
        Ok(self.encode(sentence_id, &preprocess(raw)?))
    }
}
