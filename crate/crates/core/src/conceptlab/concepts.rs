use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use super::stopwords;
use crate::error::{Error, Result};

/// Word list such as a stopword or content-word file, one word per line.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct WordSet(HashSet<String>);

impl WordSet {
    pub fn english_stopwords() -> Self {
        WordSet(stopwords::ENGLISH.iter().map(|w| (*w).to_owned()).collect())
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn parse(text: &str) -> Self {
        WordSet(
            text.lines()
                .map(|l| l.trim().to_lowercase())
                .filter(|l| !l.is_empty())
                .collect(),
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&text))
    }
}

impl<S: Into<String>> FromIterator<S> for WordSet {
    fn from_iter<I: IntoIterator<Item = S>>(iter: I) -> Self {
        WordSet(iter.into_iter().map(Into::into).collect())
    }
}

/// `word → lemma` table applied before concept counting.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LemmaTable(HashMap<String, String>);

impl LemmaTable {
    pub fn lemma<'a>(&'a self, word: &'a str) -> &'a str {
        self.0.get(word).map(String::as_str).unwrap_or(word)
    }

    /// `word<TAB>lemma` per line.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut map = HashMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (word, lemma) = line.split_once('\t').ok_or_else(|| Error::Parse {
                path: origin.to_owned(),
                line: i + 1,
                message: "expected `word<TAB>lemma`".into(),
            })?;
            map.insert(word.trim().to_lowercase(), lemma.trim().to_lowercase());
        }
        Ok(LemmaTable(map))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

impl<A: Into<String>, B: Into<String>> FromIterator<(A, B)> for LemmaTable {
    fn from_iter<I: IntoIterator<Item = (A, B)>>(iter: I) -> Self {
        LemmaTable(iter.into_iter().map(|(a, b)| (a.into(), b.into())).collect())
    }
}

/// Filters and normalization applied to caption words before concept
/// counting. Without a content-word list every non-stopword is a candidate.
#[derive(Clone, Debug, Default)]
pub struct ConceptFilter {
    pub stopwords: WordSet,
    pub content_words: Option<WordSet>,
    pub lemmas: LemmaTable,
}

impl ConceptFilter {
    pub fn english() -> Self {
        ConceptFilter {
            stopwords: WordSet::english_stopwords(),
            ..Self::default()
        }
    }

    /// The concept term for a word, or `None` when the word is filtered out.
    pub fn term<'a>(&'a self, word: &'a str) -> Option<&'a str> {
        if self.stopwords.contains(word) {
            return None;
        }
        let lemma = self.lemmas.lemma(word);
        if self.stopwords.contains(lemma) {
            return None;
        }
        match &self.content_words {
            Some(keep) if !keep.contains(lemma) && !keep.contains(word) => None,
            _ => Some(lemma),
        }
    }
}

/// The `K` most frequent concept terms of the training captions, in rank
/// order (frequency descending, ties lexicographic).
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptVocabulary {
    entries: Vec<(String, u64)>,
    index: HashMap<String, usize>,
}

impl ConceptVocabulary {
    pub fn from_entries(entries: Vec<(String, u64)>) -> Result<Self> {
        if entries.windows(2).any(|w| w[0].1 < w[1].1) {
            return Err(Error::invalid("concept frequencies must be non-increasing"));
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, (w, _)) in entries.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate concept `{w}`")));
            }
        }
        Ok(ConceptVocabulary { entries, index })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(String, u64)] {
        &self.entries
    }

    pub fn word(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn index_of(&self, term: &str) -> Option<usize> {
        self.index.get(term).copied()
    }

    /// `word<TAB>frequency` per line, in rank order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (w, f) in &self.entries {
            let _ = writeln!(out, "{w}\t{f}");
        }
        out
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let err = |message: &str| Error::Parse {
                path: origin.to_owned(),
                line: i + 1,
                message: message.to_owned(),
            };
            let (w, f) = line.split_once('\t').ok_or_else(|| err("expected `word<TAB>frequency`"))?;
            let f = f.trim().parse().map_err(|_| err("frequency is not an integer"))?;
            entries.push((w.to_owned(), f));
        }
        Self::from_entries(entries)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// Ranks concept terms of the tokenized training captions by token
/// frequency and keeps the top `k`.
pub fn build_concept_vocab<S: AsRef<[String]>>(
    captions: &[S],
    k: usize,
    filter: &ConceptFilter,
) -> Result<ConceptVocabulary> {
    if k == 0 {
        return Err(Error::invalid("concept vocabulary size must be positive"));
    }
    if captions.is_empty() {
        return Err(Error::Empty("caption corpus"));
    }
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for cap in captions {
        for w in cap.as_ref() {
            if let Some(term) = filter.term(w) {
                *counts.entry(term).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, u64)> = counts.into_iter().map(|(w, c)| (w.to_owned(), c)).collect();
    // BTreeMap order is lexicographic; a stable sort keeps it within ties.
    ranked.sort_by(|a, b| b.1.cmp(&a.1));
    ranked.truncate(k);
    if ranked.is_empty() {
        log::warn!("concept vocabulary is empty: every caption word was filtered out");
    }
    ConceptVocabulary::from_entries(ranked)
}

/// Soft concept labels of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptLabelVector {
    pub video_id: String,
    pub y: Vec<f64>,
}

/// `y_i = freq(concept i) / max_j freq(concept j)` over all tokens of the
/// video's captions; all zeros when no concept occurs.
pub fn extract_soft_labels<S: AsRef<[String]>>(
    video_id: &str,
    sentences: &[S],
    concepts: &ConceptVocabulary,
    filter: &ConceptFilter,
) -> Result<ConceptLabelVector> {
    if concepts.is_empty() {
        return Err(Error::invalid("cannot label against an empty concept vocabulary"));
    }
    if sentences.is_empty() {
        return Err(Error::Empty("caption list of a video"));
    }
    let mut freq = vec![0u64; concepts.len()];
    for s in sentences {
        for w in s.as_ref() {
            if let Some(i) = filter.term(w).and_then(|t| concepts.index_of(t)) {
                freq[i] += 1;
            }
        }
    }
    let max = freq.iter().copied().max().unwrap_or(0);
    let y = if max == 0 {
        vec![0.0; freq.len()]
    } else {
        freq.iter().map(|&f| f as f64 / max as f64).collect()
    };
    Ok(ConceptLabelVector {
        video_id: video_id.to_owned(),
        y,
    })
}
