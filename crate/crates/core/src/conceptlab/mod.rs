//! Caption preprocessing, the retrieval vocabulary, the concept vocabulary
//! and frequency-based soft concept labels.
//!
//! Part-of-speech filtering and lemmatization are approximated by a stopword
//! list, an optional content-word whitelist and an optional lemma table.

mod concepts;
mod stopwords;
mod text;

pub use concepts::{
    build_concept_vocab, extract_soft_labels, ConceptFilter, ConceptLabelVector, ConceptVocabulary,
    LemmaTable, WordSet,
};
pub use text::{preprocess, Vocabulary, UNK};
