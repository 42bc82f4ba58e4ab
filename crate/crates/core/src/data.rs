//! On-disk inputs and their conversion into training datasets.
//!
//! Feature file: one frame per line, `video_id<TAB>frame_index<TAB>floats`
//! with space-separated floats. A video's frames are contiguous and
//! numbered from 0.
//!
//! Caption file: `video_id#caption_index<TAB>sentence`.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::conceptlab::{
    build_concept_vocab, extract_soft_labels, preprocess, ConceptFilter, ConceptVocabulary, LemmaTable,
    Vocabulary, WordSet,
};
use crate::config::RunConfig;
use crate::model::ModelConfig;
use crate::encoders::{FrameFeatureSequence, TextEncoder};
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tensor};
use crate::trainer::{Caption, TrainingDataset};

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

/// Parses a feature file into one sequence per video, in file order.
pub fn parse_features(text: &str, origin: &str) -> Result<Vec<FrameFeatureSequence>> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_owned(),
        line,
        message,
    };
    let mut videos: Vec<(String, Vec<f64>, usize)> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let mut dim: Option<usize> = None;
    for (n, line) in content_lines(text) {
        let mut fields = line.splitn(3, '\t');
        let (Some(id), Some(idx), Some(values)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(err(n, "expected `video_id<TAB>frame_index<TAB>features`".into()));
        };
        if id.is_empty() {
            return Err(err(n, "empty video id".into()));
        }
        let idx: usize = idx
            .trim()
            .parse()
            .map_err(|_| err(n, format!("invalid frame index `{idx}`")))?;
        let row = values
            .split_whitespace()
            .map(|v| match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(err(n, format!("invalid feature value `{v}`"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None if row.is_empty() => return Err(err(n, "frame has no features".into())),
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(err(n, format!("expected {d} feature values, found {}", row.len())))
            }
            _ => {}
        }
        let current = videos.last_mut().filter(|(v, _, _)| v == id);
        match current {
            Some((_, data, frames)) => {
                if idx != *frames {
                    return Err(err(n, format!("expected frame {} of `{id}`, found {idx}", *frames)));
                }
                data.extend_from_slice(&row);
                *frames += 1;
            }
            None => {
                if seen.contains_key(id) {
                    return Err(err(n, format!("frames of `{id}` are not contiguous")));
                }
                if idx != 0 {
                    return Err(err(n, format!("first frame of `{id}` has index {idx}, expected 0")));
                }
                seen.insert(id.to_owned(), videos.len());
                videos.push((id.to_owned(), row, 1));
            }
        }
    }
    let d = dim.ok_or(Error::Empty("feature file"))?;
    videos
        .into_iter()
        .map(|(id, data, frames)| FrameFeatureSequence::new(id, Tensor::matrix(frames, d, data)?))
        .collect()
}

pub fn read_features(path: &Path) -> Result<Vec<FrameFeatureSequence>> {
    parse_features(&read_text(path)?, &path.display().to_string())
}

/// One caption line, tokenized.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptionRecord {
    /// The full `video_id#index` key.
    pub caption_id: String,
    pub video_id: String,
    pub tokens: Vec<String>,
}

pub fn parse_captions(text: &str, origin: &str) -> Result<Vec<CaptionRecord>> {
    let err = |line: usize, message: String| Error::Parse {
        path: origin.to_owned(),
        line,
        message,
    };
    let mut ids = BTreeSet::new();
    let mut out = Vec::new();
    for (n, line) in content_lines(text) {
        let (key, sentence) = line
            .split_once('\t')
            .ok_or_else(|| err(n, "expected `video_id#index<TAB>sentence`".into()))?;
        let (video, idx) = key
            .rsplit_once('#')
            .ok_or_else(|| err(n, format!("caption key `{key}` lacks `#index`")))?;
        if video.is_empty() || idx.parse::<usize>().is_err() {
            return Err(err(n, format!("malformed caption key `{key}`")));
        }
        if !ids.insert(key.to_owned()) {
            return Err(err(n, format!("duplicate caption key `{key}`")));
        }
        let tokens = preprocess(sentence).map_err(|_| err(n, "sentence has no words".into()))?;
        out.push(CaptionRecord {
            caption_id: key.to_owned(),
            video_id: video.to_owned(),
            tokens,
        });
    }
    if out.is_empty() {
        return Err(Error::Empty("caption file"));
    }
    Ok(out)
}

pub fn read_captions(path: &Path) -> Result<Vec<CaptionRecord>> {
    parse_captions(&read_text(path)?, &path.display().to_string())
}

/// Retrieval and concept vocabularies built from the training captions.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabularies {
    pub words: Vocabulary,
    pub concepts: ConceptVocabulary,
}

impl Vocabularies {
    pub fn build(captions: &[CaptionRecord], min_count: usize, num_concepts: usize, filter: &ConceptFilter) -> Result<Self> {
        let tokens: Vec<&[String]> = captions.iter().map(|c| c.tokens.as_slice()).collect();
        let words = Vocabulary::build(tokens.iter().copied(), min_count);
        let concepts = build_concept_vocab(&tokens, num_concepts, filter)?;
        if concepts.is_empty() {
            return Err(Error::invalid("no concept terms survive filtering"));
        }
        Ok(Vocabularies { words, concepts })
    }
}

/// Pairs every caption with its video and derives per-video soft labels
/// from that video's captions.
pub fn build_dataset(
    videos: Vec<FrameFeatureSequence>,
    captions: &[CaptionRecord],
    vocab: &Vocabularies,
    filter: &ConceptFilter,
) -> Result<TrainingDataset> {
    let pos: HashMap<&str, usize> = videos.iter().enumerate().map(|(i, v)| (v.video_id.as_str(), i)).collect();
    let unknown: BTreeSet<&str> = captions
        .iter()
        .map(|c| c.video_id.as_str())
        .filter(|v| !pos.contains_key(v))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::UnknownIds {
            what: "captions reference videos missing from the features",
            ids: unknown.into_iter().map(str::to_owned).collect(),
        });
    }
    let mut per_video: Vec<Vec<&[String]>> = vec![Vec::new(); videos.len()];
    let caps = captions
        .iter()
        .map(|c| {
            let v = pos[c.video_id.as_str()];
            per_video[v].push(&c.tokens);
            Caption {
                video: v,
                tokens: vocab.words.encode(c.caption_id.clone(), &c.tokens),
            }
        })
        .collect();
    let bare: Vec<String> = videos
        .iter()
        .zip(&per_video)
        .filter(|(_, s)| s.is_empty())
        .map(|(v, _)| v.video_id.clone())
        .collect();
    if !bare.is_empty() {
        return Err(Error::UnknownIds {
            what: "videos without captions",
            ids: bare,
        });
    }
    let labels = videos
        .iter()
        .zip(&per_video)
        .map(|(v, s)| Ok(extract_soft_labels(&v.video_id, s, &vocab.concepts, filter)?.y))
        .collect::<Result<Vec<_>>>()?;
    TrainingDataset::new(videos, caps, labels)
}

/// Concept filter of a run: the configured stopword, content-word and lemma
/// files, or the built-in English stopwords and no lemmatization.
pub fn concept_filter(cfg: &RunConfig) -> Result<ConceptFilter> {
    let d = &cfg.data;
    Ok(ConceptFilter {
        stopwords: match &d.stopwords {
            Some(p) => WordSet::read(p)?,
            None => WordSet::english_stopwords(),
        },
        content_words: d.content_words.as_deref().map(WordSet::read).transpose()?,
        lemmas: match &d.lemmas {
            Some(p) => LemmaTable::read(p)?,
            None => LemmaTable::default(),
        },
    })
}

/// Model architecture sized to the data: vocabulary and concept counts come
/// from the vocabularies.
pub fn sized_model(cfg: &RunConfig, vocab: &Vocabularies) -> ModelConfig {
    let mut m = cfg.model.clone();
    m.encoder.vocab_size = vocab.words.len();
    m.space.concept_dim = vocab.concepts.len();
    m
}

pub fn check_frame_dim(expected: usize, videos: &[FrameFeatureSequence], origin: &Path) -> Result<()> {
    match videos.first() {
        Some(v) if v.frame_dim() != expected => Err(Error::invalid(format!(
            "{}: frame features have dimension {}, expected {expected}",
            origin.display(),
            v.frame_dim()
        ))),
        _ => Ok(()),
    }
}

/// Vocabularies plus training and validation sets of a run.
pub struct TrainingData {
    pub vocab: Vocabularies,
    pub train: TrainingDataset,
    pub val: TrainingDataset,
}

/// Reads the files named by `cfg`. Vocabularies come from the training
/// captions; validation falls back to the training files.
pub fn load_training_data(cfg: &RunConfig) -> Result<TrainingData> {
    let required = |p: &Option<std::path::PathBuf>, what: &str| {
        p.clone()
            .ok_or_else(|| Error::invalid(format!("no {what} file given (flag or config key `{what}`)")))
    };
    let feat_path = required(&cfg.data.features, "features")?;
    let cap_path = required(&cfg.data.captions, "captions")?;
    let filter = concept_filter(cfg)?;

    let captions = read_captions(&cap_path)?;
    let videos = read_features(&feat_path)?;
    check_frame_dim(cfg.model.encoder.frame_dim, &videos, &feat_path)?;
    let vocab = Vocabularies::build(&captions, cfg.min_count, cfg.model.space.concept_dim, &filter)?;
    let train = build_dataset(videos, &captions, &vocab, &filter)?;

    let val_feat = cfg.data.val_features.clone().unwrap_or(feat_path);
    let val_cap = cfg.data.val_captions.clone().unwrap_or(cap_path);
    let val_videos = read_features(&val_feat)?;
    check_frame_dim(cfg.model.encoder.frame_dim, &val_videos, &val_feat)?;
    let val = build_dataset(val_videos, &read_captions(&val_cap)?, &vocab, &filter)?;
    Ok(TrainingData { vocab, train, val })
}

/// Parses `word v1 … vE` lines (whitespace-separated) into a word table.
pub fn parse_word_vectors(text: &str, origin: &str, dim: usize) -> Result<HashMap<String, Vec<f64>>> {
    let mut table = HashMap::new();
    for (n, line) in content_lines(text) {
        let err = |message: String| Error::Parse {
            path: origin.to_owned(),
            line: n,
            message,
        };
        let mut fields = line.split_whitespace();
        let word = fields.next().expect("non-blank line");
        let vec = fields
            .map(|v| match v.parse::<f64>() {
                Ok(x) if x.is_finite() => Ok(x),
                _ => Err(err(format!("invalid vector value `{v}`"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        if vec.len() != dim {
            return Err(err(format!("expected {dim} values for `{word}`, found {}", vec.len())));
        }
        table.insert(word.to_owned(), vec);
    }
    Ok(table)
}

/// Overwrites the embedding rows of vocabulary words found in `path`.
/// Returns how many rows were replaced.
pub fn load_word_vectors(path: &Path, store: &mut ParamStore, text: &TextEncoder, vocab: &Vocabulary) -> Result<usize> {
    let shape = store.get(text.embedding).shape().to_vec();
    let dim = shape[1];
    let table = parse_word_vectors(&read_text(path)?, &path.display().to_string(), dim)?;
    let emb = store.get_mut(text.embedding);
    let mut replaced = 0;
    for (i, w) in vocab.words().iter().enumerate() {
        if let Some(v) = table.get(w) {
            let row = i + 1;
            emb.data_mut()[row * dim..(row + 1) * dim].copy_from_slice(v);
            replaced += 1;
        }
    }
    Ok(replaced)
}
