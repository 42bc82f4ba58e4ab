//! Multi-level encoding of frame-feature sequences and sentences.
//!
//! Both sides share one recipe. Level 1 is a global summary (mean of frame
//! features, or bag-of-words for text). Level 2 is the time-averaged output
//! of a bidirectional GRU. Level 3 runs 1-d convolutions of several widths
//! over the biGRU feature map and max-pools each over time. The three levels
//! are concatenated.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{
    bigru, conv1d_relu_maxpool, init_uniform, Conv1dParams, GruParams, Mode, ParamId, ParamStore,
    Session, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub frame_dim: usize,
    /// Size of the retrieval vocabulary including the unknown-word token.
    pub vocab_size: usize,
    pub word_embed_dim: usize,
    /// Hidden size of each video GRU direction.
    pub gru_hidden: usize,
    /// Hidden size of each text GRU direction.
    pub text_gru_hidden: usize,
    pub conv_filters: usize,
    pub video_kernels: Vec<usize>,
    pub text_kernels: Vec<usize>,
    pub max_sentence_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            frame_dim: 4096,
            vocab_size: 1,
            word_embed_dim: 500,
            gru_hidden: 512,
            text_gru_hidden: 512,
            conv_filters: 512,
            video_kernels: vec![2, 3, 4, 5],
            text_kernels: vec![2, 3, 4],
            max_sentence_len: 64,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("frame_dim", self.frame_dim),
            ("vocab_size", self.vocab_size),
            ("word_embed_dim", self.word_embed_dim),
            ("gru_hidden", self.gru_hidden),
            ("text_gru_hidden", self.text_gru_hidden),
            ("conv_filters", self.conv_filters),
            ("max_sentence_len", self.max_sentence_len),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{name} must be positive")));
        }
        for (name, ks) in [("video_kernels", &self.video_kernels), ("text_kernels", &self.text_kernels)] {
            if ks.is_empty() || ks.contains(&0) {
                return Err(Error::invalid(format!("{name} must be a non-empty list of positive widths")));
            }
        }
        Ok(())
    }

    /// Dimensions of the three video levels.
    pub fn video_level_dims(&self) -> [usize; 3] {
        [
            self.frame_dim,
            2 * self.gru_hidden,
            self.conv_filters * self.video_kernels.len(),
        ]
    }

    /// Dimensions of the three text levels.
    pub fn text_level_dims(&self) -> [usize; 3] {
        [
            self.vocab_size,
            2 * self.text_gru_hidden,
            self.conv_filters * self.text_kernels.len(),
        ]
    }

    pub fn video_dim(&self) -> usize {
        self.video_level_dims().iter().sum()
    }

    pub fn text_dim(&self) -> usize {
        self.text_level_dims().iter().sum()
    }
}

/// Precomputed per-frame features of one video, `n × d` with `n ≥ 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameFeatureSequence {
    pub video_id: String,
    features: Tensor,
}

impl FrameFeatureSequence {
    pub fn new(video_id: impl Into<String>, features: Tensor) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::invalid("frame features must be an n×d matrix"));
        }
        if !features.is_finite() {
            return Err(Error::NonFinite {
                term: "frame features".into(),
            });
        }
        Ok(FrameFeatureSequence {
            video_id: video_id.into(),
            features,
        })
    }

    pub fn from_rows(video_id: impl Into<String>, rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("video frame sequence"));
        }
        Self::new(video_id, Tensor::from_rows(rows)?)
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn num_frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn frame_dim(&self) -> usize {
        self.features.shape()[1]
    }
}

/// A sentence as indices into the retrieval vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub sentence_id: String,
    pub token_indices: Vec<usize>,
}

impl TokenSequence {
    pub fn new(sentence_id: impl Into<String>, token_indices: Vec<usize>) -> Self {
        TokenSequence {
            sentence_id: sentence_id.into(),
            token_indices,
        }
    }
}

/// Values of the three encoding levels and their concatenation.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiLevelEncoding {
    pub level1: Vec<f64>,
    pub level2: Vec<f64>,
    pub level3: Vec<f64>,
}

impl MultiLevelEncoding {
    pub fn concat(&self) -> Vec<f64> {
        [&self.level1[..], &self.level2, &self.level3].concat()
    }

    pub fn dim(&self) -> usize {
        self.level1.len() + self.level2.len() + self.level3.len()
    }

    fn from_vars(s: &Session<'_>, levels: &LevelVars) -> Self {
        MultiLevelEncoding {
            level1: s.value(levels.level1).data().to_vec(),
            level2: s.value(levels.level2).data().to_vec(),
            level3: s.value(levels.level3).data().to_vec(),
        }
    }
}

/// Tape handles of an encoding.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub level1: Var,
    pub level2: Var,
    pub level3: Var,
    pub concat: Var,
}

/// Levels 2 and 3 over an `n × D` input map.
fn temporal_levels(
    s: &mut Session<'_>,
    fwd: &GruParams,
    bwd: &GruParams,
    convs: &[Conv1dParams],
    seq: Var,
) -> Result<(Var, Var)> {
    let hmap = bigru(s, fwd, bwd, seq)?;
    let level2 = s.tape.mean_rows(hmap)?;
    let pooled = convs
        .iter()
        .map(|c| conv1d_relu_maxpool(s, c, hmap))
        .collect::<Result<Vec<_>>>()?;
    let level3 = s.tape.concat_cols(&pooled)?;
    Ok((level2, level3))
}

fn conv_blocks(
    store: &mut ParamStore,
    prefix: &str,
    kernels: &[usize],
    filters: usize,
    input_dim: usize,
    rng: &mut impl Rng,
) -> Vec<Conv1dParams> {
    kernels
        .iter()
        .map(|&k| Conv1dParams::new(store, &format!("{prefix}.conv{k}"), k, filters, input_dim, rng))
        .collect()
}

#[derive(Clone, Debug)]
pub struct VideoEncoder {
    pub frame_dim: usize,
    pub gru_fwd: GruParams,
    pub gru_bwd: GruParams,
    pub convs: Vec<Conv1dParams>,
}

impl VideoEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let h = cfg.gru_hidden;
        VideoEncoder {
            frame_dim: cfg.frame_dim,
            gru_fwd: GruParams::new(store, "video.gru_fwd", cfg.frame_dim, h, rng),
            gru_bwd: GruParams::new(store, "video.gru_bwd", cfg.frame_dim, h, rng),
            convs: conv_blocks(store, "video", &cfg.video_kernels, cfg.conv_filters, 2 * h, rng),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, frames: &FrameFeatureSequence) -> Result<LevelVars> {
        if frames.frame_dim() != self.frame_dim {
            return Err(Error::shape(
                "encode_video",
                frames.features().shape(),
                &[frames.num_frames(), self.frame_dim],
            ));
        }
        let seq = s.constant(frames.features().clone());
        let level1 = s.tape.mean_rows(seq)?;
        let (level2, level3) = temporal_levels(s, &self.gru_fwd, &self.gru_bwd, &self.convs, seq)?;
        let concat = s.tape.concat_cols(&[level1, level2, level3])?;
        Ok(LevelVars {
            level1,
            level2,
            level3,
            concat,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab_size: usize,
    pub max_len: usize,
    pub embedding: ParamId,
    pub gru_fwd: GruParams,
    pub gru_bwd: GruParams,
    pub convs: Vec<Conv1dParams>,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Self {
        let (e, h) = (cfg.word_embed_dim, cfg.text_gru_hidden);
        let embedding = store.add(
            "text.embedding",
            init_uniform(rng, &[cfg.vocab_size, e], e),
            true,
        );
        TextEncoder {
            vocab_size: cfg.vocab_size,
            max_len: cfg.max_sentence_len,
            embedding,
            gru_fwd: GruParams::new(store, "text.gru_fwd", e, h, rng),
            gru_bwd: GruParams::new(store, "text.gru_bwd", e, h, rng),
            convs: conv_blocks(store, "text", &cfg.text_kernels, cfg.conv_filters, 2 * h, rng),
        }
    }

    /// Indices actually encoded: validated and truncated to the length cap.
    pub fn prepare<'a>(&self, tokens: &'a TokenSequence) -> Result<&'a [usize]> {
        let idx = &tokens.token_indices;
        if idx.is_empty() {
            return Err(Error::Empty("token sequence"));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= self.vocab_size) {
            return Err(Error::invalid(format!(
                "token index {bad} out of range for vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(&idx[..idx.len().min(self.max_len)])
    }

    pub fn forward(&self, s: &mut Session<'_>, tokens: &TokenSequence) -> Result<LevelVars> {
        let idx = self.prepare(tokens)?;
        let mut bow = vec![0.0; self.vocab_size];
        let w = 1.0 / idx.len() as f64;
        for &i in idx {
            bow[i] += w;
        }
        let level1 = s.constant(Tensor::vector(bow)?);
        let table = s.param(self.embedding);
        let words = s.tape.gather(table, idx)?;
        let (level2, level3) = temporal_levels(s, &self.gru_fwd, &self.gru_bwd, &self.convs, words)?;
        let concat = s.tape.concat_cols(&[level1, level2, level3])?;
        Ok(LevelVars {
            level1,
            level2,
            level3,
            concat,
        })
    }
}

/// Multi-level encoding of a video over frozen parameters.
pub fn encode_video(
    encoder: &VideoEncoder,
    store: &ParamStore,
    frames: &FrameFeatureSequence,
) -> Result<MultiLevelEncoding> {
    let mut s = Session::new(store, Mode::Eval);
    let levels = encoder.forward(&mut s, frames)?;
    Ok(MultiLevelEncoding::from_vars(&s, &levels))
}

/// Multi-level encoding of a sentence over frozen parameters.
pub fn encode_text(
    encoder: &TextEncoder,
    store: &ParamStore,
    tokens: &TokenSequence,
) -> Result<MultiLevelEncoding> {
    let mut s = Session::new(store, Mode::Eval);
    let levels = encoder.forward(&mut s, tokens)?;
    Ok(MultiLevelEncoding::from_vars(&s, &levels))
}
