use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::encoders::{EncoderConfig, FrameFeatureSequence, TextEncoder, TokenSequence, VideoEncoder};
use crate::error::{Error, Result};
use crate::hybridspace::{
    joint_loss_vars, project_concept, project_latent, HybridEmbedding, JointLossVars, LossConfig,
    Projection, SpaceConfig,
};
use crate::index::EmbeddingIndex;
use crate::numcore::{Mode, ParamStore, Session, Tensor, Var};

/// Architecture hyperparameters of the whole network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub space: SpaceConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.space.validate()
    }
}

/// Dual encoding network with latent and concept heads on both sides.
///
/// The struct only holds parameter handles; values live in a
/// [`ParamStore`] so that frozen parameters can be shared across threads.
#[derive(Clone, Debug)]
pub struct DualEncoding {
    pub config: ModelConfig,
    pub video: VideoEncoder,
    pub text: TextEncoder,
    pub video_latent: Projection,
    pub text_latent: Projection,
    pub video_concept: Projection,
    pub text_concept: Projection,
}

/// Tape handles of a batch embedded into the hybrid space.
#[derive(Clone, Copy, Debug)]
pub struct BatchVars {
    pub latent_video: Var,
    pub latent_text: Var,
    pub concept_video: Var,
    pub concept_text: Var,
}

impl DualEncoding {
    /// Registers and initializes every parameter in a fresh store.
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let enc = &config.encoder;
        let space = &config.space;
        let video = VideoEncoder::new(&mut store, enc, rng);
        let text = TextEncoder::new(&mut store, enc, rng);
        let (dv, ds) = (enc.video_dim(), enc.text_dim());
        let video_latent = Projection::new(&mut store, "video.latent", dv, space.latent_dim, space, rng);
        let text_latent = Projection::new(&mut store, "text.latent", ds, space.latent_dim, space, rng);
        let video_concept = Projection::new(&mut store, "video.concept", dv, space.concept_dim, space, rng);
        let text_concept = Projection::new(&mut store, "text.concept", ds, space.concept_dim, space, rng);
        let model = DualEncoding {
            config,
            video,
            text,
            video_latent,
            text_latent,
            video_concept,
            text_concept,
        };
        Ok((model, store))
    }

    /// `B × dim` multi-level encodings of a batch of videos.
    pub fn encode_videos(&self, s: &mut Session<'_>, videos: &[&FrameFeatureSequence]) -> Result<Var> {
        let rows = videos
            .iter()
            .map(|v| Ok(self.video.forward(s, v)?.concat))
            .collect::<Result<Vec<_>>>()?;
        s.tape.stack_rows(&rows)
    }

    /// `B × dim` multi-level encodings of a batch of sentences.
    pub fn encode_texts(&self, s: &mut Session<'_>, texts: &[&TokenSequence]) -> Result<Var> {
        let rows = texts
            .iter()
            .map(|t| Ok(self.text.forward(s, t)?.concat))
            .collect::<Result<Vec<_>>>()?;
        s.tape.stack_rows(&rows)
    }

    pub fn embed_batch(
        &self,
        s: &mut Session<'_>,
        videos: &[&FrameFeatureSequence],
        texts: &[&TokenSequence],
    ) -> Result<BatchVars> {
        if videos.len() != texts.len() {
            return Err(Error::shape("embed_batch", &[videos.len()], &[texts.len()]));
        }
        let phi_v = self.encode_videos(s, videos)?;
        let phi_s = self.encode_texts(s, texts)?;
        Ok(BatchVars {
            latent_video: project_latent(s, &self.video_latent, phi_v)?,
            latent_text: project_latent(s, &self.text_latent, phi_s)?,
            concept_video: project_concept(s, &self.video_concept, phi_v)?,
            concept_text: project_concept(s, &self.text_concept, phi_s)?,
        })
    }

    /// Joint objective over a batch of relevant pairs with per-pair soft
    /// concept labels (`B × K`).
    pub fn batch_loss(
        &self,
        s: &mut Session<'_>,
        videos: &[&FrameFeatureSequence],
        texts: &[&TokenSequence],
        labels: Arc<Tensor>,
        loss: &LossConfig,
    ) -> Result<JointLossVars> {
        let b = self.embed_batch(s, videos, texts)?;
        joint_loss_vars(&mut s.tape, b.latent_video, b.latent_text, b.concept_video, b.concept_text, labels, loss)
    }

    /// Hybrid-space embedding of one video with frozen parameters.
    pub fn embed_video(&self, store: &ParamStore, video: &FrameFeatureSequence) -> Result<HybridEmbedding> {
        let mut s = Session::new(store, Mode::Eval);
        let encoding = self.encode_videos(&mut s, &[video])?;
        let latent = project_latent(&mut s, &self.video_latent, encoding)?;
        let concept = project_concept(&mut s, &self.video_concept, encoding)?;
        Ok(HybridEmbedding {
            latent: s.value(latent).data().to_vec(),
            concept: s.value(concept).data().to_vec(),
        })
    }

    /// Hybrid-space embedding of one sentence with frozen parameters.
    pub fn embed_text(&self, store: &ParamStore, text: &TokenSequence) -> Result<HybridEmbedding> {
        let mut s = Session::new(store, Mode::Eval);
        let encoding = self.encode_texts(&mut s, &[text])?;
        let latent = project_latent(&mut s, &self.text_latent, encoding)?;
        let concept = project_concept(&mut s, &self.text_concept, encoding)?;
        Ok(HybridEmbedding {
            latent: s.value(latent).data().to_vec(),
            concept: s.value(concept).data().to_vec(),
        })
    }

    /// Index of video embeddings, in input order. Videos are encoded in
    /// parallel; each embedding depends only on its own video.
    pub fn index_videos(&self, store: &ParamStore, videos: &[FrameFeatureSequence], alpha: f64) -> Result<EmbeddingIndex> {
        let embs = videos
            .par_iter()
            .map(|v| self.embed_video(store, v))
            .collect::<Result<Vec<_>>>()?;
        let sp = &self.config.space;
        let mut idx = EmbeddingIndex::with_capacity(sp.latent_dim, sp.concept_dim, alpha, videos.len())?;
        for (v, e) in videos.iter().zip(&embs) {
            idx.push(v.video_id.clone(), e)?;
        }
        Ok(idx)
    }

    /// Index of sentence embeddings keyed by sentence id.
    pub fn index_texts(&self, store: &ParamStore, texts: &[TokenSequence], alpha: f64) -> Result<EmbeddingIndex> {
        let embs = texts
            .par_iter()
            .map(|t| self.embed_text(store, t))
            .collect::<Result<Vec<_>>>()?;
        let sp = &self.config.space;
        let mut idx = EmbeddingIndex::with_capacity(sp.latent_dim, sp.concept_dim, alpha, texts.len())?;
        for (t, e) in texts.iter().zip(&embs) {
            idx.push(t.sentence_id.clone(), e)?;
        }
        Ok(idx)
    }
}
