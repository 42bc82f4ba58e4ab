use std::collections::HashSet;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoders::{FrameFeatureSequence, TokenSequence};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// One caption and the position of the video it describes.
#[derive(Clone, Debug, PartialEq)]
pub struct Caption {
    pub video: usize,
    pub tokens: TokenSequence,
}

/// Videos, their captions, and one soft concept label vector per video.
///
/// Every caption is a training pair with its video; the pair's target is
/// the video's label vector.
#[derive(Clone, Debug)]
pub struct TrainingDataset {
    videos: Vec<FrameFeatureSequence>,
    captions: Vec<Caption>,
    labels: Vec<Vec<f64>>,
}

impl TrainingDataset {
    pub fn new(videos: Vec<FrameFeatureSequence>, captions: Vec<Caption>, labels: Vec<Vec<f64>>) -> Result<Self> {
        if videos.is_empty() {
            return Err(Error::Empty("video set"));
        }
        if labels.len() != videos.len() {
            return Err(Error::shape("concept labels", &[labels.len()], &[videos.len()]));
        }
        let k = labels[0].len();
        if k == 0 || labels.iter().any(|y| y.len() != k) {
            return Err(Error::invalid("label vectors must share one positive length"));
        }
        if labels.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("concept labels must lie in [0, 1]"));
        }
        let mut ids = HashSet::new();
        if let Some(v) = videos.iter().find(|v| !ids.insert(v.video_id.as_str())) {
            return Err(Error::invalid(format!("duplicate video id `{}`", v.video_id)));
        }
        let mut cap_ids = HashSet::new();
        if let Some(c) = captions.iter().find(|c| !cap_ids.insert(c.tokens.sentence_id.as_str())) {
            return Err(Error::invalid(format!("duplicate caption id `{}`", c.tokens.sentence_id)));
        }
        let mut has_caption = vec![false; videos.len()];
        for c in &captions {
            match has_caption.get_mut(c.video) {
                Some(flag) => *flag = true,
                None => {
                    return Err(Error::invalid(format!(
                        "caption `{}` references video {} of {}",
                        c.tokens.sentence_id,
                        c.video,
                        videos.len()
                    )))
                }
            }
        }
        let bare: Vec<String> = videos
            .iter()
            .zip(&has_caption)
            .filter(|(_, &has)| !has)
            .map(|(v, _)| v.video_id.clone())
            .collect();
        if !bare.is_empty() {
            return Err(Error::UnknownIds {
                what: "videos without captions",
                ids: bare,
            });
        }
        Ok(TrainingDataset {
            videos,
            captions,
            labels,
        })
    }

    pub fn videos(&self) -> &[FrameFeatureSequence] {
        &self.videos
    }

    pub fn captions(&self) -> &[Caption] {
        &self.captions
    }

    pub fn labels(&self) -> &[Vec<f64>] {
        &self.labels
    }

    pub fn num_concepts(&self) -> usize {
        self.labels[0].len()
    }

    /// Number of (video, caption) pairs, i.e. of captions.
    pub fn num_pairs(&self) -> usize {
        self.captions.len()
    }

    /// Captions of video `v`, by caption position.
    pub fn captions_of(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.captions
            .iter()
            .enumerate()
            .filter(move |(_, c)| c.video == v)
            .map(|(i, _)| i)
    }

    pub fn batch_inputs(&self, batch: &Batch) -> Result<BatchInputs<'_>> {
        let mut videos = Vec::with_capacity(batch.len());
        let mut texts = Vec::with_capacity(batch.len());
        let mut rows = Vec::with_capacity(batch.len() * self.num_concepts());
        for &c in &batch.captions {
            let cap = self
                .captions
                .get(c)
                .ok_or_else(|| Error::invalid(format!("batch references caption {c}")))?;
            videos.push(&self.videos[cap.video]);
            texts.push(&cap.tokens);
            rows.extend_from_slice(&self.labels[cap.video]);
        }
        let labels = Tensor::matrix(batch.len(), self.num_concepts(), rows)?;
        Ok(BatchInputs {
            videos,
            texts,
            labels: Arc::new(labels),
        })
    }
}

/// Caption positions of one mini-batch; their videos are pairwise distinct.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub captions: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.captions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.captions.is_empty()
    }
}

/// Row-aligned model inputs of a batch.
pub struct BatchInputs<'a> {
    pub videos: Vec<&'a FrameFeatureSequence>,
    pub texts: Vec<&'a TokenSequence>,
    pub labels: Arc<Tensor>,
}

/// Shuffles all pairs and packs them greedily into batches of at most
/// `batch_size` pairs with distinct videos.
///
/// Each pass over the pending pairs fills one batch and defers pairs whose
/// video is already in it. A final batch with a single pair is dropped,
/// since hardest-negative mining needs a second pair.
pub fn make_batches(data: &TrainingDataset, batch_size: usize, seed: u64) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::invalid(format!("batch_size must be at least 2, got {batch_size}")));
    }
    let mut pending: Vec<usize> = (0..data.num_pairs()).collect();
    pending.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches = Vec::new();
    let mut in_batch = vec![false; data.videos.len()];
    while !pending.is_empty() {
        let mut batch = Vec::with_capacity(batch_size);
        let mut deferred = Vec::new();
        for c in pending {
            let v = data.captions[c].video;
            if batch.len() < batch_size && !in_batch[v] {
                in_batch[v] = true;
                batch.push(c);
            } else {
                deferred.push(c);
            }
        }
        for &c in &batch {
            in_batch[data.captions[c].video] = false;
        }
        if batch.len() < 2 {
            if !deferred.is_empty() || !batch.is_empty() {
                log::debug!("dropping {} pair(s) of a single video", batch.len() + deferred.len());
            }
            break;
        }
        batches.push(Batch { captions: batch });
        pending = deferred;
    }
    Ok(batches)
}
