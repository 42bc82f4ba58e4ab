//! Latent and concept subspaces: projection heads, similarities, losses and
//! similarity fusion.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{
    affine, batchnorm, init_uniform, BatchNormParams, ParamId, ParamStore, Session, Tape, Tensor,
    Var,
};

/// Sizes of the two subspaces.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceConfig {
    pub latent_dim: usize,
    /// Number of concepts `K`.
    pub concept_dim: usize,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        SpaceConfig {
            latent_dim: 1536,
            concept_dim: 512,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}

impl SpaceConfig {
    pub fn hybrid_dim(&self) -> usize {
        self.latent_dim + self.concept_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.concept_dim == 0 {
            return Err(Error::invalid("latent_dim and concept_dim must be positive"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) || !(self.bn_eps > 0.0) {
            return Err(Error::invalid("bn_momentum must be in (0, 1] and bn_eps positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    /// Weight of the latent similarity in the fused score.
    pub alpha: f64,
    pub bce_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            margin: 0.2,
            alpha: 0.6,
            bce_eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin >= 0.0) {
            return Err(Error::invalid("margin must be non-negative"));
        }
        check_alpha(self.alpha)?;
        if !(self.bce_eps > 0.0 && self.bce_eps < 0.5) {
            return Err(Error::invalid("bce_eps must be in (0, 0.5)"));
        }
        Ok(())
    }
}

pub(crate) fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::invalid(format!("alpha must be in [0, 1], got {alpha}")))
    }
}

/// A point in the hybrid space: a latent vector and concept probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct HybridEmbedding {
    pub latent: Vec<f64>,
    pub concept: Vec<f64>,
}

/// Fully connected layer followed by batch normalization.
#[derive(Clone, Debug)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
    pub bn: BatchNormParams,
}

impl Projection {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        output_dim: usize,
        space: &SpaceConfig,
        rng: &mut impl Rng,
    ) -> Self {
        Projection {
            weight: store.add(
                format!("{prefix}.weight"),
                init_uniform(rng, &[output_dim, input_dim], input_dim),
                true,
            ),
            bias: store.add(
                format!("{prefix}.bias"),
                init_uniform(rng, &[output_dim], input_dim),
                true,
            ),
            bn: BatchNormParams::new(store, &format!("{prefix}.bn"), output_dim, space.bn_momentum, space.bn_eps),
        }
    }
}

/// `BN(W x + b)` over a `B × dim` batch of encodings.
pub fn project_latent(s: &mut Session<'_>, head: &Projection, encoding: Var) -> Result<Var> {
    let (w, b) = (s.param(head.weight), s.param(head.bias));
    let pre = affine(&mut s.tape, encoding, w, b)?;
    batchnorm(s, &head.bn, pre)
}

/// `σ(BN(W x + b))` over a `B × dim` batch of encodings.
pub fn project_concept(s: &mut Session<'_>, head: &Projection, encoding: Var) -> Result<Var> {
    let logits = project_latent(s, head, encoding)?;
    Ok(s.tape.sigmoid(logits))
}

/// Cosine similarity of two vectors. Zero vectors are rejected.
pub fn sim_latent(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("sim_latent", &[a.len()], &[b.len()]));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::invalid("cosine similarity of a zero vector is undefined"));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Generalized Jaccard similarity `Σ min / Σ max` of non-negative vectors;
/// 0 when both are all-zero.
pub fn sim_concept(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("sim_concept", &[a.len()], &[b.len()]));
    }
    if a.iter().chain(b).any(|&v| v < 0.0) {
        return Err(Error::invalid("generalized Jaccard needs non-negative entries"));
    }
    let (num, den) = a
        .iter()
        .zip(b)
        .fold((0.0, 0.0), |(n, d), (&x, &y)| (n + x.min(y), d + x.max(y)));
    Ok(if den == 0.0 { 0.0 } else { num / den })
}

/// `B1 × B2` cosine similarities between the rows of two matrices.
pub fn cosine_matrix(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let an = tape.l2_normalize_rows(a)?;
    let bn = tape.l2_normalize_rows(b)?;
    tape.matmul_nt(an, bn)
}

/// `B1 × B2` generalized Jaccard similarities between the rows of two
/// matrices.
pub fn jaccard_matrix(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    tape.jaccard(a, b)
}

/// Hardest-negative triplet ranking loss over a `B × B` similarity matrix,
/// `S[i][j] = sim(video_i, sentence_j)`, summed over the batch.
pub fn triplet_loss_hardest(sim: &Tensor, margin: f64) -> Result<f64> {
    let mut t = Tape::new();
    let s = t.leaf(sim.clone());
    let l = t.triplet_hardest(s, margin)?;
    Ok(t.value(l).item())
}

/// Binary cross-entropy of both concept predictions against the shared
/// soft labels `y`, each averaged over the `K` concepts.
pub fn bce_concept_loss(concept_video: &[f64], concept_text: &[f64], y: &[f64], eps: f64) -> Result<f64> {
    let k = y.len();
    if concept_video.len() != k || concept_text.len() != k {
        return Err(Error::shape("bce_concept_loss", &[concept_video.len(), concept_text.len()], &[k]));
    }
    if k == 0 {
        return Err(Error::Empty("bce_concept_loss"));
    }
    let targets = Arc::new(Tensor::matrix(1, k, y.to_vec())?);
    let mut t = Tape::new();
    let vid_con = t.leaf(Tensor::matrix(1, k, concept_video.to_vec())?);
    let txt_con = t.leaf(Tensor::matrix(1, k, concept_text.to_vec())?);
    let lv = t.bce(vid_con, Arc::clone(&targets), eps)?;
    let ls = t.bce(txt_con, targets, eps)?;
    let total = t.add(lv, ls)?;
    Ok(t.value(total).item())
}

/// Tape handles of the joint objective's terms.
#[derive(Clone, Copy, Debug)]
pub struct JointLossVars {
    pub latent_rank: Var,
    pub concept_rank: Var,
    pub bce: Var,
    pub total: Var,
}

/// Concept-space loss: BCE on both sides plus the triplet loss over Jaccard
/// similarities. Returns `(bce, concept_rank)`.
pub fn concept_space_loss_vars(
    tape: &mut Tape,
    concept_video: Var,
    concept_text: Var,
    labels: Arc<Tensor>,
    cfg: &LossConfig,
) -> Result<(Var, Var)> {
    let bv = tape.bce(concept_video, Arc::clone(&labels), cfg.bce_eps)?;
    let bs = tape.bce(concept_text, labels, cfg.bce_eps)?;
    let bce = tape.add(bv, bs)?;
    let sim = jaccard_matrix(tape, concept_video, concept_text)?;
    let rank = tape.triplet_hardest(sim, cfg.margin)?;
    Ok((bce, rank))
}

/// Joint objective over a batch of `B` relevant pairs: latent triplet loss
/// plus concept-space loss, summed over the batch. Row `i` of every input
/// belongs to pair `i`.
pub fn joint_loss_vars(
    tape: &mut Tape,
    latent_video: Var,
    latent_text: Var,
    concept_video: Var,
    concept_text: Var,
    labels: Arc<Tensor>,
    cfg: &LossConfig,
) -> Result<JointLossVars> {
    let lat_sim = cosine_matrix(tape, latent_video, latent_text)?;
    let latent_rank = tape.triplet_hardest(lat_sim, cfg.margin)?;
    let (bce, concept_rank) = concept_space_loss_vars(tape, concept_video, concept_text, labels, cfg)?;
    let con = tape.add(bce, concept_rank)?;
    let total = tape.add(latent_rank, con)?;
    Ok(JointLossVars {
        latent_rank,
        concept_rank,
        bce,
        total,
    })
}

/// Concept-space loss for a batch of concept vectors (`B × K` each).
pub fn concept_space_loss(concept_video: &Tensor, concept_text: &Tensor, labels: &Tensor, cfg: &LossConfig) -> Result<f64> {
    let mut t = Tape::new();
    let vid_con = t.leaf(concept_video.clone());
    let txt_con = t.leaf(concept_text.clone());
    let (bce, rank) = concept_space_loss_vars(&mut t, vid_con, txt_con, Arc::new(labels.clone()), cfg)?;
    Ok(t.value(bce).item() + t.value(rank).item())
}

/// Hybrid-space embeddings of a batch of relevant pairs, row-aligned.
#[derive(Clone, Debug)]
pub struct HybridBatch {
    pub latent_video: Tensor,
    pub latent_text: Tensor,
    pub concept_video: Tensor,
    pub concept_text: Tensor,
    pub labels: Option<Tensor>,
}

/// Values of the joint objective's terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JointLoss {
    pub latent_rank: f64,
    pub concept_rank: f64,
    pub bce: f64,
    pub total: f64,
}

pub fn joint_loss(batch: &HybridBatch, cfg: &LossConfig) -> Result<JointLoss> {
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("joint loss needs concept labels for every pair"))?;
    let mut t = Tape::new();
    let vid_lat = t.leaf(batch.latent_video.clone());
    let txt_lat = t.leaf(batch.latent_text.clone());
    let vid_con = t.leaf(batch.concept_video.clone());
    let txt_con = t.leaf(batch.concept_text.clone());
    let v = joint_loss_vars(&mut t, vid_lat, txt_lat, vid_con, txt_con, Arc::new(labels.clone()), cfg)?;
    Ok(JointLoss {
        latent_rank: t.value(v.latent_rank).item(),
        concept_rank: t.value(v.concept_rank).item(),
        bce: t.value(v.bce).item(),
        total: t.value(v.total).item(),
    })
}

/// Min-max normalization to `[0, 1]`; a constant list maps to all zeros.
pub fn min_max_normalize(scores: &[f64]) -> Vec<f64> {
    let (lo, hi) = scores
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    if !(range > 0.0) {
        return vec![0.0; scores.len()];
    }
    scores.iter().map(|v| (v - lo) / range).collect()
}

/// `α · norm(lat) + (1 − α) · norm(con)` per candidate, each list min-max
/// normalized over the candidate set first.
pub fn fuse_similarities(lat: &[f64], con: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if lat.is_empty() {
        return Err(Error::Empty("fuse_similarities"));
    }
    if lat.len() != con.len() {
        return Err(Error::shape("fuse_similarities", &[lat.len()], &[con.len()]));
    }
    check_alpha(alpha)?;
    let (nl, nc) = (min_max_normalize(lat), min_max_normalize(con));
    Ok(nl
        .iter()
        .zip(&nc)
        .map(|(l, c)| alpha * l + (1.0 - alpha) * c)
        .collect())
}
