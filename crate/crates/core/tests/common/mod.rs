//! Shared helpers for the integration tests: scalar-loop reference
//! implementations, random inputs and the bundled toy dataset.
#![allow(dead_code)]

use std::path::PathBuf;

use dualenc::config::RunConfig;
use dualenc::data::{load_training_data, TrainingData};
use dualenc::hybridspace::HybridEmbedding;
use dualenc::numcore::{Conv1dParams, GruParams, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

pub fn matrix(rng: &mut impl Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Vec<Vec<f64>> {
    (0..rows).map(|_| uniform(rng, cols, lo, hi)).collect()
}

pub fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

pub fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

/// `‖a − b‖∞ / ‖b‖∞`, with `b` the reference.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|y| y.abs()).fold(0.0, f64::max);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.concat()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Weights of one GRU direction copied out of a store, row-major.
pub struct GruWeights {
    pub input: usize,
    pub hidden: usize,
    pub w: [Vec<f64>; 3],
    pub u: [Vec<f64>; 3],
    pub b: [Vec<f64>; 3],
}

impl GruWeights {
    pub fn from_store(store: &ParamStore, p: &GruParams) -> Self {
        let get = |ids: [dualenc::numcore::ParamId; 3]| ids.map(|id| store.get(id).data().to_vec());
        GruWeights {
            input: p.input_dim,
            hidden: p.hidden_dim,
            w: get(p.w),
            u: get(p.u),
            b: get(p.b),
        }
    }
}

pub fn gru_cell_ref(g: &GruWeights, x: &[f64], h: &[f64]) -> Vec<f64> {
    let (d, hd) = (g.input, g.hidden);
    let gate = |k: usize, i: usize, hv: &[f64]| {
        let mut acc = g.b[k][i];
        for j in 0..d {
            acc += g.w[k][i * d + j] * x[j];
        }
        for j in 0..hd {
            acc += g.u[k][i * hd + j] * hv[j];
        }
        acc
    };
    let z: Vec<f64> = (0..hd).map(|i| sigmoid(gate(0, i, h))).collect();
    let r: Vec<f64> = (0..hd).map(|i| sigmoid(gate(1, i, h))).collect();
    let rh: Vec<f64> = (0..hd).map(|i| r[i] * h[i]).collect();
    (0..hd)
        .map(|i| {
            let cand = gate(2, i, &rh).tanh();
            (1.0 - z[i]) * h[i] + z[i] * cand
        })
        .collect()
}

/// Row `t` is `[forward state after rows 0..=t, backward state after rows n−1..=t]`.
pub fn bigru_ref(fwd: &GruWeights, bwd: &GruWeights, seq: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = seq.len();
    let mut f = Vec::with_capacity(n);
    let mut h = vec![0.0; fwd.hidden];
    for x in seq {
        h = gru_cell_ref(fwd, x, &h);
        f.push(h.clone());
    }
    let mut b = vec![Vec::new(); n];
    let mut h = vec![0.0; bwd.hidden];
    for t in (0..n).rev() {
        h = gru_cell_ref(bwd, &seq[t], &h);
        b[t] = h.clone();
    }
    f.into_iter().zip(b).map(|(a, b)| [a, b].concat()).collect()
}

/// Same-length convolution (`⌊(k−1)/2⌋` zero rows on the left), ReLU, max
/// over time. `weight` is `filters × k × D` row-major.
pub fn conv_relu_max_ref(weight: &[f64], bias: &[f64], k: usize, input: &[Vec<f64>]) -> Vec<f64> {
    conv_ref(weight, bias, k, input)
        .iter()
        .fold(vec![f64::NEG_INFINITY; bias.len()], |acc, row| {
            acc.iter().zip(row).map(|(a, v)| a.max(v.max(0.0))).collect()
        })
}

pub fn conv_ref(weight: &[f64], bias: &[f64], k: usize, input: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = input.len();
    let d = input[0].len();
    let left = (k - 1) / 2;
    let mut out = vec![vec![0.0; bias.len()]; n];
    for (t, row) in out.iter_mut().enumerate() {
        for (f, o) in row.iter_mut().enumerate() {
            let mut acc = bias[f];
            for j in 0..k {
                let src = t as isize + j as isize - left as isize;
                if src < 0 || src >= n as isize {
                    continue;
                }
                for c in 0..d {
                    acc += weight[(f * k + j) * d + c] * input[src as usize][c];
                }
            }
            *o = acc;
        }
    }
    out
}

pub fn conv_weights(store: &ParamStore, p: &Conv1dParams) -> (Vec<f64>, Vec<f64>) {
    (store.get(p.weight).data().to_vec(), store.get(p.bias).data().to_vec())
}

/// Train-mode batch normalization; returns the output, the batch mean and
/// the unbiased batch variance.
pub fn batchnorm_train_ref(
    x: &[Vec<f64>],
    gamma: &[f64],
    beta: &[f64],
    eps: f64,
) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let b = x.len() as f64;
    let d = gamma.len();
    let mut mean = vec![0.0; d];
    let mut var = vec![0.0; d];
    let mut unbiased = vec![0.0; d];
    for c in 0..d {
        mean[c] = x.iter().map(|r| r[c]).sum::<f64>() / b;
        let ss: f64 = x.iter().map(|r| (r[c] - mean[c]).powi(2)).sum();
        var[c] = ss / b;
        unbiased[c] = ss / (b - 1.0);
    }
    (batchnorm_eval_ref(x, gamma, beta, &mean, &var, eps), mean, unbiased)
}

pub fn batchnorm_eval_ref(
    x: &[Vec<f64>],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<Vec<f64>> {
    x.iter()
        .map(|r| {
            (0..gamma.len())
                .map(|c| (r[c] - mean[c]) / (var[c] + eps).sqrt() * gamma[c] + beta[c])
                .collect()
        })
        .collect()
}

pub fn jaccard_ref(a: &[f64], b: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..a.len() {
        num += a[i].min(b[i]);
        den += a[i].max(b[i]);
    }
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Rows summed, labels averaged.
pub fn bce_ref(g: &[Vec<f64>], y: &[Vec<f64>], eps: f64) -> f64 {
    let mut total = 0.0;
    for (gr, yr) in g.iter().zip(y) {
        let mut row = 0.0;
        for (&p, &t) in gr.iter().zip(yr) {
            let p = p.clamp(eps, 1.0 - eps);
            row -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        total += row / gr.len() as f64;
    }
    total
}

/// Hardest-negative triplet loss by exhaustive search; `s[i][j]` pairs
/// video `i` with sentence `j`.
pub fn triplet_ref(s: &[Vec<f64>], margin: f64) -> f64 {
    let b = s.len();
    let mut total = 0.0;
    for i in 0..b {
        let mut worst_sentence = f64::NEG_INFINITY;
        let mut worst_video = f64::NEG_INFINITY;
        for j in 0..b {
            if j != i {
                worst_sentence = worst_sentence.max(s[i][j]);
                worst_video = worst_video.max(s[j][i]);
            }
        }
        total += (margin + worst_sentence - s[i][i]).max(0.0);
        total += (margin + worst_video - s[i][i]).max(0.0);
    }
    total
}

pub fn cosine_ref(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Indices sorted by score descending, then by id ascending.
pub fn argsort_desc(scores: &[f64], ids: &[String]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
    order
}

/// Fused scores of `query` against every row of `cands`, from scratch.
pub fn fused_ref(query: &HybridEmbedding, cands: &[HybridEmbedding], alpha: f64) -> Vec<f64> {
    // Stored vectors are single precision.
    let f32s = |v: &[f64]| v.iter().map(|&x| x as f32 as f64).collect::<Vec<_>>();
    let lat: Vec<f64> = cands.iter().map(|c| cosine_ref(&query.latent, &f32s(&c.latent))).collect();
    let con: Vec<f64> = cands.iter().map(|c| jaccard_ref(&query.concept, &f32s(&c.concept))).collect();
    let norm = |v: &[f64]| {
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        v.iter().map(|&x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 }).collect::<Vec<_>>()
    };
    let (nl, nc) = (norm(&lat), norm(&con));
    (0..cands.len()).map(|i| alpha * nl[i] + (1.0 - alpha) * nc[i]).collect()
}

pub fn toy_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join("toy")
}

pub fn toy_config() -> RunConfig {
    RunConfig::read(&toy_dir().join("toy.conf")).unwrap()
}

pub fn toy_data(cfg: &RunConfig) -> TrainingData {
    load_training_data(cfg).unwrap()
}
