//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use clap::Parser;
use dualenc::cli::{Cli, Command as Sub};
use dualenc::conceptlab::{build_concept_vocab, extract_soft_labels, ConceptFilter, LemmaTable};
use dualenc::config::RunConfig;
use dualenc::data::sized_model;
use dualenc::encoders::{EncoderConfig, FrameFeatureSequence, TokenSequence};
use dualenc::evalkit::{average_precision, mean_ap, median_rank, rank_candidates, recall_at_k};
use dualenc::hybridspace::{bce_concept_loss, triplet_loss_hardest, HybridEmbedding, LossConfig, SpaceConfig};
use dualenc::index::EmbeddingIndex;
use dualenc::model::{DualEncoding, ModelConfig};
use dualenc::numcore::{
    affine, batchnorm, bigru, conv1d_relu_maxpool, grad_check, grad_check_params, gru_cell, BatchNormMode,
    BatchNormParams, Conv1dParams, GradCheckOptions, GradCheckReport, GruParams, Mode, ParamStore, Session, Tape,
    Tensor, Var,
};
use dualenc::trainer::{Checkpoint, Trainer};
use dualenc::Result as DResult;
use rand::Rng;

use common::*;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T>(r: DResult<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("1 gradient suite", gradient_suite),
        ("2 oracle equivalence", oracle_equivalence),
        ("3 overfit sanity", overfit_sanity),
        ("4 hand-value fixtures", hand_fixtures),
        ("5 fusion invariants", fusion_invariants),
        ("6 configuration defaults", configuration_defaults),
        ("7 determinism and resume", determinism),
        ("8 query latency", query_latency),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("acceptance: {failed} of 8 criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all 8 criteria passed");
}

// ---------------------------------------------------------------- 1

/// Fixed, non-uniform weights so that a weighted sum exercises every
/// output coordinate differently.
fn probe(t: &mut Tape, v: Var) -> DResult<Var> {
    let shape = t.value(v).shape().to_vec();
    let n = t.value(v).len();
    let w = Tensor::new(shape, (0..n).map(|i| (1.7 * i as f64 + 0.3).sin()).collect())?;
    let w = t.leaf(w);
    let p = t.mul(v, w)?;
    Ok(t.sum(p))
}

/// Uniform values bounded away from zero, so kinks at 0 stay far from
/// the finite-difference stencil.
fn away_from_zero(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn mat(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, uniform(rng, r * c, -1.0, 1.0)).unwrap()
}

fn vect(rng: &mut impl Rng, n: usize) -> Tensor {
    Tensor::vector(uniform(rng, n, -1.0, 1.0)).unwrap()
}

const D: usize = 16;
const H: usize = 8;
const R: usize = 8;
const K: usize = 8;
const V: usize = 32;

fn toy_model_config() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            frame_dim: D,
            vocab_size: V,
            word_embed_dim: 8,
            gru_hidden: H,
            text_gru_hidden: H,
            conv_filters: R,
            video_kernels: vec![2, 3, 4, 5],
            text_kernels: vec![2, 3, 4],
            max_sentence_len: 64,
        },
        space: SpaceConfig {
            latent_dim: 16,
            concept_dim: K,
            ..SpaceConfig::default()
        },
    }
}

type Op = Box<dyn Fn(&mut Tape, &[Var]) -> DResult<Var>>;

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions::default();
    let mut g = rng(11);
    let mut reports: Vec<(String, GradCheckReport)> = Vec::new();

    let n = 5;
    let tape_ops: Vec<(&str, Op, Vec<Tensor>)> = vec![
        ("matmul", Box::new(|t, v| {
            let y = t.matmul_nt(v[0], v[1])?;
            probe(t, y)
        }), vec![mat(&mut g, n, D), mat(&mut g, R, D)]),
        ("add", Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            probe(t, y)
        }), vec![mat(&mut g, n, H), mat(&mut g, n, H)]),
        ("sub", Box::new(|t, v| {
            let y = t.sub(v[0], v[1])?;
            probe(t, y)
        }), vec![mat(&mut g, n, H), mat(&mut g, n, H)]),
        ("mul", Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            probe(t, y)
        }), vec![mat(&mut g, n, H), mat(&mut g, n, H)]),
        ("add_row", Box::new(|t, v| {
            let y = t.add_row(v[0], v[1])?;
            probe(t, y)
        }), vec![mat(&mut g, n, H), vect(&mut g, H)]),
        ("scale", Box::new(|t, v| {
            let y = t.scale(v[0], -2.5);
            probe(t, y)
        }), vec![mat(&mut g, n, H)]),
        ("sigmoid", Box::new(|t, v| {
            let y = t.sigmoid(v[0]);
            probe(t, y)
        }), vec![Tensor::matrix(n, H, uniform(&mut g, n * H, -4.0, 4.0)).unwrap()]),
        ("tanh", Box::new(|t, v| {
            let y = t.tanh(v[0]);
            probe(t, y)
        }), vec![Tensor::matrix(n, H, uniform(&mut g, n * H, -3.0, 3.0)).unwrap()]),
        ("relu", Box::new(|t, v| {
            let y = t.relu(v[0]);
            probe(t, y)
        }), vec![Tensor::matrix(n, H, away_from_zero(&mut g, n * H)).unwrap()]),
        ("reshape", Box::new(move |t, v| {
            let y = t.reshape(v[0], vec![H, n])?;
            probe(t, y)
        }), vec![mat(&mut g, n, H)]),
        ("row", Box::new(|t, v| {
            let y = t.row(v[0], 2)?;
            probe(t, y)
        }), vec![mat(&mut g, n, H)]),
        ("stack_rows", Box::new(|t, v| {
            let y = t.stack_rows(&[v[0], v[1], v[0]])?;
            probe(t, y)
        }), vec![vect(&mut g, H), vect(&mut g, H)]),
        ("concat_cols", Box::new(|t, v| {
            let y = t.concat_cols(&[v[0], v[1]])?;
            probe(t, y)
        }), vec![mat(&mut g, n, H), mat(&mut g, n, 3)]),
        ("mean_rows", Box::new(|t, v| {
            let y = t.mean_rows(v[0])?;
            probe(t, y)
        }), vec![mat(&mut g, n, H)]),
        ("max_rows", Box::new(|t, v| {
            let y = t.max_rows(v[0])?;
            probe(t, y)
        }), vec![mat(&mut g, n, H)]),
        ("sum", Box::new(|t, v| {
            let y = t.sigmoid(v[0]);
            Ok(t.sum(y))
        }), vec![mat(&mut g, n, H)]),
        ("conv1d", Box::new(|t, v| {
            let y = t.conv1d(v[0], v[1], v[2])?;
            probe(t, y)
        }), vec![mat(&mut g, n, 2 * H), Tensor::new(vec![R, 4, 2 * H], uniform(&mut g, R * 4 * 2 * H, -0.5, 0.5)).unwrap(), vect(&mut g, R)]),
        ("batch_norm train", Box::new(|t, v| {
            let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, BatchNormMode::Train)?;
            probe(t, y)
        }), vec![mat(&mut g, 4, K), vect(&mut g, K), vect(&mut g, K)]),
        ("batch_norm eval", Box::new(|t, v| {
            let mean = [0.1, -0.2, 0.3, 0.0, 0.5, -0.1, 0.2, 0.05];
            let var = [1.0, 0.5, 2.0, 0.3, 1.5, 0.9, 1.1, 0.7];
            let mode = BatchNormMode::Eval { running_mean: &mean, running_var: &var };
            let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5, mode)?;
            probe(t, y)
        }), vec![mat(&mut g, 4, K), vect(&mut g, K), vect(&mut g, K)]),
        ("gather", Box::new(|t, v| {
            let y = t.gather(v[0], &[3, 0, 3, 31, 7])?;
            probe(t, y)
        }), vec![mat(&mut g, V, 8)]),
        ("l2_normalize_rows", Box::new(|t, v| {
            let y = t.l2_normalize_rows(v[0])?;
            probe(t, y)
        }), vec![mat(&mut g, n, H)]),
        ("jaccard", Box::new(|t, v| {
            let y = t.jaccard(v[0], v[1])?;
            probe(t, y)
        }), vec![
            Tensor::matrix(3, K, uniform(&mut g, 3 * K, 0.05, 1.0)).unwrap(),
            Tensor::matrix(4, K, uniform(&mut g, 4 * K, 0.05, 1.0)).unwrap(),
        ]),
        ("triplet_hardest", Box::new(|t, v| t.triplet_hardest(v[0], 0.2)), vec![mat(&mut g, 5, 5)]),
        ("bce", {
            let y = Arc::new(Tensor::matrix(4, K, uniform(&mut g, 4 * K, 0.0, 1.0)).unwrap());
            Box::new(move |t, v| t.bce(v[0], y.clone(), 1e-7))
        }, vec![Tensor::matrix(4, K, uniform(&mut g, 4 * K, 0.05, 0.95)).unwrap()]),
    ];
    for (name, f, inputs) in tape_ops {
        reports.push((name.into(), ok(grad_check(f, &inputs, &opts))?));
    }

    // Layers, checked against their parameters and inputs together.
    let mut store = ParamStore::new();
    let fwd = GruParams::new(&mut store, "fwd", D, H, &mut g);
    let bwd = GruParams::new(&mut store, "bwd", D, H, &mut g);
    let conv = Conv1dParams::new(&mut store, "conv", 3, R, 2 * H, &mut g);
    let bn = BatchNormParams::new(&mut store, "bn", K, 0.1, 1e-5);
    let w = store.add("affine.w", mat(&mut g, K, D), true);
    let b = store.add("affine.b", vect(&mut g, K), true);
    let x = store.add("x", vect(&mut g, D), true);
    let h0 = store.add("h0", vect(&mut g, H), true);
    let seq = store.add("seq", mat(&mut g, n, D), true);
    let hmap = store.add("hmap", mat(&mut g, n, 2 * H), true);
    let batch = store.add("batch", mat(&mut g, 4, D), true);
    let layers: Vec<(&str, Vec<&str>, Box<dyn Fn(&mut Session<'_>) -> DResult<Var>>)> = vec![
        ("affine", vec!["affine", "batch"], Box::new(|s| {
            let (wv, bv, xv) = (s.param(w), s.param(b), s.param(batch));
            let y = affine(&mut s.tape, xv, wv, bv)?;
            probe(&mut s.tape, y)
        })),
        ("gru_cell", vec!["fwd", "x", "h0"], Box::new(|s| {
            let (xv, hv) = (s.param(x), s.param(h0));
            let y = gru_cell(s, &fwd, xv, hv)?;
            probe(&mut s.tape, y)
        })),
        ("bigru", vec!["fwd", "bwd", "seq"], Box::new(|s| {
            let sv = s.param(seq);
            let y = bigru(s, &fwd, &bwd, sv)?;
            probe(&mut s.tape, y)
        })),
        ("conv1d_relu_maxpool", vec!["conv", "hmap"], Box::new(|s| {
            let hv = s.param(hmap);
            let y = conv1d_relu_maxpool(s, &conv, hv)?;
            probe(&mut s.tape, y)
        })),
        ("batchnorm layer", vec!["bn", "affine", "batch"], Box::new(|s| {
            let (wv, bv, xv) = (s.param(w), s.param(b), s.param(batch));
            let y = affine(&mut s.tape, xv, wv, bv)?;
            let y = batchnorm(s, &bn, y)?;
            probe(&mut s.tape, y)
        })),
    ];
    for (name, keep, f) in layers {
        let only = trainable_subset(&store, &keep);
        reports.push((name.into(), ok(grad_check_params(&only, Mode::Train, f, &opts))?));
    }

    // Full joint loss of the toy-sized network over a batch of 4 pairs.
    let (model, mstore) = ok(DualEncoding::new(toy_model_config(), &mut g))?;
    let videos: Vec<FrameFeatureSequence> = (0..4)
        .map(|i| {
            let frames = g.gen_range(3..=6);
            FrameFeatureSequence::from_rows(format!("v{i}"), &matrix(&mut g, frames, D, -1.0, 1.0)).unwrap()
        })
        .collect();
    let texts: Vec<TokenSequence> = (0..4)
        .map(|i| {
            let len = g.gen_range(2..=6);
            TokenSequence::new(format!("s{i}"), (0..len).map(|_| g.gen_range(0..V)).collect())
        })
        .collect();
    let labels = Arc::new(Tensor::matrix(4, K, uniform(&mut g, 4 * K, 0.0, 1.0)).unwrap());
    let loss = LossConfig::default();
    let vrefs: Vec<&FrameFeatureSequence> = videos.iter().collect();
    let trefs: Vec<&TokenSequence> = texts.iter().collect();
    let joint = ok(grad_check_params(
        &mstore,
        Mode::Train,
        |s| Ok(model.batch_loss(s, &vrefs, &trefs, labels.clone(), &loss)?.total),
        &opts,
    ))?;
    reports.push(("joint loss".into(), joint));

    let elapsed = start.elapsed();
    let coords: usize = reports.iter().map(|(_, r)| r.coords_checked).sum();
    let (worst_name, worst) = reports
        .iter()
        .max_by(|a, b| a.1.max_rel_error.total_cmp(&b.1.max_rel_error))
        .unwrap();
    let failures: Vec<String> = reports
        .iter()
        .filter(|(_, r)| !r.passed)
        .map(|(n, r)| format!("{n} ({:.2e} at {:?})", r.max_rel_error, r.worst))
        .collect();
    ensure!(failures.is_empty(), "relative error above 1e-4 in: {}", failures.join(", "));
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:.1?}, limit 60 s");
    let joint = &reports.last().unwrap().1;
    Ok(format!(
        "{} checks, {coords} coordinates, worst {:.2e} ({worst_name}), joint loss {:.2e} over {} parameters",
        reports.len(),
        worst.max_rel_error,
        joint.max_rel_error,
        joint.coords_checked
    ))
}

/// Copy of `store` where only parameters whose names start with one of
/// `keep` are trainable.
fn trainable_subset(store: &ParamStore, keep: &[&str]) -> ParamStore {
    let mut out = ParamStore::new();
    for id in store.ids() {
        let name = store.name(id);
        let trainable = store.is_trainable(id) && keep.iter().any(|k| name.starts_with(k));
        out.add(name, store.get(id).clone(), trainable);
    }
    out
}

// ---------------------------------------------------------------- 2

const INSTANCES: usize = 100;
const ORACLE_TOL: f64 = 1e-10;

fn randomize(store: &mut ParamStore, rng: &mut impl Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let t = store.get(id);
        let fresh = Tensor::new(t.shape().to_vec(), uniform(rng, t.len(), -1.0, 1.0)).unwrap();
        store.set(id, fresh).unwrap();
    }
}

fn oracle_equivalence() -> Outcome {
    let mut g = rng(22);
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut track = |name: &'static str, err: f64| -> Result<(), String> {
        match worst.iter_mut().find(|(n, _)| *n == name) {
            Some(w) => w.1 = w.1.max(err),
            None => worst.push((name, err)),
        }
        ensure!(err < ORACLE_TOL, "{name}: relative error {err:.3e}");
        Ok(())
    };

    for _ in 0..INSTANCES {
        let (d, h, n) = (g.gen_range(1..=6), g.gen_range(1..=6), g.gen_range(1..=7));
        let mut store = ParamStore::new();
        let fwd = GruParams::new(&mut store, "f", d, h, &mut g);
        let bwd = GruParams::new(&mut store, "b", d, h, &mut g);
        randomize(&mut store, &mut g);
        let (fw, bw) = (GruWeights::from_store(&store, &fwd), GruWeights::from_store(&store, &bwd));

        let x = uniform(&mut g, d, -2.0, 2.0);
        let h0 = uniform(&mut g, h, -1.0, 1.0);
        let mut s = Session::new(&store, Mode::Eval);
        let xv = s.constant(Tensor::vector(x.clone()).unwrap());
        let hv = s.constant(Tensor::vector(h0.clone()).unwrap());
        let out = ok(gru_cell(&mut s, &fwd, xv, hv))?;
        track("gru_cell", rel_err(s.value(out).data(), &gru_cell_ref(&fw, &x, &h0)))?;

        let seq = matrix(&mut g, n, d, -2.0, 2.0);
        let sv = s.constant(tensor(&seq));
        let out = ok(bigru(&mut s, &fwd, &bwd, sv))?;
        track("bigru", rel_err(s.value(out).data(), &flat(&bigru_ref(&fw, &bw, &seq))))?;
    }

    for _ in 0..INSTANCES {
        let (k, r, d, n) = (g.gen_range(1..=5), g.gen_range(1..=4), g.gen_range(1..=5), g.gen_range(1..=7));
        let mut store = ParamStore::new();
        let conv = Conv1dParams::new(&mut store, "c", k, r, d, &mut g);
        randomize(&mut store, &mut g);
        let (w, b) = conv_weights(&store, &conv);
        let input = matrix(&mut g, n, d, -2.0, 2.0);
        let mut s = Session::new(&store, Mode::Eval);
        let iv = s.constant(tensor(&input));
        let (wv, bv) = (s.param(conv.weight), s.param(conv.bias));
        let raw = ok(s.tape.conv1d(iv, wv, bv))?;
        track("conv1d", rel_err(s.value(raw).data(), &flat(&conv_ref(&w, &b, k, &input))))?;
        let pooled = ok(conv1d_relu_maxpool(&mut s, &conv, iv))?;
        track("conv1d", rel_err(s.value(pooled).data(), &conv_relu_max_ref(&w, &b, k, &input)))?;
    }

    for _ in 0..INSTANCES {
        let (bsz, d) = (g.gen_range(2..=6), g.gen_range(1..=5));
        let eps = 1e-5;
        let x = matrix(&mut g, bsz, d, -3.0, 3.0);
        let gamma = uniform(&mut g, d, 0.5, 2.0);
        let beta = uniform(&mut g, d, -1.0, 1.0);
        let mut t = Tape::new();
        let (xv, gv, bv) = (
            t.leaf(tensor(&x)),
            t.leaf(Tensor::vector(gamma.clone()).unwrap()),
            t.leaf(Tensor::vector(beta.clone()).unwrap()),
        );
        let (out, stats) = ok(t.batch_norm(xv, gv, bv, eps, BatchNormMode::Train))?;
        let stats = stats.unwrap();
        let (want, mean, unbiased) = batchnorm_train_ref(&x, &gamma, &beta, eps);
        track("batchnorm", rel_err(t.value(out).data(), &flat(&want)))?;
        track("batchnorm", rel_err(&stats.mean, &mean))?;
        track("batchnorm", rel_err(&stats.var, &unbiased))?;
        let rm = uniform(&mut g, d, -1.0, 1.0);
        let rv = uniform(&mut g, d, 0.1, 2.0);
        let mode = BatchNormMode::Eval { running_mean: &rm, running_var: &rv };
        let (out, _) = ok(t.batch_norm(xv, gv, bv, eps, mode))?;
        track("batchnorm", rel_err(t.value(out).data(), &flat(&batchnorm_eval_ref(&x, &gamma, &beta, &rm, &rv, eps))))?;
    }

    for _ in 0..INSTANCES {
        let (m, n, k) = (g.gen_range(1..=5), g.gen_range(1..=5), g.gen_range(1..=8));
        let sparse = |g: &mut rand_chacha::ChaCha8Rng, rows: usize| -> Vec<Vec<f64>> {
            (0..rows)
                .map(|_| (0..k).map(|_| if g.gen_bool(0.3) { 0.0 } else { g.gen_range(0.0..1.0) }).collect())
                .collect()
        };
        let (a, b) = (sparse(&mut g, m), sparse(&mut g, n));
        let mut t = Tape::new();
        let (av, bv) = (t.leaf(tensor(&a)), t.leaf(tensor(&b)));
        let out = ok(t.jaccard(av, bv))?;
        let want: Vec<f64> = a.iter().flat_map(|ra| b.iter().map(move |rb| jaccard_ref(ra, rb))).collect();
        track("jaccard", rel_err(t.value(out).data(), &want))?;
    }

    for _ in 0..INSTANCES {
        let (bsz, k) = (g.gen_range(1..=5), g.gen_range(1..=8));
        let probs: Vec<Vec<f64>> = (0..bsz)
            .map(|_| {
                (0..k)
                    .map(|_| match g.gen_range(0..10) {
                        0 => 0.0,
                        1 => 1.0,
                        _ => g.gen_range(0.0..1.0),
                    })
                    .collect()
            })
            .collect();
        let y = matrix(&mut g, bsz, k, 0.0, 1.0);
        let mut t = Tape::new();
        let pv = t.leaf(tensor(&probs));
        let out = ok(t.bce(pv, Arc::new(tensor(&y)), 1e-7))?;
        track("bce", rel_err(&[t.value(out).item()], &[bce_ref(&probs, &y, 1e-7)]))?;
    }

    for _ in 0..INSTANCES {
        let bsz = g.gen_range(2..=8);
        let sim = matrix(&mut g, bsz, bsz, -1.0, 1.0);
        let margin = g.gen_range(0.0..0.5);
        let got = ok(triplet_loss_hardest(&tensor(&sim), margin))?;
        track("triplet", rel_err(&[got], &[triplet_ref(&sim, margin)]))?;
    }

    let summary: Vec<String> = worst.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    Ok(format!("{INSTANCES} instances per op; worst: {}", summary.join(", ")))
}

// ---------------------------------------------------------------- 3

fn overfit_sanity() -> Outcome {
    let start = Instant::now();
    let cfg = toy_config();
    let data = toy_data(&cfg);
    ensure!(
        data.train.videos().len() == 8 && data.train.num_pairs() == 16,
        "toy set has {} videos and {} pairs",
        data.train.videos().len(),
        data.train.num_pairs()
    );
    ensure!(cfg.loss == LossConfig::default(), "toy run must use the default loss settings");
    let mut train_cfg = cfg.train.clone();
    train_cfg.max_epochs = 200;
    let mut trainer = ok(Trainer::new(sized_model(&cfg, &data.vocab), cfg.loss.clone(), train_cfg))?;
    let mut reached = None;
    let train = &data.train;
    let _ = trainer.fit(train, &data.val, |rec, t| {
        let r1 = t.evaluate(train)?.t2v.r1;
        if r1 == 100.0 {
            reached = Some(rec.epoch);
            // Stop once the target is reached.
            return Err(dualenc::Error::InvalidArgument("reached".into()));
        }
        Ok(())
    });
    let elapsed = start.elapsed();
    let epoch = reached.ok_or("t2v R@1 never reached 100% within 200 epochs")?;
    ensure!(elapsed < Duration::from_secs(300), "took {elapsed:.1?}, limit 5 min");
    Ok(format!("t2v R@1 = 100% at epoch {epoch}"))
}

// ---------------------------------------------------------------- 4

fn hand_fixtures() -> Outcome {
    let s = Tensor::matrix(2, 2, vec![0.5, 0.6, 0.4, 0.7]).unwrap();
    let trip = ok(triplet_loss_hardest(&s, 0.2))?;
    ensure!((trip - 0.5).abs() < 1e-12, "triplet fixture gave {trip}");

    let bce = ok(bce_concept_loss(&[0.9, 0.1], &[0.8, 0.2], &[1.0, 0.0], 1e-7))?;
    ensure!((bce - 0.3285).abs() < 1e-4, "BCE fixture gave {bce}");

    let jac = dualenc::hybridspace::sim_concept(&[0.2, 0.8], &[0.4, 0.4]).map_err(|e| e.to_string())?;
    ensure!(jac == 0.5, "Jaccard fixture gave {jac}");

    let sentences: Vec<Vec<String>> = ["a dog runs", "a dog jumps", "dog and cat"]
        .iter()
        .map(|s| s.split(' ').map(str::to_owned).collect())
        .collect();
    let filter = ConceptFilter {
        lemmas: LemmaTable::from_iter([("runs", "run"), ("jumps", "jump")]),
        ..ConceptFilter::english()
    };
    let vocab = ok(build_concept_vocab(&sentences, 4, &filter))?;
    ensure!(vocab.len() == 4 && vocab.word(0) == "dog", "concepts {:?}", vocab.entries());
    let y = ok(extract_soft_labels("v", &sentences, &vocab, &filter))?.y;
    ensure!(y == vec![1.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], "soft labels {y:?}");

    let ranks = [1, 3, 12];
    let rk = |k| recall_at_k(&ranks, k).unwrap();
    let (r1, r5, r10) = (rk(1), rk(5), rk(10));
    ensure!(
        (r1 - 33.33).abs() < 0.01 && (r5 - 66.67).abs() < 0.01 && (r10 - 66.67).abs() < 0.01,
        "recalls ({r1}, {r5}, {r10})"
    );
    let med = ok(median_rank(&ranks))?;
    ensure!(med == 3, "median rank {med}");
    let lists: Vec<Vec<bool>> = ranks.iter().map(|&r| (1..=20).map(|i| i == r).collect()).collect();
    let map = ok(mean_ap(&lists))?;
    ensure!((map - 0.4722).abs() < 1e-4, "mAP {map}");
    ensure!(ok(average_precision(&lists[1]))? == 1.0 / 3.0, "AP of rank 3");
    Ok(format!("triplet {trip}, BCE {bce:.4}, Jaccard {jac}, labels {y:?}, R@1/5/10 {r1:.2}/{r5:.2}/{r10:.2}, Med r {med}, mAP {map:.4}"))
}

// ---------------------------------------------------------------- 5

fn random_index(g: &mut impl Rng, n: usize, dl: usize, dc: usize) -> EmbeddingIndex {
    let mut idx = EmbeddingIndex::with_capacity(dl, dc, 0.6, n).unwrap();
    for i in 0..n {
        let lat: Vec<f32> = (0..dl).map(|_| g.gen_range(-1.0..1.0)).collect();
        let con: Vec<f32> = (0..dc).map(|_| g.gen_range(0.0..1.0)).collect();
        idx.push_f32(format!("c{i:05}"), &lat, &con).unwrap();
    }
    idx
}

fn fusion_invariants() -> Outcome {
    let mut g = rng(55);
    let (dl, dc) = (24, 12);
    for inst in 0..50 {
        let idx = random_index(&mut g, 100, dl, dc);
        let q = HybridEmbedding {
            latent: uniform(&mut g, dl, -1.0, 1.0),
            concept: uniform(&mut g, dc, 0.0, 1.0),
        };
        let as64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
        let lat: Vec<f64> = (0..100).map(|i| cosine_ref(&q.latent, &as64(idx.latent(i)))).collect();
        let con: Vec<f64> = (0..100).map(|i| jaccard_ref(&q.concept, &as64(idx.concept(i)))).collect();
        for (alpha, raw, what) in [(1.0, &lat, "latent"), (0.0, &con, "concept")] {
            let got: Vec<usize> = ok(rank_candidates("q", &q, &idx, alpha))?.ranked.iter().map(|c| c.index).collect();
            let want = argsort_desc(raw, idx.ids());
            ensure!(got == want, "instance {inst}: alpha={alpha} order differs from the {what} ranking");
        }
    }
    let alpha = LossConfig::default().alpha;
    ensure!(alpha == 0.6, "default alpha {alpha}");
    let cli = Cli::try_parse_from(["dualenc", "search", "--index", "i", "--checkpoint", "c", "--query", "q"])
        .map_err(|e| e.to_string())?;
    match cli.command {
        Sub::Search(a) => ensure!(a.alpha == 0.6, "search default alpha {}", a.alpha),
        _ => return Err("parsed the wrong subcommand".into()),
    }
    let cli = Cli::try_parse_from(["dualenc", "eval", "--index", "i", "--checkpoint", "c", "--captions", "q"])
        .map_err(|e| e.to_string())?;
    match cli.command {
        Sub::Eval(a) => ensure!(a.alpha == 0.6, "eval default alpha {}", a.alpha),
        _ => return Err("parsed the wrong subcommand".into()),
    }
    Ok("50 instances x 100 candidates match at alpha 1 and 0; default alpha 0.6".into())
}

// ---------------------------------------------------------------- 6

fn configuration_defaults() -> Outcome {
    let c = RunConfig::default();
    let e = &c.model.encoder;
    let sp = &c.model.space;
    let checks: [(&str, bool); 12] = [
        ("margin 0.2", c.loss.margin == 0.2),
        ("batch size 128", c.train.batch_size == 128),
        ("learning rate 1e-4", c.train.learning_rate == 1e-4),
        ("halving patience 3", c.train.lr_decay_patience == 3 && c.train.lr_decay_factor == 0.5),
        ("early stop 10", c.train.early_stop_patience == 10),
        ("max epochs 50", c.train.max_epochs == 50),
        ("latent 1536", sp.latent_dim == 1536),
        ("concepts 512", sp.concept_dim == 512 && sp.hybrid_dim() == 2048),
        ("GRU hidden 512", e.gru_hidden == 512 && e.text_gru_hidden == 512),
        ("video kernels 2,3,4,5", e.video_kernels == [2, 3, 4, 5]),
        ("text kernels 2,3,4", e.text_kernels == [2, 3, 4]),
        ("alpha 0.6", c.loss.alpha == 0.6),
    ];
    let bad: Vec<&str> = checks.iter().filter(|(_, ok)| !ok).map(|(n, _)| *n).collect();
    ensure!(bad.is_empty(), "wrong defaults: {}", bad.join(", "));
    let back = RunConfig::parse(&c.hyperparameters_text(), "defaults").map_err(|e| e.to_string())?;
    ensure!(back == c, "defaults do not survive a text round trip");
    Ok(format!("{} defaults checked", checks.len()))
}

// ---------------------------------------------------------------- 7

fn train_cli(conf: &Path, out: &Path, extra: &[&str]) -> Result<String, String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dualenc"));
    cmd.arg("train").arg("--config").arg(conf).arg("--out").arg(out).args(extra);
    let o = cmd.output().map_err(|e| e.to_string())?;
    ensure!(o.status.success(), "train failed: {}", String::from_utf8_lossy(&o.stderr));
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn read(p: &Path) -> Result<Vec<u8>, String> {
    std::fs::read(p).map_err(|e| format!("{}: {e}", p.display()))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let conf = toy_dir().join("toy.conf");
    let p = |name: &str| dir.path().join(name);

    let out_a = train_cli(&conf, &p("a.ckpt"), &[])?;
    let out_b = train_cli(&conf, &p("b.ckpt"), &[])?;
    ensure!(out_a == out_b, "stdout of two identical runs differs");
    for suffix in ["", ".last", ".log"] {
        let (a, b) = (read(&p(&format!("a.ckpt{suffix}")))?, read(&p(&format!("b.ckpt{suffix}")))?);
        ensure!(a == b, "a.ckpt{suffix} and b.ckpt{suffix} differ");
    }
    let epochs = out_a.lines().count() - 1;

    let bytes = read(&p("a.ckpt.last"))?;
    let back = ok(Checkpoint::from_bytes(&bytes))?;
    ensure!(back.to_bytes() == bytes, "load/save round trip changed the checkpoint");
    let saved = p("round.ckpt");
    ok(back.save(&saved))?;
    ensure!(read(&saved)? == bytes, "saved copy differs from the original");

    // Interrupted run: stop halfway, then resume from the last checkpoint.
    let half = epochs / 2;
    train_cli(&conf, &p("c.ckpt"), &["--stop-after", &half.to_string()])?;
    let log = String::from_utf8(read(&p("c.ckpt.log"))?).unwrap();
    ensure!(log.lines().count() == half + 1, "interrupted run logged {} lines", log.lines().count());
    let last = p("c.ckpt.last");
    train_cli(&conf, &p("c.ckpt"), &["--checkpoint", last.to_str().unwrap()])?;
    for suffix in ["", ".last", ".log"] {
        let (a, c) = (read(&p(&format!("a.ckpt{suffix}")))?, read(&p(&format!("c.ckpt{suffix}")))?);
        ensure!(a == c, "resumed run: c.ckpt{suffix} differs from the uninterrupted a.ckpt{suffix}");
    }
    Ok(format!(
        "{epochs}-epoch runs bitwise identical (checkpoint, last, log); round trip byte-exact; resume after {half} epochs matches"
    ))
}

// ---------------------------------------------------------------- 8

fn query_latency() -> Outcome {
    let (n, dl, dc) = (100_000, 1536, 512);
    let mut g = rng(88);
    let build = Instant::now();
    let idx = random_index(&mut g, n, dl, dc);
    let build = build.elapsed();
    let mut slowest = Duration::ZERO;
    let mut total = Duration::ZERO;
    let queries = 5;
    let mut first = None;
    for qn in 0..queries {
        let q = HybridEmbedding {
            latent: uniform(&mut g, dl, -1.0, 1.0),
            concept: uniform(&mut g, dc, 0.0, 1.0),
        };
        let t = Instant::now();
        let r = ok(rank_candidates("q", &q, &idx, 0.6))?;
        let dt = t.elapsed();
        slowest = slowest.max(dt);
        total += dt;
        ensure!(r.ranked.len() == n, "ranking has {} entries", r.ranked.len());
        if qn == 0 {
            first = Some((q, r.ranked[0].index));
        }
    }
    // The top hit of the first query must be the exact fused maximum.
    let (q, top) = first.unwrap();
    let as64 = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<f64>>();
    let lat: Vec<f64> = (0..n).map(|i| cosine_ref(&q.latent, &as64(idx.latent(i)))).collect();
    let con: Vec<f64> = (0..n).map(|i| jaccard_ref(&q.concept, &as64(idx.concept(i)))).collect();
    let norm = |v: &[f64]| {
        let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
        v.iter().map(|&x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 }).collect::<Vec<f64>>()
    };
    let (nl, nc) = (norm(&lat), norm(&con));
    let fused: Vec<f64> = (0..n).map(|i| 0.6 * nl[i] + 0.4 * nc[i]).collect();
    let want = argsort_desc(&fused, idx.ids())[0];
    ensure!(top == want, "top hit {top}, exact maximum at {want}");
    ensure!(slowest < Duration::from_secs(1), "slowest query took {slowest:.3?}");
    Ok(format!(
        "{n} records x {} dims, mean {:.3?} / max {slowest:.3?} per query (index built in {build:.1?})",
        dl + dc,
        total / queries
    ))
}
