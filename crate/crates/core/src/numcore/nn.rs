//! Neural building blocks on top of the tape: affine maps, GRU cells and
//! bidirectional GRUs, same-length 1-d convolution with max-over-time
//! pooling, batch normalization, and row pooling.

use rand::Rng;

use super::params::{init_uniform, ParamId, ParamStore};
use super::session::{Mode, RunningStatUpdate, Session};
use super::tape::{BatchNormMode, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `W x + b` for a vector `x`, or `X Wᵀ + b` row-wise for a batch.
/// `w` is `out × in`.
pub fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let xs = tape.value(x).shape().to_vec();
    let (out, inp) = tape
        .value(w)
        .dims2()
        .filter(|_| tape.value(w).shape().len() == 2)
        .ok_or_else(|| Error::shape("affine", &xs, tape.value(w).shape()))?;
    let in_x = *xs.last().unwrap();
    if in_x != inp || xs.len() > 2 {
        return Err(Error::shape("affine", &xs, tape.value(w).shape()));
    }
    if tape.value(b).shape() != [out] {
        return Err(Error::shape("affine", tape.value(w).shape(), tape.value(b).shape()));
    }
    if xs.len() == 1 {
        let x2 = tape.reshape(x, vec![1, in_x])?;
        let y = tape.matmul_nt(x2, w)?;
        let y = tape.add_row(y, b)?;
        tape.reshape(y, vec![out])
    } else {
        let y = tape.matmul_nt(x, w)?;
        tape.add_row(y, b)
    }
}

/// Column-wise mean of an `n×D` matrix.
pub fn pool_mean(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.mean_rows(x)
}

/// Column-wise max of an `n×D` matrix.
pub fn pool_max(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.max_rows(x)
}

/// Parameters of one GRU direction. Gate order: update `z`, reset `r`,
/// candidate `h̃`; each gate has an input map, a recurrent map and a bias.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w: [ParamId; 3],
    pub u: [ParamId; 3],
    pub b: [ParamId; 3],
}

const GATES: [&str; 3] = ["z", "r", "h"];

impl GruParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let mut reg = |kind: &str, shape: &[usize], fan_in: usize| -> [ParamId; 3] {
            GATES.map(|g| {
                store.add(
                    format!("{prefix}.{kind}_{g}"),
                    init_uniform(rng, shape, fan_in),
                    true,
                )
            })
        };
        let w = reg("w", &[hidden_dim, input_dim], hidden_dim);
        let u = reg("u", &[hidden_dim, hidden_dim], hidden_dim);
        let b = reg("b", &[hidden_dim], hidden_dim);
        GruParams {
            input_dim,
            hidden_dim,
            w,
            u,
            b,
        }
    }
}

/// One GRU step on `1×H` rows:
/// `z = σ(W_z x + U_z h + b_z)`, `r = σ(W_r x + U_r h + b_r)`,
/// `h̃ = tanh(W_h x + U_h (r ⊙ h) + b_h)`, `h' = (1 − z) ⊙ h + z ⊙ h̃`.
///
/// `x_proj` holds the three input projections `W_g x + b_g` already
/// computed for this step.
fn gru_step(s: &mut Session<'_>, p: &GruParams, x_proj: [Var; 3], h: Var) -> Result<Var> {
    let [uz, ur, uh] = p.u.map(|id| s.param(id));
    let t = &mut s.tape;
    let hz = t.matmul_nt(h, uz)?;
    let z = t.add(x_proj[0], hz)?;
    let z = t.sigmoid(z);
    let hr = t.matmul_nt(h, ur)?;
    let r = t.add(x_proj[1], hr)?;
    let r = t.sigmoid(r);
    let rh = t.mul(r, h)?;
    let hh = t.matmul_nt(rh, uh)?;
    let cand = t.add(x_proj[2], hh)?;
    let cand = t.tanh(cand);
    let diff = t.sub(cand, h)?;
    let step = t.mul(z, diff)?;
    t.add(h, step)
}

/// Single GRU cell application on vectors `x_t: [input_dim]` and
/// `h_prev: [hidden_dim]`, returning `h_t: [hidden_dim]`.
pub fn gru_cell(s: &mut Session<'_>, p: &GruParams, x: Var, h_prev: Var) -> Result<Var> {
    let (xv, hv) = (s.value(x), s.value(h_prev));
    if xv.len() != p.input_dim || xv.shape().len() != 1 {
        return Err(Error::shape("gru_cell", xv.shape(), &[p.input_dim]));
    }
    if hv.len() != p.hidden_dim || hv.shape().len() != 1 {
        return Err(Error::shape("gru_cell", hv.shape(), &[p.hidden_dim]));
    }
    let proj = input_projections(s, p, x)?;
    let h = s.tape.reshape(h_prev, vec![1, p.hidden_dim])?;
    let out = gru_step(s, p, proj, h)?;
    s.tape.reshape(out, vec![p.hidden_dim])
}

fn input_projections(s: &mut Session<'_>, p: &GruParams, x: Var) -> Result<[Var; 3]> {
    let mut out = [x; 3];
    for g in 0..3 {
        let (w, b) = (s.param(p.w[g]), s.param(p.b[g]));
        out[g] = affine(&mut s.tape, x, w, b)?;
        if s.value(out[g]).shape().len() == 1 {
            out[g] = s.tape.reshape(out[g], vec![1, p.hidden_dim])?;
        }
    }
    Ok(out)
}

/// Runs a GRU over the rows of `seq` in the given order, from a zero
/// initial state. Returns the hidden state after each visited row, in
/// visiting order.
fn gru_scan(
    s: &mut Session<'_>,
    p: &GruParams,
    seq: Var,
    order: impl Iterator<Item = usize>,
) -> Result<Vec<Var>> {
    let proj = input_projections(s, p, seq)?;
    let mut h = s.constant(Tensor::zeros(&[1, p.hidden_dim]));
    let mut states = Vec::new();
    for t in order {
        let step = [
            s.tape.row(proj[0], t)?,
            s.tape.row(proj[1], t)?,
            s.tape.row(proj[2], t)?,
        ];
        h = gru_step(s, p, step, h)?;
        states.push(h);
    }
    Ok(states)
}

/// Bidirectional GRU over an `n×d` sequence. Row `t` of the `n×2H` output is
/// `[→h_t, ←h_t]`, where `←h_t` is the backward GRU's state after consuming
/// rows `n−1 … t`.
pub fn bigru(s: &mut Session<'_>, fwd: &GruParams, bwd: &GruParams, seq: Var) -> Result<Var> {
    let sv = s.value(seq);
    let (n, d) = sv
        .dims2()
        .filter(|_| sv.shape().len() == 2)
        .ok_or_else(|| Error::shape("bigru", sv.shape(), &[fwd.input_dim]))?;
    if d != fwd.input_dim || d != bwd.input_dim {
        return Err(Error::shape("bigru", sv.shape(), &[n, fwd.input_dim]));
    }
    let forward = gru_scan(s, fwd, seq, 0..n)?;
    let mut backward = gru_scan(s, bwd, seq, (0..n).rev())?;
    backward.reverse();
    let f = s.tape.stack_rows(&forward)?;
    let b = s.tape.stack_rows(&backward)?;
    s.tape.concat_cols(&[f, b])
}

/// A block of `num_filters` 1-d filters of width `kernel_size`.
#[derive(Clone, Debug)]
pub struct Conv1dParams {
    pub kernel_size: usize,
    pub num_filters: usize,
    pub input_dim: usize,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv1dParams {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        kernel_size: usize,
        num_filters: usize,
        input_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel_size * input_dim;
        let weight = store.add(
            format!("{prefix}.weight"),
            init_uniform(rng, &[num_filters, kernel_size, input_dim], fan_in),
            true,
        );
        let bias = store.add(
            format!("{prefix}.bias"),
            init_uniform(rng, &[num_filters], fan_in),
            true,
        );
        Conv1dParams {
            kernel_size,
            num_filters,
            input_dim,
            weight,
            bias,
        }
    }
}

/// `max-pool over time(ReLU(conv(H)))` with same-length zero padding,
/// giving a vector of `num_filters` non-negative values.
pub fn conv1d_relu_maxpool(s: &mut Session<'_>, p: &Conv1dParams, h: Var) -> Result<Var> {
    let (w, b) = (s.param(p.weight), s.param(p.bias));
    let t = &mut s.tape;
    let conv = t.conv1d(h, w, b)?;
    let act = t.relu(conv);
    t.max_rows(act)
}

#[derive(Clone, Debug)]
pub struct BatchNormParams {
    pub dim: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormParams {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, momentum: f64, eps: f64) -> Self {
        assert!(eps > 0.0 && momentum > 0.0 && momentum <= 1.0);
        BatchNormParams {
            dim,
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0), true),
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros(&[dim]), true),
            running_mean: store.add(format!("{prefix}.running_mean"), Tensor::zeros(&[dim]), false),
            running_var: store.add(format!("{prefix}.running_var"), Tensor::full(&[dim], 1.0), false),
            momentum,
            eps,
        }
    }
}

/// Batch normalization of a `B×dim` batch. Train mode normalizes with the
/// batch statistics and queues a running-statistics update on the session;
/// eval mode uses the stored running statistics.
pub fn batchnorm(s: &mut Session<'_>, p: &BatchNormParams, x: Var) -> Result<Var> {
    let (gamma, beta) = (s.param(p.gamma), s.param(p.beta));
    match s.mode() {
        Mode::Train => {
            let (out, stats) = s.tape.batch_norm(x, gamma, beta, p.eps, BatchNormMode::Train)?;
            let stats = stats.expect("train mode yields batch statistics");
            s.record_update(RunningStatUpdate {
                mean: p.running_mean,
                var: p.running_var,
                momentum: p.momentum,
                batch_mean: stats.mean,
                batch_var: stats.var,
            });
            Ok(out)
        }
        Mode::Eval => {
            let params = s.params();
            let mode = BatchNormMode::Eval {
                running_mean: params.get(p.running_mean).data(),
                running_var: params.get(p.running_var).data(),
            };
            Ok(s.tape.batch_norm(x, gamma, beta, p.eps, mode)?.0)
        }
    }
}
