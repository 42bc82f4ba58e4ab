//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op evaluates eagerly and appends a node holding its value and the
//! information its backward pass needs. [`Tape::backward`] walks the nodes
//! in reverse and accumulates gradients for every node reachable from the
//! loss.

use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Reshape(Var),
    Row(Var, usize),
    StackRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    Sum(Var),
    Conv1d {
        input: Var,
        weight: Var,
        bias: Var,
        left_pad: usize,
    },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        inv_std: Vec<f64>,
        train: bool,
    },
    Gather {
        table: Var,
        indices: Vec<usize>,
    },
    L2NormalizeRows(Var, Vec<f64>),
    Jaccard(Var, Var),
    Triplet {
        sim: Var,
        // (row, col, sign) contributions of every active hinge term
        active: Vec<(usize, usize, f64)>,
    },
    Bce {
        probs: Var,
        targets: Arc<Tensor>,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
}

/// Statistics of one train-mode batch normalization, used to update the
/// running estimates after the step.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance estimate.
    pub var: Vec<f64>,
}

/// How a batch normalization node normalizes its input.
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a> {
    Train,
    Eval {
        running_mean: &'a [f64],
        running_var: &'a [f64],
    },
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(|g| g.take())
    }
}

fn dims2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    t.dims2()
        .ok_or_else(|| Error::shape(op, t.shape(), &[]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf sharing storage with the caller, e.g. a model parameter.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2(av, "matmul")?;
        let (n, k2) = dims2(bv, "matmul")?;
        if k != k2 || av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// Adds the vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let (_, cols) = dims2(xv, "add_row")?;
        if bv.shape() != [cols] {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let bd = bv.data();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % cols])
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(x, b)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).map(|v| v * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(sigmoid);
        self.push(v, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(f64::tanh);
        self.push(v, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|v| v.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x)))
    }

    /// Row `i` of a matrix as a `1×cols` matrix.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = dims2(xv, "row")?;
        if i >= rows {
            return Err(Error::shape("row", xv.shape(), &[i]));
        }
        let value = Tensor::matrix(1, cols, xv.row(i).to_vec())?;
        Ok(self.push(value, Op::Row(x, i)))
    }

    /// Stacks vectors (or `1×n` rows) into a matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or(Error::Empty("stack_rows"))?;
        let width = self.value(*first).len();
        let mut data = Vec::with_capacity(width * rows.len());
        for &r in rows {
            let rv = self.value(r);
            if rv.len() != width || dims2(rv, "stack_rows")?.0 != 1 {
                return Err(Error::shape("stack_rows", &[width], rv.shape()));
            }
            data.extend_from_slice(rv.data());
        }
        let value = Tensor::matrix(rows.len(), width, data)?;
        Ok(self.push(value, Op::StackRows(rows.to_vec())))
    }

    /// Concatenates along the last axis. Inputs are all vectors or all
    /// matrices with the same number of rows.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or(Error::Empty("concat"))?);
        let rank = first.shape().len();
        let (rows, _) = dims2(first, "concat")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let pv = self.value(p);
            let (r, c) = dims2(pv, "concat")?;
            if r != rows || pv.shape().len() != rank {
                return Err(Error::shape("concat", first.shape(), pv.shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Column-wise mean of an `n×D` matrix, as a `D` vector.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = dims2(xv, "mean_rows")?;
        let mut out = vec![0.0; cols];
        for r in 0..rows {
            for (o, v) in out.iter_mut().zip(xv.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / rows as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = Tensor::vector(out)?;
        Ok(self.push(value, Op::MeanRows(x)))
    }

    /// Column-wise max of an `n×D` matrix. Ties go to the earliest row.
    pub fn max_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = dims2(xv, "max_rows")?;
        let mut out = xv.row(0).to_vec();
        let mut arg = vec![0usize; cols];
        for r in 1..rows {
            for (c, &v) in xv.row(r).iter().enumerate() {
                if v > out[c] {
                    out[c] = v;
                    arg[c] = r;
                }
            }
        }
        let value = Tensor::vector(out)?;
        Ok(self.push(value, Op::MaxRows(x, arg)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Same-length 1-d convolution of `input: n×D` with `weight: r×k×D` and
    /// `bias: r`. The input is padded with `⌊(k−1)/2⌋` zero rows on the left
    /// and `⌈(k−1)/2⌉` on the right, so the output is `n×r`.
    pub fn conv1d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(input), self.value(weight), self.value(bias));
        let (n, d) = dims2(xv, "conv1d")?;
        let [r, k, wd] = *wv.shape() else {
            return Err(Error::shape("conv1d", xv.shape(), wv.shape()));
        };
        if wd != d || xv.shape().len() != 2 {
            return Err(Error::shape("conv1d", xv.shape(), wv.shape()));
        }
        if bv.shape() != [r] {
            return Err(Error::shape("conv1d", wv.shape(), bv.shape()));
        }
        let left_pad = (k - 1) / 2;
        let (xd, wdata, bd) = (xv.data(), wv.data(), bv.data());
        let mut out = vec![0.0; n * r];
        for t in 0..n {
            for f in 0..r {
                let mut acc = bd[f];
                for j in 0..k {
                    let Some(src) = (t + j).checked_sub(left_pad).filter(|&s| s < n) else {
                        continue;
                    };
                    let xrow = &xd[src * d..(src + 1) * d];
                    let wrow = &wdata[(f * k + j) * d..(f * k + j + 1) * d];
                    acc += xrow.iter().zip(wrow).map(|(a, b)| a * b).sum::<f64>();
                }
                out[t * r + f] = acc;
            }
        }
        let value = Tensor::matrix(n, r, out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                weight,
                bias,
                left_pad,
            },
        ))
    }

    /// Batch normalization of `input: B×D` with per-column scale and shift.
    /// In train mode the batch statistics are returned alongside the output.
    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        mode: BatchNormMode<'_>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let xv = self.value(input);
        let (b, d) = dims2(xv, "batch_norm")?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [d] {
                return Err(Error::shape("batch_norm", xv.shape(), self.value(p).shape()));
            }
        }
        let xd = xv.data();
        let (mean, var, stats, train) = match mode {
            BatchNormMode::Train => {
                if b < 2 {
                    return Err(Error::invalid(
                        "batch normalization in train mode needs a batch of at least 2",
                    ));
                }
                let mut mean = vec![0.0; d];
                for r in 0..b {
                    for c in 0..d {
                        mean[c] += xd[r * d + c];
                    }
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut ss = vec![0.0; d];
                for r in 0..b {
                    for c in 0..d {
                        let e = xd[r * d + c] - mean[c];
                        ss[c] += e * e;
                    }
                }
                let biased: Vec<f64> = ss.iter().map(|s| s / b as f64).collect();
                let unbiased = ss.iter().map(|s| s / (b - 1) as f64).collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, biased, Some(stats), true)
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
            } => {
                if running_mean.len() != d || running_var.len() != d {
                    return Err(Error::shape("batch_norm", xv.shape(), &[running_mean.len()]));
                }
                (running_mean.to_vec(), running_var.to_vec(), None, false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; b * d];
        for r in 0..b {
            for c in 0..d {
                xhat[r * d + c] = (xd[r * d + c] - mean[c]) * inv_std[c];
            }
        }
        let (g, be) = (self.value(gamma).data(), self.value(beta).data());
        let out = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % d] + be[i % d])
            .collect();
        let shape = xv.shape().to_vec();
        let value = Tensor::new(shape.clone(), out)?;
        let xhat = Tensor::new(shape, xhat)?;
        let var = self.push(
            value,
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
        );
        Ok((var, stats))
    }

    /// Rows of `table` selected by `indices`, as an `m×E` matrix.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, cols) = dims2(tv, "gather")?;
        if indices.is_empty() {
            return Err(Error::Empty("gather"));
        }
        let mut data = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::invalid(format!("index {i} out of range for {rows} rows")));
            }
            data.extend_from_slice(tv.row(i));
        }
        let value = Tensor::matrix(indices.len(), cols, data)?;
        Ok(self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
        ))
    }

    /// Scales every row to unit Euclidean norm. A zero row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (rows, cols) = dims2(xv, "l2_normalize")?;
        let mut norms = Vec::with_capacity(rows);
        let mut data = xv.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::invalid("cosine similarity of a zero vector is undefined"));
            }
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(value, Op::L2NormalizeRows(x, norms)))
    }

    /// Generalized Jaccard similarity between every row of `a: B1×K` and
    /// every row of `b: B2×K`: `Σ min / Σ max`, defined as 0 when both rows
    /// are all-zero.
    pub fn jaccard(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = dims2(av, "jaccard")?;
        let (n, k2) = dims2(bv, "jaccard")?;
        if k != k2 || av.shape().len() != 2 || bv.shape().len() != 2 {
            return Err(Error::shape("jaccard", av.shape(), bv.shape()));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let (num, den) = min_max_sums(av.row(i), bv.row(j));
                out[i * n + j] = if den == 0.0 { 0.0 } else { num / den };
            }
        }
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push(value, Op::Jaccard(a, b)))
    }

    /// Triplet ranking loss with hardest in-batch negatives over a square
    /// similarity matrix whose diagonal holds the positive pairs. Entry
    /// `(i, j)` is the similarity of video `i` and sentence `j`. Summed over
    /// the batch; negative ties go to the lowest index.
    pub fn triplet_hardest(&mut self, sim: Var, margin: f64) -> Result<Var> {
        let sv = self.value(sim);
        let (b, b2) = dims2(sv, "triplet_loss")?;
        if b != b2 || sv.shape().len() != 2 {
            return Err(Error::shape("triplet_loss", sv.shape(), &[b, b]));
        }
        if b < 2 {
            return Err(Error::invalid("triplet loss needs a batch of at least 2"));
        }
        let s = |i: usize, j: usize| sv.data()[i * b + j];
        let mut total = 0.0;
        let mut active = Vec::new();
        for i in 0..b {
            let pos = s(i, i);
            let hardest = |score: &dyn Fn(usize) -> f64| {
                (0..b)
                    .filter(|&j| j != i)
                    .fold(None, |best: Option<(usize, f64)>, j| match best {
                        Some((_, v)) if v >= score(j) => best,
                        _ => Some((j, score(j))),
                    })
                    .expect("batch of at least 2")
            };
            let (sn, sv_neg) = hardest(&|j| s(i, j));
            let (vn, vv_neg) = hardest(&|j| s(j, i));
            let h1 = margin + sv_neg - pos;
            if h1 > 0.0 {
                total += h1;
                active.push((i, sn, 1.0));
                active.push((i, i, -1.0));
            }
            let h2 = margin + vv_neg - pos;
            if h2 > 0.0 {
                total += h2;
                active.push((vn, i, 1.0));
                active.push((i, i, -1.0));
            }
        }
        Ok(self.push(Tensor::scalar(total), Op::Triplet { sim, active }))
    }

    /// Binary cross-entropy of `probs: B×K` against `targets`, averaged over
    /// the `K` labels and summed over rows. Probabilities are clamped to
    /// `[eps, 1 − eps]`.
    pub fn bce(&mut self, probs: Var, targets: Arc<Tensor>, eps: f64) -> Result<Var> {
        let pv = self.value(probs);
        if !pv.same_shape(&targets) {
            return Err(Error::shape("bce", pv.shape(), targets.shape()));
        }
        let (_, k) = dims2(pv, "bce")?;
        let mut total = 0.0;
        for (&p, &y) in pv.data().iter().zip(targets.data()) {
            let p = p.clamp(eps, 1.0 - eps);
            total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let value = Tensor::scalar(total / k as f64);
        Ok(self.push(value, Op::Bce { probs, targets, eps }))
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::shape("backward", lv.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |var: Var, delta: Tensor| match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        };
        let shaped = |like: &Tensor, data: Vec<f64>| {
            Tensor::new(like.shape().to_vec(), data).expect("gradient shape")
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2().unwrap();
                let (n, _) = bv.dims2().unwrap();
                let (ad, bd) = (av.data(), bv.data());
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; n * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = gd[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for t in 0..k {
                            da[i * k + t] += gij * bd[j * k + t];
                            db[j * k + t] += gij * ad[i * k + t];
                        }
                    }
                }
                acc(*a, shaped(av, da));
                acc(*b, shaped(bv, db));
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                acc(*a, shaped(av, da));
                acc(*b, shaped(bv, db));
            }
            Op::AddRow(x, b) => {
                let bv = self.value(*b);
                let cols = bv.len();
                let mut db = vec![0.0; cols];
                for (i, v) in gd.iter().enumerate() {
                    db[i % cols] += v;
                }
                acc(*x, g.clone());
                acc(*b, shaped(bv, db));
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c)),
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                acc(*x, shaped(&node.value, d));
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect();
                acc(*x, shaped(&node.value, d));
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let d = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                acc(*x, shaped(xv, d));
            }
            Op::Reshape(x) => {
                let xv = self.value(*x);
                acc(*x, shaped(xv, gd.to_vec()));
            }
            Op::Row(x, i) => {
                let xv = self.value(*x);
                let cols = gd.len();
                let mut d = vec![0.0; xv.len()];
                d[i * cols..(i + 1) * cols].copy_from_slice(gd);
                acc(*x, shaped(xv, d));
            }
            Op::StackRows(rows) => {
                let width = node.value.dims2().unwrap().1;
                for (r, &v) in rows.iter().enumerate() {
                    let rv = self.value(v);
                    acc(v, shaped(rv, gd[r * width..(r + 1) * width].to_vec()));
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.dims2().unwrap().1;
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                    }
                    acc(p, shaped(pv, d));
                    offset += w;
                }
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (rows, cols) = xv.dims2().unwrap();
                let inv = 1.0 / rows as f64;
                let d = (0..rows * cols).map(|i| gd[i % cols] * inv).collect();
                acc(*x, shaped(xv, d));
            }
            Op::MaxRows(x, arg) => {
                let xv = self.value(*x);
                let cols = arg.len();
                let mut d = vec![0.0; xv.len()];
                for (c, &r) in arg.iter().enumerate() {
                    d[r * cols + c] += gd[c];
                }
                acc(*x, shaped(xv, d));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                acc(*x, Tensor::full(xv.shape(), gd[0]));
            }
            Op::Conv1d {
                input,
                weight,
                bias,
                left_pad,
            } => {
                let (xv, wv) = (self.value(*input), self.value(*weight));
                let (n, d) = xv.dims2().unwrap();
                let (r, k) = (wv.shape()[0], wv.shape()[1]);
                let (xd, wdata) = (xv.data(), wv.data());
                let mut dx = vec![0.0; n * d];
                let mut dw = vec![0.0; r * k * d];
                let mut db = vec![0.0; r];
                for t in 0..n {
                    for f in 0..r {
                        let gtf = gd[t * r + f];
                        db[f] += gtf;
                        if gtf == 0.0 {
                            continue;
                        }
                        for j in 0..k {
                            let Some(src) = (t + j).checked_sub(*left_pad).filter(|&s| s < n)
                            else {
                                continue;
                            };
                            let base = (f * k + j) * d;
                            for c in 0..d {
                                dw[base + c] += gtf * xd[src * d + c];
                                dx[src * d + c] += gtf * wdata[base + c];
                            }
                        }
                    }
                }
                acc(*input, shaped(xv, dx));
                acc(*weight, shaped(wv, dw));
                acc(*bias, Tensor::vector(db).unwrap());
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let xv = self.value(*input);
                let gam = self.value(*gamma).data();
                let (b, d) = xv.dims2().unwrap();
                let xh = xhat.data();
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for r in 0..b {
                    for c in 0..d {
                        dgamma[c] += gd[r * d + c] * xh[r * d + c];
                        dbeta[c] += gd[r * d + c];
                    }
                }
                let mut dx = vec![0.0; b * d];
                if *train {
                    // dx = inv_std/B · (B·dxhat − Σ dxhat − xhat · Σ dxhat·xhat)
                    for c in 0..d {
                        let sum_dxh = dbeta[c] * gam[c];
                        let sum_dxh_xh = dgamma[c] * gam[c];
                        for r in 0..b {
                            let dxh = gd[r * d + c] * gam[c];
                            dx[r * d + c] = inv_std[c] / b as f64
                                * (b as f64 * dxh - sum_dxh - xh[r * d + c] * sum_dxh_xh);
                        }
                    }
                } else {
                    for r in 0..b {
                        for c in 0..d {
                            dx[r * d + c] = gd[r * d + c] * gam[c] * inv_std[c];
                        }
                    }
                }
                acc(*input, shaped(xv, dx));
                acc(*gamma, Tensor::vector(dgamma).unwrap());
                acc(*beta, Tensor::vector(dbeta).unwrap());
            }
            Op::Gather { table, indices } => {
                let tv = self.value(*table);
                let cols = tv.dims2().unwrap().1;
                let mut d = vec![0.0; tv.len()];
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        d[i * cols + c] += gd[r * cols + c];
                    }
                }
                acc(*table, shaped(tv, d));
            }
            Op::L2NormalizeRows(x, norms) => {
                let xv = self.value(*x);
                let (rows, cols) = xv.dims2().unwrap();
                let y = node.value.data();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    let range = r * cols..(r + 1) * cols;
                    let dot: f64 = gd[range.clone()]
                        .iter()
                        .zip(&y[range.clone()])
                        .map(|(a, b)| a * b)
                        .sum();
                    for i in range {
                        d[i] = (gd[i] - y[i] * dot) / norms[r];
                    }
                }
                acc(*x, shaped(xv, d));
            }
            Op::Jaccard(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2().unwrap();
                let n = bv.dims2().unwrap().0;
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; n * k];
                for i in 0..m {
                    let ar = av.row(i);
                    for j in 0..n {
                        let gij = gd[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        let br = bv.row(j);
                        let (num, den) = min_max_sums(ar, br);
                        if den == 0.0 {
                            continue;
                        }
                        let inv_den2 = 1.0 / (den * den);
                        for t in 0..k {
                            // min takes a on ties, max takes b on ties
                            let (dmin_a, dmax_a) = if ar[t] <= br[t] { (1.0, 0.0) } else { (0.0, 1.0) };
                            let (dmin_b, dmax_b) = (1.0 - dmin_a, 1.0 - dmax_a);
                            da[i * k + t] += gij * (dmin_a * den - num * dmax_a) * inv_den2;
                            db[j * k + t] += gij * (dmin_b * den - num * dmax_b) * inv_den2;
                        }
                    }
                }
                acc(*a, shaped(av, da));
                acc(*b, shaped(bv, db));
            }
            Op::Triplet { sim, active } => {
                let sv = self.value(*sim);
                let b = sv.dims2().unwrap().1;
                let mut d = vec![0.0; sv.len()];
                for &(i, j, sign) in active {
                    d[i * b + j] += sign * gd[0];
                }
                acc(*sim, shaped(sv, d));
            }
            Op::Bce { probs, targets, eps } => {
                let pv = self.value(*probs);
                let k = pv.dims2().unwrap().1 as f64;
                let d = pv
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&p, &y)| {
                        if p < *eps || p > 1.0 - eps {
                            0.0
                        } else {
                            -gd[0] / k * (y / p - (1.0 - y) / (1.0 - p))
                        }
                    })
                    .collect();
                acc(*probs, shaped(pv, d));
            }
        }
    }
}

fn min_max_sums(a: &[f64], b: &[f64]) -> (f64, f64) {
    a.iter().zip(b).fold((0.0, 0.0), |(num, den), (&x, &y)| {
        (num + x.min(y), den + x.max(y))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(t: &mut Tape, shape: &[usize], data: &[f64]) -> Var {
        t.leaf(Tensor::new(shape.to_vec(), data.to_vec()).unwrap())
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2], &[1.0, 2.0]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // d/dx sum(x * x) = 2x
        let mut t = Tape::new();
        let x = leaf(&mut t, &[3], &[1.0, -2.0, 0.5]);
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut t = Tape::new();
        let a = leaf(&mut t, &[2, 3], &[0.0; 6]);
        let b = leaf(&mut t, &[2, 2], &[0.0; 4]);
        let err = t.matmul_nt(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn max_rows_ties_take_first_row() {
        let mut t = Tape::new();
        let x = leaf(&mut t, &[2, 1], &[1.0, 1.0]);
        let m = t.max_rows(x).unwrap();
        let s = t.sum(m);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn gather_rejects_out_of_range() {
        let mut t = Tape::new();
        let table = leaf(&mut t, &[2, 2], &[0.0; 4]);
        assert!(t.gather(table, &[0, 2]).is_err());
        assert!(t.gather(table, &[]).is_err());
    }

    #[test]
    fn bce_gradient_vanishes_when_clamped() {
        let mut t = Tape::new();
        let p = leaf(&mut t, &[1, 2], &[0.0, 1.0]);
        let y = Arc::new(Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap());
        let l = t.bce(p, y, 1e-7).unwrap();
        assert!(t.value(l).item().is_finite());
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).unwrap().data(), &[0.0, 0.0]);
    }
}
