use super::params::{ParamId, ParamStore};
use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;

/// Whether batch normalization uses batch statistics (and reports them for
/// the running-average update) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Pending running-statistics update produced by a train-mode batch norm.
#[derive(Clone, Debug)]
pub struct RunningStatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub momentum: f64,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
}

impl RunningStatUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        for (id, batch) in [(self.mean, &self.batch_mean), (self.var, &self.batch_var)] {
            let m = self.momentum;
            for (r, b) in store.get_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - m) * *r + m * b;
            }
        }
    }
}

/// One forward evaluation over frozen parameters.
///
/// Parameters are bound to tape leaves lazily and at most once, so their
/// gradients accumulate over every use.
pub struct Session<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: Vec<Option<Var>>,
    mode: Mode,
    updates: Vec<RunningStatUpdate>,
}

impl<'p> Session<'p> {
    pub fn new(params: &'p ParamStore, mode: Mode) -> Self {
        Session {
            tape: Tape::new(),
            params,
            bound: vec![None; params.len()],
            mode,
            updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.leaf_shared(self.params.shared(id));
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.tape.leaf(value)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        self.tape.value(var)
    }

    pub(crate) fn record_update(&mut self, update: RunningStatUpdate) {
        self.updates.push(update);
    }

    pub fn running_stat_updates(&self) -> &[RunningStatUpdate] {
        &self.updates
    }

    pub fn into_updates(self) -> Vec<RunningStatUpdate> {
        self.updates
    }

    /// Gradient for every trainable parameter bound in this session, in
    /// parameter order. Unused parameters get a zero gradient.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<(ParamId, Tensor)> {
        self.params
            .ids()
            .filter(|&id| self.params.is_trainable(id))
            .map(|id| {
                let g = self.bound[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| Tensor::zeros(self.params.get(id).shape()));
                (id, g)
            })
            .collect()
    }
}
