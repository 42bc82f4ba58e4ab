use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Tensor};

/// Adam with bias-corrected moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    /// Per parameter; `None` for frozen parameters.
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = |id: ParamId| store.is_trainable(id).then(|| Tensor::zeros(store.get(id).shape()));
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: store.ids().map(zeros).collect(),
            second: store.ids().map(zeros).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&Tensor> {
        self.first.get(id.index()).and_then(Option::as_ref)
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&Tensor> {
        self.second.get(id.index()).and_then(Option::as_ref)
    }

    /// Restores saved state; moment shapes must match the parameters.
    pub fn restore(&mut self, step: u64, first: Vec<Option<Tensor>>, second: Vec<Option<Tensor>>) -> Result<()> {
        for (mine, theirs) in [(&self.first, &first), (&self.second, &second)] {
            if mine.len() != theirs.len() {
                return Err(Error::shape("optimizer state", &[theirs.len()], &[mine.len()]));
            }
            for (a, b) in mine.iter().zip(theirs) {
                if a.as_ref().map(Tensor::shape) != b.as_ref().map(Tensor::shape) {
                    return Err(Error::invalid("optimizer moment shapes do not match the parameters"));
                }
            }
        }
        self.step = step;
        self.first = first;
        self.second = second;
        Ok(())
    }

    /// Applies one update with learning rate `lr`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (id, g) in grads {
            let i = id.index();
            let (Some(m), Some(v)) = (self.first[i].as_mut(), self.second[i].as_mut()) else {
                return Err(Error::invalid(format!("parameter `{}` is not trainable", store.name(*id))));
            };
            if g.shape() != m.shape() {
                return Err(Error::shape("adam update", g.shape(), m.shape()));
            }
            let p = store.get_mut(*id);
            for (((p, m), v), &g) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
