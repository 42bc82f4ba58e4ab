//! Finite-difference validation of reverse-mode gradients.

use super::params::{ParamId, ParamStore};
use super::session::{Mode, Session};
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error, so that
    /// gradients that are zero up to rounding compare on an absolute scale.
    /// The bound is raised to `noise / tolerance` when the rounding noise of
    /// the central difference itself, `NOISE_ULPS · ε · |loss| / step`, is
    /// larger.
    pub floor: f64,
    /// Check at most this many coordinates per tensor (evenly strided).
    pub max_coords: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-6,
            max_coords: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(tensor, coordinate, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(String, usize, f64, f64)>,
    pub coords_checked: usize,
    pub passed: bool,
}

/// Rounding error of one central difference, in units of `ε · |loss|`.
pub const NOISE_ULPS: f64 = 8.0;

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn coords(len: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let stride = len as f64 / m as f64;
            (0..m).map(|i| (i as f64 * stride) as usize).collect()
        }
        _ => (0..len).collect(),
    }
}

struct Tracker {
    report: GradCheckReport,
    tolerance: f64,
    floor: f64,
}

impl Tracker {
    fn new(opts: &GradCheckOptions, loss: f64) -> Self {
        let noise = NOISE_ULPS * f64::EPSILON * loss.abs() / opts.step;
        Tracker {
            report: GradCheckReport {
                max_rel_error: 0.0,
                worst: None,
                coords_checked: 0,
                passed: true,
            },
            tolerance: opts.tolerance,
            floor: opts.floor.max(noise / opts.tolerance),
        }
    }

    fn record(&mut self, name: &str, i: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric, self.floor);
        self.report.coords_checked += 1;
        if err > self.report.max_rel_error || self.report.worst.is_none() {
            self.report.max_rel_error = err.max(self.report.max_rel_error);
            self.report.worst = Some((name.to_string(), i, analytic, numeric));
        }
    }

    fn finish(mut self) -> GradCheckReport {
        self.report.passed = self.report.max_rel_error < self.tolerance;
        self.report
    }
}

fn scalar(tape: &Tape, out: Var) -> Result<f64> {
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(Error::shape("grad_check", v.shape(), &[1]));
    }
    Ok(v.item())
}

/// Compares the tape gradient of a scalar-valued closure with central
/// finite differences at `inputs`.
pub fn grad_check<F>(f: F, inputs: &[Tensor], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.leaf(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let base = scalar(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut tracker = Tracker::new(opts, base);
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in coords(inputs[k].len(), opts.max_coords) {
            let orig = work[k].data()[i];
            work[k].data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            tracker.record(&format!("input{k}"), i, analytic.data()[i], numeric);
        }
    }
    Ok(tracker.finish())
}

/// Finite-difference check of the gradient of `loss` with respect to every
/// trainable parameter in `store`.
pub fn grad_check_params<F>(
    store: &ParamStore,
    mode: Mode,
    loss: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Session<'_>) -> Result<Var>,
{
    let eval = |st: &ParamStore| -> Result<f64> {
        let mut s = Session::new(st, mode);
        let out = loss(&mut s)?;
        scalar(&s.tape, out)
    };

    let mut s = Session::new(store, mode);
    let out = loss(&mut s)?;
    let base = scalar(&s.tape, out)?;
    let mut grads = s.tape.backward(out)?;
    let analytic: Vec<(ParamId, Tensor)> = s.param_grads(&mut grads);
    drop(s);

    let mut tracker = Tracker::new(opts, base);
    let mut work = store.clone();
    for (id, g) in analytic {
        for i in coords(g.len(), opts.max_coords) {
            let orig = work.get(id).data()[i];
            work.get_mut(id).data_mut()[i] = orig + opts.step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - opts.step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * opts.step);
            tracker.record(store.name(id), i, g.data()[i], numeric);
        }
    }
    Ok(tracker.finish())
}
