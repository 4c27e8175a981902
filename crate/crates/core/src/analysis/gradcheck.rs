//! Central finite-difference check of reverse-mode gradients.
//!
//! The numeric side only ever runs forward passes on fresh graphs, so it is
//! independent of every backward rule it is used to validate.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Largest tolerated relative error where the analytic gradient is significant.
    pub rel_tol: f64,
    /// Analytic magnitudes at or below this are compared in absolute terms.
    pub significance: f64,
    /// Absolute tolerance applied to insignificant entries.
    pub abs_tol: f64,
    /// Upper bound on probed entries per input; entries are strided evenly.
    pub max_probes_per_input: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-4,
            significance: 1e-8,
            abs_tol: 1e-6,
            max_probes_per_input: usize::MAX,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    pub max_abs_err_insignificant: f64,
    pub failures: Vec<GradMismatch>,
}

#[derive(Clone, Debug)]
pub struct GradMismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn record(&mut self, cfg: &GradCheckConfig, input: usize, element: usize, analytic: f64, numeric: f64) {
        self.probes += 1;
        let bad = if analytic.abs() > cfg.significance {
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
            self.max_rel_err = self.max_rel_err.max(rel);
            rel >= cfg.rel_tol
        } else {
            let abs = (analytic - numeric).abs();
            self.max_abs_err_insignificant = self.max_abs_err_insignificant.max(abs);
            abs >= cfg.abs_tol
        };
        if bad {
            self.failures.push(GradMismatch {
                input,
                element,
                analytic,
                numeric,
            });
        }
    }
}

fn probe_stride(n: usize, cfg: &GradCheckConfig) -> usize {
    n.div_ceil(cfg.max_probes_per_input.max(1)).max(1)
}

/// Compares the gradient of the scalar produced by `f` with respect to every
/// tensor in `inputs` against central finite differences.
pub fn check_gradients<F>(inputs: &[Tensor], cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut report = GradCheckReport::default();
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape()));
        let n = input.numel();
        for e in (0..n).step_by(probe_stride(n, cfg)) {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + cfg.step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - cfg.step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            report.record(cfg, i, e, analytic.data()[e], (plus - minus) / (2.0 * cfg.step));
        }
    }
    if report.probes == 0 {
        return Err(Error::Invalid("gradient check probed nothing".into()));
    }
    Ok(report)
}

/// As [`check_gradients`], over every parameter of `store`; input `i` of the
/// report is the i-th parameter. `f` builds the loss on a session over the
/// (possibly perturbed) store.
pub fn check_param_gradients<F>(store: &ParamStore, cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let analytic = {
        let mut s = Session::new(store, true);
        let loss = f(&mut s)?;
        let grads = s.backward(loss)?;
        s.param_grads(&grads)
    };
    let eval = |st: &ParamStore| -> Result<f64> {
        let mut s = Session::new(st, false);
        let out = f(&mut s)?;
        s.value(out).item()
    };

    let mut report = GradCheckReport::default();
    let mut work = store.clone();
    let ids: Vec<_> = store.ids().collect();
    for (i, &id) in ids.iter().enumerate() {
        let n = store.get(id).numel();
        for e in (0..n).step_by(probe_stride(n, cfg)) {
            let orig = store.get(id).data()[e];
            work.get_mut(id).data_mut()[e] = orig + cfg.step;
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[e] = orig - cfg.step;
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[e] = orig;
            let a = analytic[i].as_ref().map_or(0.0, |g| g.data()[e]);
            report.record(cfg, i, e, a, (plus - minus) / (2.0 * cfg.step));
        }
    }
    if report.probes == 0 {
        return Err(Error::Invalid("gradient check probed nothing".into()));
    }
    Ok(report)
}
