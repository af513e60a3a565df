//! Central finite-difference checks for tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Central-difference step.
    pub step: f64,
    /// Maximum admissible relative error.
    pub rel_tol: f64,
    /// Denominator floor: `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Coordinates sampled per tensor (all when the tensor is smaller).
    pub coords_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            floor: 1e-6,
            coords_per_tensor: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: String,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= self.rel_tol
    }

    fn record(&mut self, label: String, analytic: f64, numeric: f64, floor: f64) {
        let denom = analytic.abs().max(numeric.abs()).max(floor);
        let err = (analytic - numeric).abs() / denom;
        self.checked += 1;
        if err >= self.max_rel_err {
            self.max_rel_err = err;
            self.worst = format!("{label}: analytic {analytic:.6e} numeric {numeric:.6e}");
        }
    }
}

fn coords(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if n <= k {
        (0..n).collect()
    } else {
        let mut v = sample(rng, n, k).into_vec();
        v.sort_unstable();
        v
    }
}

/// Checks d(f)/d(inputs) for a scalar-valued `f` built on a fresh graph.
pub fn check_inputs(
    inputs: &[Tensor],
    f: impl Fn(&mut Graph, &[Var]) -> Var,
    cfg: GradCheck,
) -> GradCheckReport {
    let eval = |ins: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input_with_grad(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        rel_tol: cfg.rel_tol,
        ..Default::default()
    };
    let mut work = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(t.shape());
        let analytic = grads.wrt(vars[ti]).unwrap_or(&zero);
        for c in coords(t.numel(), cfg.coords_per_tensor, &mut rng) {
            let orig = work[ti].data()[c];
            work[ti].data_mut()[c] = orig + cfg.step;
            let fp = eval(&work);
            work[ti].data_mut()[c] = orig - cfg.step;
            let fm = eval(&work);
            work[ti].data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            report.record(format!("input {ti}[{c}]"), analytic.data()[c], numeric, cfg.floor);
        }
    }
    report
}

/// Checks d(f)/d(params) for the listed parameters of `store`.
pub fn check_params(
    store: &ParamStore,
    ids: &[ParamId],
    f: impl Fn(&mut Graph, &ParamStore) -> Var,
    cfg: GradCheck,
) -> GradCheckReport {
    let mut g = Graph::new();
    let out = f(&mut g, store);
    let grads = g.backward(out);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        rel_tol: cfg.rel_tol,
        ..Default::default()
    };
    let mut work = store.clone();
    let eval = |s: &ParamStore| -> f64 {
        let mut g = Graph::new();
        let out = f(&mut g, s);
        g.value(out).item()
    };
    for &id in ids {
        let n = store.get(id).numel();
        let zero = Tensor::zeros(store.get(id).shape());
        let analytic = grads.param(id).cloned().unwrap_or(zero);
        for c in coords(n, cfg.coords_per_tensor, &mut rng) {
            let orig = work.get(id).data()[c];
            work.get_mut(id).data_mut()[c] = orig + cfg.step;
            let fp = eval(&work);
            work.get_mut(id).data_mut()[c] = orig - cfg.step;
            let fm = eval(&work);
            work.get_mut(id).data_mut()[c] = orig;
            let numeric = (fp - fm) / (2.0 * cfg.step);
            report.record(
                format!("{}[{c}]", store.name(id)),
                analytic.data()[c],
                numeric,
                cfg.floor,
            );
        }
    }
    report
}
