//! Numeric optimal-transport solvers: log-domain Sinkhorn and an exact
//! min-cost-flow oracle for small rational instances.

use crate::error::{Error, Result};
use crate::graph::logsumexp;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TransportPlan {
    /// `[C, L]`, nonnegative.
    pub plan: Tensor,
    pub mu_p: Vec<f64>,
    pub mu_g: Vec<f64>,
    pub eps: f64,
    pub iterations_used: usize,
    pub converged: bool,
    /// `<plan, cst>`.
    pub cost: f64,
    /// Dual potentials `f` (rows) and `g` (columns).
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    /// Dual objective after every full iteration.
    pub dual_history: Vec<f64>,
}

impl TransportPlan {
    /// Largest absolute deviation of the row and column sums from the marginals.
    pub fn marginal_violation(&self) -> f64 {
        marginal_violation(&self.plan, &self.mu_p, &self.mu_g)
    }
}

pub fn marginal_violation(plan: &Tensor, mu_p: &[f64], mu_g: &[f64]) -> f64 {
    let (c, l) = (mu_p.len(), mu_g.len());
    let p = plan.data();
    let mut worst: f64 = 0.0;
    for i in 0..c {
        let s: f64 = p[i * l..(i + 1) * l].iter().sum();
        worst = worst.max((s - mu_p[i]).abs());
    }
    for j in 0..l {
        let s: f64 = (0..c).map(|i| p[i * l + j]).sum();
        worst = worst.max((s - mu_g[j]).abs());
    }
    worst
}

pub fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

fn check_marginal(name: &str, mu: &[f64]) -> Result<()> {
    if mu.is_empty() || mu.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::Param(format!("{name} must be positive and nonempty")));
    }
    let s: f64 = mu.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Param(format!("{name} sums to {s}, expected 1")));
    }
    Ok(())
}

fn check_problem(cst: &Tensor, mu_p: &[f64], mu_g: &[f64]) -> Result<(usize, usize)> {
    check_marginal("mu_p", mu_p)?;
    check_marginal("mu_g", mu_g)?;
    if cst.shape() != [mu_p.len(), mu_g.len()] {
        return Err(Error::Shape(format!(
            "cost {:?} vs marginals {}x{}",
            cst.shape(),
            mu_p.len(),
            mu_g.len()
        )));
    }
    if cst.data().iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
        return Err(Error::Param("cost must be finite and nonnegative".into()));
    }
    Ok((mu_p.len(), mu_g.len()))
}

/// Log-domain Sinkhorn from zero potentials.
pub fn sinkhorn(
    cst: &Tensor,
    mu_p: &[f64],
    mu_g: &[f64],
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> Result<TransportPlan> {
    let (c, l) = check_problem(cst, mu_p, mu_g)?;
    sinkhorn_warm(cst, mu_p, mu_g, eps, max_iters, tol, vec![0.0; c], vec![0.0; l])
}

/// Sinkhorn with eps-scaling: warm-started solves at geometrically decreasing
/// regularization down to `eps`. Same fixed point as [`sinkhorn`], far fewer
/// iterations at small `eps`. `max_iters` bounds the final stage.
pub fn sinkhorn_annealed(
    cst: &Tensor,
    mu_p: &[f64],
    mu_g: &[f64],
    eps: f64,
    max_iters: usize,
    tol: f64,
) -> Result<TransportPlan> {
    let (c, l) = check_problem(cst, mu_p, mu_g)?;
    let scale = cst.max_abs().max(eps);
    let (mut f, mut g) = (vec![0.0; c], vec![0.0; l]);
    let mut used = 0;
    let mut e = scale;
    while e > eps * 1.5 {
        let stage = sinkhorn_warm(cst, mu_p, mu_g, e, 500, tol.max(1e-8), f, g)?;
        used += stage.iterations_used;
        f = stage.f;
        g = stage.g;
        e *= 0.5;
    }
    let mut out = sinkhorn_warm(cst, mu_p, mu_g, eps, max_iters, tol, f, g)?;
    out.iterations_used += used;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn sinkhorn_warm(
    cst: &Tensor,
    mu_p: &[f64],
    mu_g: &[f64],
    eps: f64,
    max_iters: usize,
    tol: f64,
    mut f: Vec<f64>,
    mut g: Vec<f64>,
) -> Result<TransportPlan> {
    if !(eps > 0.0) {
        return Err(Error::Param(format!("eps must be positive, got {eps}")));
    }
    let (c, l) = (mu_p.len(), mu_g.len());
    let k = cst.data();
    let log_a: Vec<f64> = mu_p.iter().map(|a| a.ln()).collect();
    let log_b: Vec<f64> = mu_g.iter().map(|b| b.ln()).collect();
    let mut buf = vec![0.0; c.max(l)];
    let mut history = Vec::new();
    let mut converged = false;
    let mut iters = 0;
    while iters < max_iters {
        iters += 1;
        for i in 0..c {
            for j in 0..l {
                buf[j] = (g[j] - k[i * l + j]) / eps;
            }
            f[i] = eps * (log_a[i] - logsumexp(&buf[..l]));
        }
        for j in 0..l {
            for i in 0..c {
                buf[i] = (f[i] - k[i * l + j]) / eps;
            }
            g[j] = eps * (log_b[j] - logsumexp(&buf[..c]));
        }
        // Columns are exact after the g-update; only rows can violate.
        let mut viol: f64 = 0.0;
        let mut mass = 0.0;
        for i in 0..c {
            let mut s = 0.0;
            for j in 0..l {
                s += ((f[i] + g[j] - k[i * l + j]) / eps).exp();
            }
            mass += s;
            viol = viol.max((s - mu_p[i]).abs());
        }
        let dual = dot(&f, mu_p) + dot(&g, mu_g) - eps * mass;
        history.push(dual);
        if !viol.is_finite() {
            return Err(Error::Numeric("sinkhorn diverged".into()));
        }
        if viol <= tol {
            converged = true;
            break;
        }
    }
    let plan = Tensor::from_fn(&[c, l], |idx| {
        let (i, j) = (idx / l, idx % l);
        ((f[i] + g[j] - k[idx]) / eps).exp()
    });
    let cost = dot(plan.data(), k);
    Ok(TransportPlan {
        plan,
        mu_p: mu_p.to_vec(),
        mu_g: mu_g.to_vec(),
        eps,
        iterations_used: iters,
        converged,
        cost,
        f,
        g,
        dual_history: history,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub const ORACLE_MAX_DIM: usize = 8;
pub const ORACLE_MAX_DENOM: u64 = 10_000;

/// Smallest `D <= 10^4` making every marginal entry an integer multiple of `1/D`.
fn common_denominator(mu_p: &[f64], mu_g: &[f64]) -> Result<u64> {
    'outer: for d in 1..=ORACLE_MAX_DENOM {
        let df = d as f64;
        for m in mu_p.iter().chain(mu_g) {
            let x = m * df;
            if (x - x.round()).abs() > 1e-9 * df.max(1.0) {
                continue 'outer;
            }
        }
        return Ok(d);
    }
    Err(Error::Size(format!(
        "marginals are not rational with denominator <= {ORACLE_MAX_DENOM}"
    )))
}

struct Edge {
    to: usize,
    cap: i64,
    cost: f64,
}

/// Exact optimal transport by successive shortest paths (Bellman-Ford) on the
/// integer-scaled instance. Returns `(plan, cost)`.
pub fn exact_ot_oracle(cst: &Tensor, mu_p: &[f64], mu_g: &[f64]) -> Result<(Tensor, f64)> {
    if mu_p.len() > ORACLE_MAX_DIM || mu_g.len() > ORACLE_MAX_DIM {
        return Err(Error::Size(format!(
            "{}x{} exceeds {ORACLE_MAX_DIM}x{ORACLE_MAX_DIM}",
            mu_p.len(),
            mu_g.len()
        )));
    }
    let (c, l) = check_problem(cst, mu_p, mu_g)?;
    let d = common_denominator(mu_p, mu_g)?;
    let supply: Vec<i64> = mu_p.iter().map(|m| (m * d as f64).round() as i64).collect();
    let demand: Vec<i64> = mu_g.iter().map(|m| (m * d as f64).round() as i64).collect();

    let (s, t) = (c + l, c + l + 1);
    let n = c + l + 2;
    let mut edges: Vec<Edge> = Vec::new();
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut add = |edges: &mut Vec<Edge>, u: usize, v: usize, cap: i64, cost: f64| {
        adj[u].push(edges.len());
        edges.push(Edge { to: v, cap, cost });
        adj[v].push(edges.len());
        edges.push(Edge {
            to: u,
            cap: 0,
            cost: -cost,
        });
    };
    for (i, &a) in supply.iter().enumerate() {
        add(&mut edges, s, i, a, 0.0);
    }
    let mut cell_edge = vec![0usize; c * l];
    for i in 0..c {
        for j in 0..l {
            cell_edge[i * l + j] = edges.len();
            add(&mut edges, i, c + j, d as i64, cst.data()[i * l + j]);
        }
    }
    for (j, &b) in demand.iter().enumerate() {
        add(&mut edges, c + j, t, b, 0.0);
    }

    let mut remaining = d as i64;
    while remaining > 0 {
        let mut dist = vec![f64::INFINITY; n];
        let mut prev: Vec<Option<usize>> = vec![None; n];
        dist[s] = 0.0;
        for _ in 0..n {
            let mut changed = false;
            for u in 0..n {
                if dist[u].is_infinite() {
                    continue;
                }
                for &e in &adj[u] {
                    let edge = &edges[e];
                    if edge.cap > 0 && dist[u] + edge.cost < dist[edge.to] - 1e-12 {
                        dist[edge.to] = dist[u] + edge.cost;
                        prev[edge.to] = Some(e);
                        changed = true;
                    }
                }
            }
            if !changed {
                break;
            }
        }
        if dist[t].is_infinite() {
            return Err(Error::Numeric("min-cost flow: no augmenting path".into()));
        }
        let mut push = remaining;
        let mut v = t;
        while let Some(e) = prev[v] {
            push = push.min(edges[e].cap);
            v = edges[e ^ 1].to;
        }
        let mut v = t;
        while let Some(e) = prev[v] {
            edges[e].cap -= push;
            edges[e ^ 1].cap += push;
            v = edges[e ^ 1].to;
        }
        remaining -= push;
    }

    let plan = Tensor::from_fn(&[c, l], |idx| {
        edges[cell_edge[idx] ^ 1].cap as f64 / d as f64
    });
    let cost = dot(plan.data(), cst.data());
    Ok((plan, cost))
}
