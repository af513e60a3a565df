//! Transport co-attention between image features and tabular tokens, and the
//! conventional cross-attention alternative.

mod solver;

pub use solver::{
    exact_ot_oracle, marginal_violation, sinkhorn, sinkhorn_annealed, uniform, TransportPlan,
    ORACLE_MAX_DENOM, ORACLE_MAX_DIM,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OtGrad {
    /// Backpropagate through every Sinkhorn iteration.
    Unrolled,
    /// Treat the plan as a constant.
    Detached,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OtConfig {
    pub eps: f64,
    pub max_iters: usize,
    pub tol: f64,
    pub grad: OtGrad,
    /// Dimension of the shared cost space.
    pub d_k: usize,
}

impl Default for OtConfig {
    fn default() -> Self {
        Self {
            eps: 0.05,
            max_iters: 50,
            tol: 1e-6,
            grad: OtGrad::Unrolled,
            d_k: 16,
        }
    }
}

/// Solver diagnostics from a batched tape solve.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SolveInfo {
    pub iterations: usize,
    pub converged: bool,
    pub max_violation: f64,
}

/// `[C, H, W]` to `[C, H*W]`, row-major.
pub fn flatten_feature(v: &Tensor) -> Tensor {
    let s = v.shape();
    v.clone().reshape(&[s[0], s[1..].iter().product()])
}

/// Batched `[B, C, H, W]` to `[B, C, H*W]` on the tape.
pub fn flatten_var(g: &mut Graph, v: Var) -> Var {
    let s = g.shape(v).to_vec();
    g.reshape(v, &[s[0], s[1], s[2] * s[3]])
}

fn std_for(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// Learned maps of channel rows `[M]` and token columns `[C]` into `R^{d_k}`.
#[derive(Clone, Copy, Debug)]
pub struct CostProjection {
    pub a: ParamId,
    pub b: ParamId,
}

impl CostProjection {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        pixels: usize,
        d_k: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            a: store.add_randn(format!("{prefix}.cost_a"), &[d_k, pixels], std_for(pixels), rng),
            b: store.add_randn(format!("{prefix}.cost_b"), &[d_k, channels], std_for(channels), rng),
        }
    }

    /// Mapped channel descriptors `[B, C, d_k]` and token descriptors `[B, L, d_k]`.
    pub fn descriptors(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        v_flat: Var,
        p_proj: Var,
    ) -> (Var, Var) {
        let a = g.param(store, self.a);
        let b = g.param(store, self.b);
        let x = g.matmul_t(v_flat, a, false, true);
        let pt = g.transpose_last2(p_proj);
        let y = g.matmul_t(pt, b, false, true);
        (x, y)
    }

    /// `cst[b, c, l] = |x[b, c] - y[b, l]|_2`, `[B, C, L]`.
    pub fn cost_matrix(&self, g: &mut Graph, store: &ParamStore, v_flat: Var, p_proj: Var) -> Var {
        let (x, y) = self.descriptors(g, store, v_flat, p_proj);
        pairwise_distance(g, x, y)
    }
}

/// Euclidean distances between the rows of `x: [B, C, k]` and `y: [B, L, k]`.
pub fn pairwise_distance(g: &mut Graph, x: Var, y: Var) -> Var {
    let xx = g.square(x);
    let xx = g.sum_last(xx);
    let yy = g.square(y);
    let yy = g.sum_last(yy);
    let xy = g.matmul_t(x, y, false, true);
    let d2 = g.scale(xy, -2.0);
    let d2 = g.add_bcast_last(d2, xx);
    let d2 = g.add_bcast_row(d2, yy);
    let d2 = g.clamp(d2, 0.0, f64::INFINITY);
    g.sqrt(d2)
}

/// Batched log-domain Sinkhorn with uniform marginals, unrolled on the tape.
///
/// `cst: [B, C, L]`; returns the plan `[B, C, L]` (mass 1 per sample).
pub fn sinkhorn_tape(g: &mut Graph, cst: Var, cfg: &OtConfig) -> (Var, SolveInfo) {
    let cst = match cfg.grad {
        OtGrad::Unrolled => cst,
        OtGrad::Detached => g.detach(cst),
    };
    let s = g.shape(cst).to_vec();
    let (b, c, l) = (s[0], s[1], s[2]);
    let (ln_c, ln_l) = ((c as f64).ln(), (l as f64).ln());
    let logk = g.scale(cst, -1.0 / cfg.eps);
    let logk_t = g.transpose_last2(logk);
    let mut v = g.input(Tensor::zeros(&[b, l]));
    let mut u;
    let mut info = SolveInfo::default();
    loop {
        let t = g.add_bcast_row(logk, v);
        let lse = g.lse_last(t);
        let neg = g.scale(lse, -1.0);
        u = g.offset(neg, -ln_c);
        let t = g.add_bcast_row(logk_t, u);
        let lse = g.lse_last(t);
        let neg = g.scale(lse, -1.0);
        v = g.offset(neg, -ln_l);
        info.iterations += 1;

        let (kv, uv, vv) = (g.value(logk).data(), g.value(u).data(), g.value(v).data());
        let mut worst: f64 = 0.0;
        for bi in 0..b {
            for i in 0..c {
                let row: f64 = (0..l)
                    .map(|j| (kv[(bi * c + i) * l + j] + uv[bi * c + i] + vv[bi * l + j]).exp())
                    .sum();
                worst = worst.max((row - 1.0 / c as f64).abs());
            }
        }
        info.max_violation = worst;
        if worst <= cfg.tol {
            info.converged = true;
            break;
        }
        if info.iterations >= cfg.max_iters.max(1) {
            break;
        }
    }
    let lo = g.add_bcast_last(logk, u);
    let lo = g.add_bcast_row(lo, v);
    (g.exp(lo), info)
}

/// `plan^T v_flat`: `[B, C, L]` x `[B, C, M]` to `[B, L, M]`.
pub fn co_attend(g: &mut Graph, plan: Var, v_flat: Var) -> Var {
    g.matmul_t(plan, v_flat, true, false)
}

/// Projects `v_hat` back to channels, concatenates with the image feature and
/// mixes with a 1x1 projection.
#[derive(Clone, Copy, Debug)]
pub struct Fuse {
    /// `[C, L]`, token to channel map.
    pub wf: ParamId,
    /// `[C, 2C]`, 1x1 projection over `[projected v_hat ; v_flat]`.
    pub mix: ParamId,
    pub bias: ParamId,
}

impl Fuse {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        channels: usize,
        tokens: usize,
        rng: &mut R,
    ) -> Self {
        let wf = store.add_randn(format!("{prefix}.fuse_w"), &[channels, tokens], std_for(tokens), rng);
        // Identity on the image half so an untrained fuse passes features through.
        let mut mix = Tensor::randn(&[channels, 2 * channels], 0.1 * std_for(channels), rng);
        for c in 0..channels {
            for k in 0..channels {
                mix.data_mut()[c * 2 * channels + channels + k] = if c == k { 1.0 } else { 0.0 };
            }
        }
        let mix = store.add(format!("{prefix}.fuse_mix"), mix);
        let bias = store.add_zeros(format!("{prefix}.fuse_b"), &[channels]);
        Self { wf, mix, bias }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        vec![self.wf, self.mix, self.bias]
    }

    /// Sets every parameter to the exact pass-through `[0 | I]`.
    pub fn set_pass_through(&self, store: &mut ParamStore) {
        let c = store.get(self.bias).numel();
        *store.get_mut(self.wf) = Tensor::zeros(store.get(self.wf).shape());
        *store.get_mut(self.bias) = Tensor::zeros(&[c]);
        *store.get_mut(self.mix) = Tensor::from_fn(&[c, 2 * c], |idx| {
            let (r, k) = (idx / (2 * c), idx % (2 * c));
            if k == c + r {
                1.0
            } else {
                0.0
            }
        });
    }

    /// `v_hat: [B, L, M]`, `v_flat: [B, C, M]`; returns `[B, C, H, W]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        v_hat: Var,
        v_flat: Var,
        h: usize,
        w: usize,
    ) -> Var {
        let s = g.shape(v_flat).to_vec();
        let wf = g.param(store, self.wf);
        let proj = g.matmul(wf, v_hat);
        let cat = g.concat(&[proj, v_flat], 1);
        let mix = g.param(store, self.mix);
        let out = g.matmul(mix, cat);
        let out = g.reshape(out, &[s[0], s[1], h, w]);
        let bias = g.param(store, self.bias);
        g.add_channel(out, bias)
    }
}

/// Linear projection of `p_tb: [B, d, L]` to `[B, C, L]`.
#[derive(Clone, Copy, Debug)]
pub struct TokenProjection {
    pub w: ParamId,
}

impl TokenProjection {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, channels: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            w: store.add_randn(format!("{prefix}.tok_proj"), &[channels, dim], std_for(dim), rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, p_tb: Var) -> Var {
        let w = g.param(store, self.w);
        g.matmul(w, p_tb)
    }
}

/// One level of transport co-attention.
#[derive(Clone, Copy, Debug)]
pub struct OmtaLevel {
    pub proj: TokenProjection,
    pub cost: CostProjection,
    pub fuse: Fuse,
}

impl OmtaLevel {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        level: usize,
        channels: usize,
        pixels: usize,
        dim: usize,
        tokens: usize,
        d_k: usize,
        rng: &mut R,
    ) -> Self {
        let prefix = format!("omta.l{level}");
        Self {
            proj: TokenProjection::new(store, &prefix, channels, dim, rng),
            cost: CostProjection::new(store, &prefix, channels, pixels, d_k, rng),
            fuse: Fuse::new(store, &prefix, channels, tokens, rng),
        }
    }

    /// `v: [B, C, H, W]`, `p_tb: [B, d, L]`; returns `x_cnd` with `v`'s shape.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        v: Var,
        p_tb: Var,
        cfg: &OtConfig,
    ) -> (Var, SolveInfo) {
        let s = g.shape(v).to_vec();
        let v_flat = flatten_var(g, v);
        let p_proj = self.proj.forward(g, store, p_tb);
        let cst = self.cost.cost_matrix(g, store, v_flat, p_proj);
        let (plan, info) = sinkhorn_tape(g, cst, cfg);
        let v_hat = co_attend(g, plan, v_flat);
        (self.fuse.forward(g, store, v_hat, v_flat, s[2], s[3]), info)
    }
}

/// Row-wise `softmax(q k^T / sqrt(d_k))`: `[B, C, d_k]`, `[B, L, d_k]` to `[B, C, L]`.
pub fn attention_weights(g: &mut Graph, q: Var, k: Var) -> Var {
    let d_k = *g.shape(q).last().unwrap();
    let logits = g.matmul_t(q, k, false, true);
    let logits = g.scale(logits, 1.0 / (d_k as f64).sqrt());
    let lse = g.lse_last(logits);
    let neg = g.scale(lse, -1.0);
    let shifted = g.add_bcast_last(logits, neg);
    g.exp(shifted)
}

/// One level of conventional single-head cross-attention.
///
/// Queries come from channel descriptors, keys from token descriptors; the
/// row-stochastic weights divided by `C` take the place of the transport plan
/// in the shared fuse path.
#[derive(Clone, Copy, Debug)]
pub struct CaLevel {
    pub proj: TokenProjection,
    pub qk: CostProjection,
    pub fuse: Fuse,
}

impl CaLevel {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        level: usize,
        channels: usize,
        pixels: usize,
        dim: usize,
        tokens: usize,
        d_k: usize,
        rng: &mut R,
    ) -> Self {
        let prefix = format!("ca.l{level}");
        Self {
            proj: TokenProjection::new(store, &prefix, channels, dim, rng),
            qk: CostProjection::new(store, &prefix, channels, pixels, d_k, rng),
            fuse: Fuse::new(store, &prefix, channels, tokens, rng),
        }
    }

    /// Attention weights `[B, C, L]`.
    pub fn weights(&self, g: &mut Graph, store: &ParamStore, v_flat: Var, p_tb: Var) -> Var {
        let p_proj = self.proj.forward(g, store, p_tb);
        let (q, k) = self.qk.descriptors(g, store, v_flat, p_proj);
        attention_weights(g, q, k)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, v: Var, p_tb: Var) -> Var {
        let s = g.shape(v).to_vec();
        let v_flat = flatten_var(g, v);
        let a = self.weights(g, store, v_flat, p_tb);
        let plan = g.scale(a, 1.0 / s[1] as f64);
        let v_hat = co_attend(g, plan, v_flat);
        self.fuse.forward(g, store, v_hat, v_flat, s[2], s[3])
    }
}
