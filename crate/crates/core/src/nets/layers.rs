use rand::Rng;

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

fn fan_in_std(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// `y = x W^T + b` on `[B, in]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, inp: usize, out: usize, rng: &mut R) -> Self {
        Self {
            w: store.add_randn(format!("{name}.w"), &[out, inp], fan_in_std(inp), rng),
            b: store.add_zeros(format!("{name}.b"), &[out]),
        }
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        for id in [self.w, self.b] {
            let s = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&s);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul_t(x, w, false, true);
        g.add_bcast_row(y, b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        k: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add_randn(format!("{name}.w"), &[out, inp, k, k], fan_in_std(inp * k * k), rng),
            b: store.add_zeros(format!("{name}.b"), &[out]),
            stride: 1,
            pad: k / 2,
        }
    }

    pub fn zero_init(&self, store: &mut ParamStore) {
        for id in [self.w, self.b] {
            let s = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&s);
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Largest divisor of `channels` not exceeding `max_groups`.
pub fn norm_groups(channels: usize, max_groups: usize) -> usize {
    (1..=max_groups.min(channels).max(1))
        .rev()
        .find(|g| channels % g == 0)
        .unwrap_or(1)
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, max_groups: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: store.add_zeros(format!("{name}.beta"), &[channels]),
            groups: norm_groups(channels, max_groups),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, gamma, beta, self.groups)
    }
}

/// Residual block: `skip(x) + conv(act(norm(conv(act(norm(x))) + shift(t))))`.
#[derive(Clone, Debug)]
pub struct ResBlock {
    pub n1: Norm,
    pub c1: Conv,
    pub time: Option<Linear>,
    pub n2: Norm,
    pub c2: Conv,
    pub skip: Option<Conv>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        inp: usize,
        out: usize,
        temb_dim: Option<usize>,
        max_groups: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            n1: Norm::new(store, &format!("{name}.n1"), inp, max_groups),
            c1: Conv::new(store, &format!("{name}.c1"), inp, out, 3, rng),
            time: temb_dim.map(|e| Linear::new(store, &format!("{name}.t"), e, out, rng)),
            n2: Norm::new(store, &format!("{name}.n2"), out, max_groups),
            c2: Conv::new(store, &format!("{name}.c2"), out, out, 3, rng),
            skip: (inp != out).then(|| Conv::new(store, &format!("{name}.skip"), inp, out, 1, rng)),
        }
    }

    /// `temb: [B, E]` when the block is time-modulated.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, temb: Option<Var>) -> Var {
        let h = self.n1.forward(g, store, x);
        let h = g.silu(h);
        let mut h = self.c1.forward(g, store, h);
        if let (Some(lin), Some(t)) = (&self.time, temb) {
            let shift = lin.forward(g, store, t);
            h = g.add_channel(h, shift);
        }
        let h = self.n2.forward(g, store, h);
        let h = g.silu(h);
        let h = self.c2.forward(g, store, h);
        let s = match &self.skip {
            Some(c) => c.forward(g, store, x),
            None => x,
        };
        g.add(s, h)
    }
}

/// Sinusoidal features `[sin(t w_j), cos(t w_j)]`, `w_j = 10000^(-j/half)`.
pub fn sinusoid(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let w = 10000f64.powf(-(j as f64) / half as f64);
        out[j] = (t * w).sin();
        out[half + j] = (t * w).cos();
    }
    out
}

/// Sinusoidal step features followed by a two-layer MLP.
#[derive(Clone, Copy, Debug)]
pub struct TimeEmbed {
    pub sin_dim: usize,
    pub l1: Linear,
    pub l2: Linear,
}

impl TimeEmbed {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, sin_dim: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            sin_dim,
            l1: Linear::new(store, &format!("{name}.l1"), sin_dim, dim, rng),
            l2: Linear::new(store, &format!("{name}.l2"), dim, dim, rng),
        }
    }

    /// `[B, E]` for the steps `ts`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, ts: &[usize]) -> Var {
        let data: Vec<f64> = ts.iter().flat_map(|&t| sinusoid(t as f64, self.sin_dim)).collect();
        let x = g.input(Tensor::new(&[ts.len(), self.sin_dim], data));
        let h = self.l1.forward(g, store, x);
        let h = g.silu(h);
        self.l2.forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_params, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sinusoid_at_zero() {
        let s = sinusoid(0.0, 8);
        assert_eq!(s, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn time_embedding_distinct_and_deterministic() {
        let mut store = ParamStore::new();
        let te = TimeEmbed::new(&mut store, "gen.temb", 16, 8, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let a = te.forward(&mut g, &store, &[1, 2, 3, 4, 5]);
        let b = te.forward(&mut g, &store, &[1, 2, 3, 4, 5]);
        assert_eq!(g.value(a), g.value(b));
        let v = g.value(a).clone();
        for i in 0..5 {
            for j in i + 1..5 {
                let d: f64 = (0..8)
                    .map(|k| (v.data()[i * 8 + k] - v.data()[j * 8 + k]).powi(2))
                    .sum();
                assert!(d > 1e-8);
            }
        }
        for i in 1..=5 {
            for j in i + 1..=5 {
                assert_ne!(sinusoid(i as f64, 16), sinusoid(j as f64, 16));
            }
        }
    }

    #[test]
    fn norm_group_choice() {
        assert_eq!(norm_groups(16, 8), 8);
        assert_eq!(norm_groups(12, 8), 6);
        assert_eq!(norm_groups(3, 8), 3);
        assert_eq!(norm_groups(7, 4), 1);
    }

    #[test]
    fn res_block_gradcheck() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let blk = ResBlock::new(&mut store, "gen.b", 2, 4, Some(3), 2, &mut rng);
        let x = Tensor::randn(&[2, 2, 4, 4], 1.0, &mut rng);
        let t = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let probe = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng);
        let ids: Vec<ParamId> = store.ids().collect();
        let r = check_params(
            &store,
            &ids,
            |g, s| {
                let xi = g.input(x.clone());
                let ti = g.input(t.clone());
                let y = blk.forward(g, s, xi, Some(ti));
                let p = g.input(probe.clone());
                let y = g.mul(y, p);
                g.sum_all(y)
            },
            GradCheck::default(),
        );
        assert!(r.passed(), "{r:?}");
    }
}
