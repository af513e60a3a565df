//! Masked-text reconstruction from the semantic embedding of the denoised
//! prediction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Which tensor the semantic embedding is pooled from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticSource {
    /// Final generator feature map (`C1` channels).
    Features,
    /// The single-channel predicted image (one scalar per sample).
    Image,
}

/// Global average pooling `[B, C, H, W]` to `[B, C]`.
pub fn pool_semantics(g: &mut Graph, x: Var) -> Var {
    g.mean_spatial(x)
}

/// Per-column decoder of `[P_M ; proj(z)]` back to token embeddings.
#[derive(Clone, Copy, Debug)]
pub struct Reconstructor {
    pub z_proj: ParamId,
    pub z_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Reconstructor {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        z_dim: usize,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let s = |n: usize| 1.0 / (n as f64).sqrt();
        Self {
            z_proj: store.add_randn("rec.z_proj", &[dim, z_dim], s(z_dim), rng),
            z_bias: store.add_zeros("rec.z_b", &[dim]),
            w1: store.add_randn("rec.w1", &[hidden, 2 * dim], s(2 * dim), rng),
            b1: store.add_zeros("rec.b1", &[hidden]),
            w2: store.add_randn("rec.w2", &[dim, hidden], s(hidden), rng),
            b2: store.add_zeros("rec.b2", &[dim]),
        }
    }

    pub fn zero_output(&self, store: &mut ParamStore) {
        for id in [self.w2, self.b2] {
            let s = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::zeros(&s);
        }
    }

    /// `p_m: [B, d, L]`, `z: [B, C_z]`; returns `[B, d, L]`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, p_m: Var, z: Var) -> Var {
        let s = g.shape(p_m).to_vec();
        let zp = g.param(store, self.z_proj);
        let zb = g.param(store, self.z_bias);
        let zd = g.matmul_t(z, zp, false, true);
        let zd = g.add_bcast_row(zd, zb);
        let zeros = g.input(Tensor::zeros(&s));
        let zmap = g.add_bcast_last(zeros, zd);
        let cat = g.concat(&[p_m, zmap], 1);
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let h = g.matmul(w1, cat);
        let h = g.add_channel(h, b1);
        let h = g.silu(h);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let out = g.matmul(w2, h);
        g.add_channel(out, b2)
    }
}

/// Mean over masked positions of `1 - cos(P_T[:, l], recon[:, l])`.
pub fn text_loss(g: &mut Graph, p_t: Var, recon: Var, mask_positions: &[Vec<usize>]) -> Var {
    g.cosine_loss(p_t, recon, mask_positions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, check_params, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn pooling_cases() {
        let mut g = Graph::new();
        let k = g.input(Tensor::full(&[1, 3, 4, 4], 0.7));
        let p = pool_semantics(&mut g, k);
        assert!(g.value(p).data().iter().all(|v| (v - 0.7).abs() < 1e-15));

        let f = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng(0));
        let h = Tensor::randn(&[2, 3, 4, 5], 1.0, &mut rng(1));
        let (a, b) = (1.5, -0.25);
        let fi = g.input(f.clone());
        let hi = g.input(h.clone());
        let mix = g.input(f.zip_map(&h, |x, y| a * x + b * y));
        let (pf, ph, pm) = (
            pool_semantics(&mut g, fi),
            pool_semantics(&mut g, hi),
            pool_semantics(&mut g, mix),
        );
        let lin = g.value(pf).zip_map(g.value(ph), |x, y| a * x + b * y);
        assert!(lin.max_abs_diff(g.value(pm)) < 1e-12);

        let pf = g.value(pf).clone();
        for bi in 0..2 {
            for c in 0..3 {
                let mut s = 0.0;
                for y in 0..4 {
                    for x in 0..5 {
                        s += f.data()[((bi * 3 + c) * 4 + y) * 5 + x];
                    }
                }
                assert!((pf.data()[bi * 3 + c] - s / 20.0).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut store = ParamStore::new();
        let r = Reconstructor::new(&mut store, 4, 6, 8, &mut rng(2));
        r.zero_output(&mut store);
        let mut g = Graph::new();
        let pm = g.input(Tensor::randn(&[2, 6, 16], 1.0, &mut rng(3)));
        let z = g.input(Tensor::randn(&[2, 4], 1.0, &mut rng(4)));
        let out = r.forward(&mut g, &store, pm, z);
        assert_eq!(g.shape(out), &[2, 6, 16]);
        assert_eq!(g.value(out).max_abs(), 0.0);
    }

    #[test]
    fn loss_extremes() {
        let pt = Tensor::randn(&[1, 5, 6], 1.0, &mut rng(5));
        let pos = vec![vec![1, 3, 4]];
        let mut g = Graph::new();
        let a = g.input(pt.clone());
        let b = g.input(pt.clone());
        let l = text_loss(&mut g, a, b, &pos);
        assert!(g.value(l).item().abs() < 1e-12);
        let n = g.input(pt.scale(-1.0));
        let l = text_loss(&mut g, a, n, &pos);
        assert!((g.value(l).item() - 2.0).abs() < 1e-12);
        // Positive rescaling of a compared column leaves the loss unchanged.
        let r = Tensor::randn(&[1, 5, 6], 1.0, &mut rng(6));
        let rs = Tensor::from_fn(&[1, 5, 6], |i| r.data()[i] * if i % 6 == 3 { 7.0 } else { 1.0 });
        let (ri, rsi) = (g.input(r), g.input(rs));
        let l1 = text_loss(&mut g, a, ri, &pos);
        let l2 = text_loss(&mut g, a, rsi, &pos);
        assert!((g.value(l1).item() - g.value(l2).item()).abs() < 1e-12);
        // Zero column counts as orthogonal.
        let z = g.input(Tensor::zeros(&[1, 5, 6]));
        let l = text_loss(&mut g, a, z, &pos);
        assert_eq!(g.value(l).item(), 1.0);
    }

    #[test]
    fn random_unit_columns_average_one() {
        let mut r = rng(7);
        let n = 10_000;
        let d = 32;
        let mut total = 0.0;
        for _ in 0..n {
            let a: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
            let b: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
            let mut g = Graph::new();
            let ai = g.input(Tensor::new(&[1, d, 1], a));
            let bi = g.input(Tensor::new(&[1, d, 1], b));
            let l = text_loss(&mut g, ai, bi, &[vec![0]]);
            let v = g.value(l).item();
            assert!((0.0..=2.0).contains(&v));
            total += v;
        }
        assert!((total / n as f64 - 1.0).abs() <= 0.02);
    }

    #[test]
    fn reconstructor_gradcheck() {
        let mut store = ParamStore::new();
        let r = Reconstructor::new(&mut store, 3, 4, 5, &mut rng(8));
        let pt = Tensor::randn(&[2, 4, 6], 1.0, &mut rng(9));
        let pm = Tensor::randn(&[2, 4, 6], 1.0, &mut rng(10));
        let z = Tensor::randn(&[2, 3], 1.0, &mut rng(11));
        let pos = vec![vec![0, 2], vec![1, 5]];
        let ids: Vec<ParamId> = store.ids().collect();
        let rep = check_params(
            &store,
            &ids,
            |g, s| {
                let (a, b, c) = (g.input(pt.clone()), g.input(pm.clone()), g.input(z.clone()));
                let out = r.forward(g, s, b, c);
                text_loss(g, a, out, &pos)
            },
            GradCheck::default(),
        );
        assert!(rep.passed(), "{rep:?}");
        let rep = check_inputs(
            &[pt.clone(), pm.clone(), z.clone()],
            |g, v| {
                let out = r.forward(g, &store, v[1], v[2]);
                text_loss(g, v[0], out, &pos)
            },
            GradCheck::default(),
        );
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn gradient_reaches_z() {
        let mut store = ParamStore::new();
        let r = Reconstructor::new(&mut store, 3, 4, 5, &mut rng(12));
        let mut g = Graph::new();
        let pt = g.input(Tensor::randn(&[1, 4, 6], 1.0, &mut rng(13)));
        let pm = g.input(Tensor::randn(&[1, 4, 6], 1.0, &mut rng(14)));
        let z = g.input_with_grad(Tensor::randn(&[1, 3], 1.0, &mut rng(15)));
        let out = r.forward(&mut g, &store, pm, z);
        let l = text_loss(&mut g, pt, out, &[vec![3]]);
        let grads = g.backward(l);
        assert!(grads.wrt(z).unwrap().max_abs() > 0.0);
    }
}
