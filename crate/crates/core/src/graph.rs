//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse and accumulates adjoints. Parameters are bound
//! lazily from a [`ParamStore`], so parameters that never enter a forward pass
//! receive no gradient at all.

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Sqrt,
    Square,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    Clamp(Var, f64, f64),
    ScaleBatch(Var, Vec<f64>),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    },
    AvgPool2(Var),
    Upsample2(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    AddChannel(Var, Var),
    Concat(Vec<Var>, usize),
    Reshape(Var),
    TransposeLast2(Var),
    SumAll(Var),
    SumLast(Var),
    LseLast(Var),
    AddBcastLast(Var, Var),
    AddBcastRow(Var, Var),
    AddBcastLead(Var, Var),
    GatherRows(Var, Vec<usize>),
    CosineLoss {
        a: Var,
        b: Var,
        positions: Vec<Vec<usize>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`] for leaves and parameters.
pub struct Grads {
    nodes: Vec<Option<Tensor>>,
    params: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.index()).and_then(Option::as_ref)
    }

    /// Gradients indexed by [`ParamId`], as consumed by the optimizer.
    pub fn into_params(self) -> Vec<Option<Tensor>> {
        self.params
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
    frozen: Vec<bool>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Marks parameters as constants: they are bound without gradient tracking.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        for id in ids {
            let i = id.index();
            if self.frozen.len() <= i {
                self.frozen.resize(i + 1, false);
            }
            self.frozen[i] = true;
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is reported by [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Copies the value of `v` into a fresh constant (stops gradients).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let i = id.index();
        if self.bound.len() <= i {
            self.bound.resize(i + 1, None);
        }
        if let Some(v) = self.bound[i] {
            return v;
        }
        let frozen = self.frozen.get(i).copied().unwrap_or(false);
        let value = store.get(id).clone();
        let v = if frozen {
            self.push(value, Op::Leaf, false)
        } else {
            self.push(value, Op::Param(id), true)
        };
        self.bound[i] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        self.push(t, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|x| x + c);
        let ng = self.ng(a);
        self.push(t, Op::Offset(a), ng)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Silu => |x| x / (1.0 + (-x).exp()),
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Abs => f64::abs,
            Unary::Sqrt => f64::sqrt,
            Unary::Square => |x| x * x,
        };
        let t = self.value(a).map(f);
        let ng = self.ng(a);
        self.push(t, Op::Unary(a, kind), ng)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let t = self.value(a).map(|x| x.clamp(lo, hi));
        let ng = self.ng(a);
        self.push(t, Op::Clamp(a, lo, hi), ng)
    }

    /// Multiplies slice `i` along the leading axis by `coeffs[i]`.
    pub fn scale_batch(&mut self, a: Var, coeffs: Vec<f64>) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape()[0], coeffs.len(), "scale_batch length");
        let inner = x.numel() / coeffs.len();
        let mut t = x.clone();
        for (chunk, c) in t.data_mut().chunks_mut(inner).zip(&coeffs) {
            for v in chunk {
                *v *= c;
            }
        }
        let ng = self.ng(a);
        self.push(t, Op::ScaleBatch(a, coeffs), ng)
    }

    /// (Batched) matrix product `op(a) * op(b)`.
    ///
    /// Operands are 2-D `[m, k]` or 3-D `[batch, m, k]`; a 2-D operand is
    /// broadcast across the batch of the other.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let dims = MatDims::new(self.shape(a), self.shape(b), ta, tb);
        let mut out = vec![0.0; dims.batch * dims.m * dims.n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for bi in 0..dims.batch {
            gemm(
                dims.m,
                dims.k,
                dims.n,
                dims.a_slice(av, bi),
                ta,
                dims.b_slice(bv, bi),
                tb,
                0.0,
                &mut out[bi * dims.m * dims.n..(bi + 1) * dims.m * dims.n],
            );
        }
        let shape = dims.out_shape();
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, out), Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// 2-D convolution of `x: [B, Ci, H, W]` with `w: [Co, Ci, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let g = ConvGeom::new(self.shape(x), self.shape(w), stride, pad);
        let col = im2col(self.value(x).data(), &g);
        let cols = g.batch * g.ho * g.wo;
        let mut tmp = vec![0.0; g.co * cols];
        gemm(
            g.co,
            g.ci * g.k * g.k,
            cols,
            self.value(w).data(),
            false,
            &col,
            false,
            0.0,
            &mut tmp,
        );
        let hw = g.ho * g.wo;
        let mut out = vec![0.0; g.batch * g.co * hw];
        let bias = b.map(|b| self.value(b).data().to_vec());
        for bi in 0..g.batch {
            for co in 0..g.co {
                let src = &tmp[co * cols + bi * hw..co * cols + (bi + 1) * hw];
                let dst = &mut out[(bi * g.co + co) * hw..(bi * g.co + co + 1) * hw];
                let bv = bias.as_ref().map_or(0.0, |b| b[co]);
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        self.push(
            Tensor::new(&[g.batch, g.co, g.ho, g.wo], out),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            },
            ng,
        )
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, h, w) = (s[0] * s[1], s[2], s[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial dims");
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * ho * wo];
        for c in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = c * h * w + 2 * oy * w + 2 * ox;
                    out[(c * ho + oy) * wo + ox] =
                        0.25 * (xv[base] + xv[base + 1] + xv[base + w] + xv[base + w + 1]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(&[s[0], s[1], ho, wo], out),
            Op::AvgPool2(x),
            ng,
        )
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let (n, h, w) = (s[0] * s[1], s[2], s[3]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; n * 4 * h * w];
        for c in 0..n {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[(c * 2 * h + y) * 2 * w + xx] = xv[(c * h + y / 2) * w + xx / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(
            Tensor::new(&[s[0], s[1], 2 * h, 2 * w], out),
            Op::Upsample2(x),
            ng,
        )
    }

    /// Group normalization over `[B, C, ...]` with per-channel affine.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        const EPS: f64 = 1e-5;
        let s = self.shape(x).to_vec();
        let (b, c) = (s[0], s[1]);
        assert!(c % groups == 0, "channels {c} not divisible by {groups} groups");
        let spatial: usize = s[2..].iter().product();
        let cg = c / groups;
        let gsize = cg * spatial;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0; xv.len()];
        let mut means = Vec::with_capacity(b * groups);
        let mut rstds = Vec::with_capacity(b * groups);
        for bi in 0..b {
            for gi in 0..groups {
                let off = (bi * c + gi * cg) * spatial;
                let chunk = &xv[off..off + gsize];
                let mean = chunk.iter().sum::<f64>() / gsize as f64;
                let var = chunk.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / gsize as f64;
                let rstd = 1.0 / (var + EPS).sqrt();
                for cc in 0..cg {
                    let ch = gi * cg + cc;
                    for p in 0..spatial {
                        let idx = off + cc * spatial + p;
                        out[idx] = (xv[idx] - mean) * rstd * gv[ch] + bv[ch];
                    }
                }
                means.push(mean);
                rstds.push(rstd);
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            Tensor::new(&s, out),
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean: means,
                rstd: rstds,
            },
            ng,
        )
    }

    /// `x: [B, C, ...]` plus a per-channel `[C]` or per-sample `[B, C]` shift.
    pub fn add_channel(&mut self, x: Var, s: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        let (b, c) = (xs[0], xs[1]);
        let per_sample = match ss.as_slice() {
            [cc] if *cc == c => false,
            [bb, cc] if *bb == b && *cc == c => true,
            _ => panic!("add_channel: shift shape {ss:?} incompatible with {xs:?}"),
        };
        let inner: usize = xs[2..].iter().product();
        let mut t = self.value(x).clone();
        let sv = self.value(s).data();
        for bi in 0..b {
            for ci in 0..c {
                let shift = if per_sample { sv[bi * c + ci] } else { sv[ci] };
                let off = (bi * c + ci) * inner;
                for v in &mut t.data_mut()[off..off + inner] {
                    *v += shift;
                }
            }
        }
        let ng = self.ng(x) || self.ng(s);
        self.push(t, Op::AddChannel(x, s), ng)
    }

    pub fn concat(&mut self, vars: &[Var], axis: usize) -> Var {
        assert!(!vars.is_empty());
        let first = self.shape(vars[0]).to_vec();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut total = 0;
        for &v in vars {
            let s = self.shape(v);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (x, y)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || x == y, "concat shape mismatch {s:?} vs {first:?}");
            }
            total += s[axis];
        }
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in vars {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let ng = vars.iter().any(|&v| self.ng(v));
        self.push(Tensor::new(&shape, out), Op::Concat(vars.to_vec(), axis), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape);
        let ng = self.ng(x);
        self.push(t, Op::Reshape(x), ng)
    }

    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let t = transpose_last2(self.value(x));
        let ng = self.ng(x);
        self.push(t, Op::TransposeLast2(x), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(t, Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let n = *s.last().unwrap();
        let out: Vec<f64> = self.value(x).data().chunks(n).map(|c| c.iter().sum()).collect();
        let ng = self.ng(x);
        self.push(Tensor::new(&s[..s.len() - 1], out), Op::SumLast(x), ng)
    }

    /// Spatial mean of `[B, C, H, W]`, giving `[B, C]`.
    pub fn mean_spatial(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let hw: usize = s[2..].iter().product();
        let r = self.reshape(x, &[s[0], s[1], hw]);
        let sum = self.sum_last(r);
        self.scale(sum, 1.0 / hw as f64)
    }

    /// Log-sum-exp over the last axis, dropping it.
    pub fn lse_last(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let n = *s.last().unwrap();
        let out: Vec<f64> = self.value(x).data().chunks(n).map(logsumexp).collect();
        let ng = self.ng(x);
        self.push(Tensor::new(&s[..s.len() - 1], out), Op::LseLast(x), ng)
    }

    /// `x[..., i, j] + v[..., i]`.
    pub fn add_bcast_last(&mut self, x: Var, v: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(self.shape(v), &s[..s.len() - 1], "add_bcast_last shape");
        let n = *s.last().unwrap();
        let mut t = self.value(x).clone();
        let vv = self.value(v).data();
        for (chunk, add) in t.data_mut().chunks_mut(n).zip(vv) {
            for e in chunk {
                *e += add;
            }
        }
        let ng = self.ng(x) || self.ng(v);
        self.push(t, Op::AddBcastLast(x, v), ng)
    }

    /// `x[..., i, j] + v[..., j]`.
    pub fn add_bcast_row(&mut self, x: Var, v: Var) -> Var {
        let s = self.shape(x).to_vec();
        let nd = s.len();
        let mut vs = s[..nd - 2].to_vec();
        vs.push(s[nd - 1]);
        assert_eq!(self.shape(v), vs.as_slice(), "add_bcast_row shape");
        let (r, c) = (s[nd - 2], s[nd - 1]);
        let mut t = self.value(x).clone();
        let vv = self.value(v).data();
        for (bi, block) in t.data_mut().chunks_mut(r * c).enumerate() {
            let row = &vv[bi * c..(bi + 1) * c];
            for chunk in block.chunks_mut(c) {
                for (e, a) in chunk.iter_mut().zip(row) {
                    *e += a;
                }
            }
        }
        let ng = self.ng(x) || self.ng(v);
        self.push(t, Op::AddBcastRow(x, v), ng)
    }

    /// `x[b, ...] + v[...]`.
    pub fn add_bcast_lead(&mut self, x: Var, v: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(self.shape(v), &s[1..], "add_bcast_lead shape");
        let inner = self.value(v).numel();
        let mut t = self.value(x).clone();
        let vv = self.value(v).data();
        for chunk in t.data_mut().chunks_mut(inner) {
            for (e, a) in chunk.iter_mut().zip(vv) {
                *e += a;
            }
        }
        let ng = self.ng(x) || self.ng(v);
        self.push(t, Op::AddBcastLead(x, v), ng)
    }

    /// Row lookup `table[ids[i], :]`, giving `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let s = self.shape(table).to_vec();
        let d = s[1];
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < s[0], "row {i} out of range for table of {} rows", s[0]);
            out.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let ng = self.ng(table);
        self.push(
            Tensor::new(&[ids.len(), d], out),
            Op::GatherRows(table, ids.to_vec()),
            ng,
        )
    }

    /// Mean over the selected columns of `1 - cos(a[b, :, l], r[b, :, l])`.
    ///
    /// `a`, `r` are `[B, d, L]`; `positions[b]` lists the compared columns of
    /// sample `b`. A zero-norm column contributes a constant loss of 1.
    pub fn cosine_loss(&mut self, a: Var, r: Var, positions: &[Vec<usize>]) -> Var {
        let s = self.shape(a).to_vec();
        assert_eq!(self.shape(r), s.as_slice());
        assert_eq!(s[0], positions.len());
        let (d, l) = (s[1], s[2]);
        let (av, rv) = (self.value(a).data(), self.value(r).data());
        let mut total = 0.0;
        let mut count = 0usize;
        for (bi, pos) in positions.iter().enumerate() {
            for &p in pos {
                let (dot, na, nr) = column_stats(av, rv, bi, d, l, p);
                total += if na == 0.0 || nr == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nr)
                };
                count += 1;
            }
        }
        assert!(count > 0, "cosine_loss needs at least one position");
        let ng = self.ng(a) || self.ng(r);
        self.push(
            Tensor::scalar(total / count as f64),
            Op::CosineLoss {
                a,
                b: r,
                positions: positions.to_vec(),
            },
            ng,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.value(loss).numel(), 1, "backward from non-scalar");
        let n = loss.0 + 1;
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let mut params: Vec<Option<Tensor>> = Vec::new();
        grads[loss.0] = Some(Tensor::ones(self.value(loss).shape()));
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            match &node.op {
                Op::Leaf => continue,
                Op::Param(id) => {
                    if let Some(g) = grads[i].take() {
                        if params.len() <= id.index() {
                            params.resize(id.index() + 1, None);
                        }
                        params[id.index()] = Some(g.clone());
                        grads[i] = Some(g);
                    }
                    continue;
                }
                _ => {}
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        Grads {
            nodes: grads,
            params,
        }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.ng(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn backprop(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.scale(*s)),
            Op::Offset(a) => self.acc(grads, *a, g.clone()),
            Op::Unary(a, kind) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut d = g.clone();
                let dd = d.data_mut();
                let (xv, yv) = (x.data(), y.data());
                for k in 0..dd.len() {
                    let (xi, yi) = (xv[k], yv[k]);
                    let local = match kind {
                        Unary::Silu => {
                            let s = sigmoid(xi);
                            s * (1.0 + xi * (1.0 - s))
                        }
                        Unary::Tanh => 1.0 - yi * yi,
                        Unary::Sigmoid => yi * (1.0 - yi),
                        Unary::Exp => yi,
                        Unary::Log => 1.0 / xi,
                        Unary::Abs => {
                            if xi > 0.0 {
                                1.0
                            } else if xi < 0.0 {
                                -1.0
                            } else {
                                0.0
                            }
                        }
                        Unary::Sqrt => {
                            if yi > 0.0 {
                                0.5 / yi
                            } else {
                                0.0
                            }
                        }
                        Unary::Square => 2.0 * xi,
                    };
                    dd[k] *= local;
                }
                self.acc(grads, *a, d);
            }
            Op::Clamp(a, lo, hi) => {
                let x = self.value(*a);
                let d = g.zip_map(x, |gi, xi| if xi >= *lo && xi <= *hi { gi } else { 0.0 });
                self.acc(grads, *a, d);
            }
            Op::ScaleBatch(a, coeffs) => {
                let inner = g.numel() / coeffs.len();
                let mut d = g.clone();
                for (chunk, c) in d.data_mut().chunks_mut(inner).zip(coeffs) {
                    for v in chunk {
                        *v *= c;
                    }
                }
                self.acc(grads, *a, d);
            }
            Op::MatMul { a, b, ta, tb } => self.backprop_matmul(*a, *b, *ta, *tb, g, grads),
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
            } => self.backprop_conv(*x, *w, *b, *stride, *pad, g, grads),
            Op::AvgPool2(x) => {
                if !self.ng(*x) {
                    return;
                }
                let s = self.shape(*x);
                let (n, h, w) = (s[0] * s[1], s[2], s[3]);
                let (ho, wo) = (h / 2, w / 2);
                let gv = g.data();
                let mut d = vec![0.0; n * h * w];
                for c in 0..n {
                    for y in 0..h {
                        for xx in 0..w {
                            d[(c * h + y) * w + xx] = 0.25 * gv[(c * ho + y / 2) * wo + xx / 2];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(s, d));
            }
            Op::Upsample2(x) => {
                if !self.ng(*x) {
                    return;
                }
                let s = self.shape(*x);
                let (n, h, w) = (s[0] * s[1], s[2], s[3]);
                let gv = g.data();
                let mut d = vec![0.0; n * h * w];
                for c in 0..n {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            d[(c * h + y / 2) * w + xx / 2] += gv[(c * 2 * h + y) * 2 * w + xx];
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(s, d));
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let s = self.shape(*x);
                let (b, c) = (s[0], s[1]);
                let spatial: usize = s[2..].iter().product();
                let cg = c / groups;
                let gsize = (cg * spatial) as f64;
                let xv = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let gv = g.data();
                let mut dx = vec![0.0; xv.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for bi in 0..b {
                    for gi in 0..*groups {
                        let k = bi * groups + gi;
                        let (mu, rs) = (mean[k], rstd[k]);
                        let off = (bi * c + gi * cg) * spatial;
                        let mut sum_dxhat = 0.0;
                        let mut sum_dxhat_xhat = 0.0;
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            for p in 0..spatial {
                                let idx = off + cc * spatial + p;
                                let xhat = (xv[idx] - mu) * rs;
                                dgamma[ch] += gv[idx] * xhat;
                                dbeta[ch] += gv[idx];
                                let dxhat = gv[idx] * gam[ch];
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                        }
                        let m1 = sum_dxhat / gsize;
                        let m2 = sum_dxhat_xhat / gsize;
                        for cc in 0..cg {
                            let ch = gi * cg + cc;
                            for p in 0..spatial {
                                let idx = off + cc * spatial + p;
                                let xhat = (xv[idx] - mu) * rs;
                                let dxhat = gv[idx] * gam[ch];
                                dx[idx] = rs * (dxhat - m1 - xhat * m2);
                            }
                        }
                    }
                }
                self.acc(grads, *x, Tensor::new(s, dx));
                self.acc(grads, *gamma, Tensor::new(&[c], dgamma));
                self.acc(grads, *beta, Tensor::new(&[c], dbeta));
            }
            Op::AddChannel(x, sh) => {
                self.acc(grads, *x, g.clone());
                if self.ng(*sh) {
                    let xs = self.shape(*x);
                    let (b, c) = (xs[0], xs[1]);
                    let inner: usize = xs[2..].iter().product();
                    let per_sample = self.shape(*sh).len() == 2;
                    let mut d = vec![0.0; if per_sample { b * c } else { c }];
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * inner;
                            let s: f64 = g.data()[off..off + inner].iter().sum();
                            d[if per_sample { bi * c + ci } else { ci }] += s;
                        }
                    }
                    self.acc(grads, *sh, Tensor::new(self.shape(*sh), d));
                }
            }
            Op::Concat(vars, axis) => {
                let first = self.shape(vars[0]);
                let outer: usize = first[..*axis].iter().product();
                let inner: usize = first[axis + 1..].iter().product();
                let total: usize = vars.iter().map(|&v| self.shape(v)[*axis]).sum();
                let mut start = 0;
                for &v in vars {
                    let len = self.shape(v)[*axis] * inner;
                    if self.ng(v) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let base = o * total * inner + start;
                            d.extend_from_slice(&g.data()[base..base + len]);
                        }
                        self.acc(grads, v, Tensor::new(self.shape(v), d));
                    }
                    start += len;
                }
            }
            Op::Reshape(x) => {
                let d = g.clone().reshape(self.shape(*x));
                self.acc(grads, *x, d);
            }
            Op::TransposeLast2(x) => self.acc(grads, *x, transpose_last2(g)),
            Op::SumAll(x) => {
                let d = Tensor::full(self.shape(*x), g.item());
                self.acc(grads, *x, d);
            }
            Op::SumLast(x) => {
                let s = self.shape(*x);
                let n = *s.last().unwrap();
                let mut d = Vec::with_capacity(self.value(*x).numel());
                for &gv in g.data() {
                    d.extend(std::iter::repeat(gv).take(n));
                }
                self.acc(grads, *x, Tensor::new(s, d));
            }
            Op::LseLast(x) => {
                let xv = self.value(*x);
                let n = *xv.shape().last().unwrap();
                let mut d = Vec::with_capacity(xv.numel());
                for ((chunk, &lse), &gv) in xv.data().chunks(n).zip(node.value.data()).zip(g.data())
                {
                    d.extend(chunk.iter().map(|&v| gv * (v - lse).exp()));
                }
                self.acc(grads, *x, Tensor::new(xv.shape(), d));
            }
            Op::AddBcastLast(x, v) => {
                self.acc(grads, *x, g.clone());
                if self.ng(*v) {
                    let n = *g.shape().last().unwrap();
                    let d: Vec<f64> = g.data().chunks(n).map(|c| c.iter().sum()).collect();
                    self.acc(grads, *v, Tensor::new(self.shape(*v), d));
                }
            }
            Op::AddBcastRow(x, v) => {
                self.acc(grads, *x, g.clone());
                if self.ng(*v) {
                    let s = g.shape();
                    let nd = s.len();
                    let (r, c) = (s[nd - 2], s[nd - 1]);
                    let vs = self.shape(*v);
                    let mut d = vec![0.0; vs.iter().product()];
                    for (bi, block) in g.data().chunks(r * c).enumerate() {
                        let row = &mut d[bi * c..(bi + 1) * c];
                        for chunk in block.chunks(c) {
                            for (acc, e) in row.iter_mut().zip(chunk) {
                                *acc += e;
                            }
                        }
                    }
                    self.acc(grads, *v, Tensor::new(vs, d));
                }
            }
            Op::AddBcastLead(x, v) => {
                self.acc(grads, *x, g.clone());
                if self.ng(*v) {
                    let vs = self.shape(*v);
                    let inner: usize = vs.iter().product();
                    let mut d = vec![0.0; inner];
                    for chunk in g.data().chunks(inner) {
                        for (acc, e) in d.iter_mut().zip(chunk) {
                            *acc += e;
                        }
                    }
                    self.acc(grads, *v, Tensor::new(vs, d));
                }
            }
            Op::GatherRows(table, ids) => {
                if !self.ng(*table) {
                    return;
                }
                let s = self.shape(*table);
                let d_model = s[1];
                let mut d = vec![0.0; s[0] * d_model];
                for (row, &id) in ids.iter().enumerate() {
                    for k in 0..d_model {
                        d[id * d_model + k] += g.data()[row * d_model + k];
                    }
                }
                self.acc(grads, *table, Tensor::new(s, d));
            }
            Op::CosineLoss { a, b, positions } => {
                let s = self.shape(*a);
                let (d, l) = (s[1], s[2]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let count: usize = positions.iter().map(Vec::len).sum();
                let scale = g.item() / count as f64;
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for (bi, pos) in positions.iter().enumerate() {
                    for &p in pos {
                        let (dot, na, nb) = column_stats(av, bv, bi, d, l, p);
                        if na == 0.0 || nb == 0.0 {
                            continue;
                        }
                        let cos = dot / (na * nb);
                        for k in 0..d {
                            let idx = (bi * d + k) * l + p;
                            da[idx] -= scale * (bv[idx] / (na * nb) - cos * av[idx] / (na * na));
                            db[idx] -= scale * (av[idx] / (na * nb) - cos * bv[idx] / (nb * nb));
                        }
                    }
                }
                self.acc(grads, *a, Tensor::new(s, da));
                self.acc(grads, *b, Tensor::new(s, db));
            }
        }
    }

    fn backprop_matmul(
        &self,
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let dims = MatDims::new(self.shape(a), self.shape(b), ta, tb);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let gv = g.data();
        let (m, k, n) = (dims.m, dims.k, dims.n);
        if self.ng(a) {
            let mut d = vec![0.0; self.value(a).numel()];
            for bi in 0..dims.batch {
                let gs = &gv[bi * m * n..(bi + 1) * m * n];
                let bs = dims.b_slice(bv, bi);
                let (off, beta) = if dims.a_batched {
                    (bi * m * k, 0.0)
                } else {
                    (0, if bi == 0 { 0.0 } else { 1.0 })
                };
                let ds = &mut d[off..off + m * k];
                if ta {
                    gemm(k, n, m, bs, tb, gs, true, beta, ds);
                } else {
                    gemm(m, n, k, gs, false, bs, !tb, beta, ds);
                }
            }
            self.acc(grads, a, Tensor::new(self.shape(a), d));
        }
        if self.ng(b) {
            let mut d = vec![0.0; self.value(b).numel()];
            for bi in 0..dims.batch {
                let gs = &gv[bi * m * n..(bi + 1) * m * n];
                let as_ = dims.a_slice(av, bi);
                let (off, beta) = if dims.b_batched {
                    (bi * k * n, 0.0)
                } else {
                    (0, if bi == 0 { 0.0 } else { 1.0 })
                };
                let ds = &mut d[off..off + k * n];
                if tb {
                    gemm(n, m, k, gs, true, as_, ta, beta, ds);
                } else {
                    gemm(k, m, n, as_, !ta, gs, false, beta, ds);
                }
            }
            self.acc(grads, b, Tensor::new(self.shape(b), d));
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let geo = ConvGeom::new(self.shape(x), self.shape(w), stride, pad);
        let hw = geo.ho * geo.wo;
        let cols = geo.batch * hw;
        let kk = geo.ci * geo.k * geo.k;
        // [B, Co, HW] -> [Co, B*HW]
        let mut gp = vec![0.0; geo.co * cols];
        for bi in 0..geo.batch {
            for co in 0..geo.co {
                let src = &g.data()[(bi * geo.co + co) * hw..(bi * geo.co + co + 1) * hw];
                gp[co * cols + bi * hw..co * cols + (bi + 1) * hw].copy_from_slice(src);
            }
        }
        if let Some(bv) = b {
            if self.ng(bv) {
                let d: Vec<f64> = gp.chunks(cols).map(|c| c.iter().sum()).collect();
                self.acc(grads, bv, Tensor::new(&[geo.co], d));
            }
        }
        if self.ng(w) {
            let col = im2col(self.value(x).data(), &geo);
            let mut dw = vec![0.0; geo.co * kk];
            gemm(geo.co, cols, kk, &gp, false, &col, true, 0.0, &mut dw);
            self.acc(grads, w, Tensor::new(self.shape(w), dw));
        }
        if self.ng(x) {
            let mut dcol = vec![0.0; kk * cols];
            gemm(kk, geo.co, cols, self.value(w).data(), true, &gp, false, 0.0, &mut dcol);
            let dx = col2im(&dcol, &geo);
            self.acc(grads, x, Tensor::new(self.shape(x), dx));
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn column_stats(a: &[f64], b: &[f64], bi: usize, d: usize, l: usize, p: usize) -> (f64, f64, f64) {
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for k in 0..d {
        let idx = (bi * d + k) * l + p;
        dot += a[idx] * b[idx];
        na += a[idx] * a[idx];
        nb += b[idx] * b[idx];
    }
    (dot, na.sqrt(), nb.sqrt())
}

fn transpose_last2(t: &Tensor) -> Tensor {
    let s = t.shape();
    let nd = s.len();
    assert!(nd >= 2);
    let (r, c) = (s[nd - 2], s[nd - 1]);
    let mut out = vec![0.0; t.numel()];
    for (bi, block) in t.data().chunks(r * c).enumerate() {
        let dst = &mut out[bi * r * c..(bi + 1) * r * c];
        for i in 0..r {
            for j in 0..c {
                dst[j * r + i] = block[i * c + j];
            }
        }
    }
    let mut shape = s.to_vec();
    shape.swap(nd - 2, nd - 1);
    Tensor::new(&shape, out)
}

struct MatDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
}

impl MatDims {
    fn new(sa: &[usize], sb: &[usize], ta: bool, tb: bool) -> Self {
        let (ba, ra, ca) = split_mat(sa);
        let (bb, rb, cb) = split_mat(sb);
        let (m, ka) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        assert_eq!(ka, kb, "matmul inner dims {sa:?} x {sb:?} (ta={ta}, tb={tb})");
        let batch = match (ba, bb) {
            (Some(x), Some(y)) => {
                assert_eq!(x, y, "matmul batch mismatch");
                x
            }
            (Some(x), None) | (None, Some(x)) => x,
            (None, None) => 1,
        };
        Self {
            batch,
            m,
            k: ka,
            n,
            a_batched: ba.is_some(),
            b_batched: bb.is_some(),
        }
    }

    fn a_slice<'a>(&self, a: &'a [f64], bi: usize) -> &'a [f64] {
        let sz = self.m * self.k;
        if self.a_batched {
            &a[bi * sz..(bi + 1) * sz]
        } else {
            a
        }
    }

    fn b_slice<'a>(&self, b: &'a [f64], bi: usize) -> &'a [f64] {
        let sz = self.k * self.n;
        if self.b_batched {
            &b[bi * sz..(bi + 1) * sz]
        } else {
            b
        }
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.a_batched || self.b_batched {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }
}

fn split_mat(s: &[usize]) -> (Option<usize>, usize, usize) {
    match *s {
        [r, c] => (None, r, c),
        [b, r, c] => (Some(b), r, c),
        _ => panic!("matmul operand must be 2-D or 3-D, got {s:?}"),
    }
}

struct ConvGeom {
    batch: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(xs.len(), 4, "conv2d input must be [B, C, H, W], got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d kernel must be [Co, Ci, k, k], got {ws:?}");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch {xs:?} vs {ws:?}");
        assert_eq!(ws[2], ws[3]);
        let k = ws[2];
        let ho = (xs[2] + 2 * pad - k) / stride + 1;
        let wo = (xs[3] + 2 * pad - k) / stride + 1;
        Self {
            batch: xs[0],
            ci: xs[1],
            h: xs[2],
            w: xs[3],
            co: ws[0],
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let cols = g.batch * hw;
    let mut col = vec![0.0; g.ci * g.k * g.k * cols];
    for ci in 0..g.ci {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let src = &x[(b * g.ci + ci) * g.h * g.w..(b * g.ci + ci + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        let drow = &mut dst[b * hw + oy * g.wo..b * hw + (oy + 1) * g.wo];
                        for (ox, d) in drow.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src[iy * g.w + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let hw = g.ho * g.wo;
    let cols = g.batch * hw;
    let mut x = vec![0.0; g.batch * g.ci * g.h * g.w];
    for ci in 0..g.ci {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for b in 0..g.batch {
                    let base = (b * g.ci + ci) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let iy = iy as usize;
                        for ox in 0..g.wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                x[base + iy * g.w + ix as usize] += src[b * hw + oy * g.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_inputs, GradCheck};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    fn check(shapes: &[&[usize]], f: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut r = rng();
        let inputs: Vec<Tensor> = shapes.iter().map(|s| Tensor::randn(s, 1.0, &mut r)).collect();
        let report = check_inputs(&inputs, |g, vs| f(g, vs), GradCheck::default());
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn elementwise_ops_gradcheck() {
        check(&[&[3, 4], &[3, 4]], |g, v| {
            let a = g.add(v[0], v[1]);
            let m = g.mul(a, v[1]);
            let s = g.sub(m, v[0]);
            let t = g.tanh(s);
            let q = g.silu(t);
            let e = g.sigmoid(q);
            let sq = g.square(e);
            g.sum_all(sq)
        });
        check(&[&[5]], |g, v| {
            let e = g.exp(v[0]);
            let o = g.offset(e, 1.0);
            let l = g.log(o);
            let s = g.sqrt(o);
            let p = g.mul(l, s);
            g.mean_all(p)
        });
    }

    #[test]
    fn matmul_gradcheck_all_layouts() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let sa: Vec<usize> = if ta { vec![2, 4, 3] } else { vec![2, 3, 4] };
            let sb: Vec<usize> = if tb { vec![5, 4] } else { vec![4, 5] };
            check(&[&sa, &sb], |g, v| {
                let m = g.matmul_t(v[0], v[1], ta, tb);
                let s = g.square(m);
                g.sum_all(s)
            });
            let sb3: Vec<usize> = if tb { vec![2, 5, 4] } else { vec![2, 4, 5] };
            let sa2: Vec<usize> = if ta { vec![4, 3] } else { vec![3, 4] };
            check(&[&sa2, &sb3], |g, v| {
                let m = g.matmul_t(v[0], v[1], ta, tb);
                let s = g.square(m);
                g.sum_all(s)
            });
        }
    }

    #[test]
    fn conv_pool_norm_gradcheck() {
        check(&[&[2, 3, 6, 6], &[4, 3, 3, 3], &[4]], |g, v| {
            let c = g.conv2d(v[0], v[1], Some(v[2]), 1, 1);
            let s = g.square(c);
            g.sum_all(s)
        });
        check(&[&[2, 2, 6, 6], &[3, 2, 3, 3]], |g, v| {
            let c = g.conv2d(v[0], v[1], None, 2, 1);
            let s = g.square(c);
            g.sum_all(s)
        });
        check(&[&[2, 4, 4, 4], &[4], &[4]], |g, v| {
            let n = g.group_norm(v[0], v[1], v[2], 2);
            let p = g.avg_pool2(n);
            let u = g.upsample2(p);
            let w = g.mul(u, v[0]);
            g.sum_all(w)
        });
    }

    #[test]
    fn broadcast_and_reduction_gradcheck() {
        check(&[&[2, 3, 4], &[2, 3], &[2, 4], &[3, 4]], |g, v| {
            let a = g.add_bcast_last(v[0], v[1]);
            let b = g.add_bcast_row(a, v[2]);
            let c = g.add_bcast_lead(b, v[3]);
            let l = g.lse_last(c);
            let t = g.transpose_last2(c);
            let l2 = g.lse_last(t);
            let s1 = g.sum_all(l);
            let sq = g.square(l2);
            let s2 = g.sum_all(sq);
            g.add(s1, s2)
        });
        check(&[&[2, 3, 2, 2], &[3], &[2, 3]], |g, v| {
            let a = g.add_channel(v[0], v[1]);
            let b = g.add_channel(a, v[2]);
            let m = g.mean_spatial(b);
            let sq = g.square(m);
            let cat = g.concat(&[b, v[0]], 1);
            let r = g.reshape(cat, &[2, 24]);
            let sl = g.sum_last(r);
            let s1 = g.sum_all(sq);
            let s2 = g.sum_all(sl);
            let s3 = g.scale(s2, 0.3);
            g.add(s1, s3)
        });
    }

    #[test]
    fn gather_cosine_scale_batch_gradcheck() {
        check(&[&[5, 3]], |g, v| {
            let r = g.gather_rows(v[0], &[1, 4, 1, 0]);
            let s = g.square(r);
            g.sum_all(s)
        });
        check(&[&[2, 4, 3], &[2, 4, 3]], |g, v| {
            let sb = g.scale_batch(v[1], vec![0.5, -2.0]);
            g.cosine_loss(v[0], sb, &[vec![0, 2], vec![1]])
        });
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut g = Graph::new();
        let x = g.input_with_grad(Tensor::new(&[3], vec![-2.0, 0.5, 2.0]));
        let c = g.clamp(x, -1.0, 1.0);
        let s = g.sum_all(c);
        let grads = g.backward(s);
        assert_eq!(grads.wrt(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let a = store.add("a.w", Tensor::new(&[2], vec![1.0, 2.0]));
        let b = store.add("b.w", Tensor::new(&[2], vec![3.0, 4.0]));
        let mut g = Graph::new();
        g.freeze([b]);
        let va = g.param(&store, a);
        let vb = g.param(&store, b);
        let m = g.mul(va, vb);
        let s = g.sum_all(m);
        let grads = g.backward(s);
        assert_eq!(grads.param(a).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.param(b).is_none());
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut r = rng();
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut r);
        let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut r);
        let mut g = Graph::new();
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        let y = g.conv2d(xv, wv, None, 1, 1);
        let out = g.value(y);
        for co in 0..3 {
            for oy in 0..5 {
                for ox in 0..5 {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    s += x.data()[(ci * 5 + iy as usize) * 5 + ix as usize]
                                        * w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    let got = out.data()[(co * 5 + oy) * 5 + ox];
                    assert!((got - s).abs() < 1e-12);
                }
            }
        }
    }
}
