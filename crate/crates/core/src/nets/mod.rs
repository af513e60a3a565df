//! Generator, discriminator and the multi-modal conditional encoder.

mod layers;

pub use layers::{norm_groups, sinusoid, Conv, Linear, Norm, ResBlock, TimeEmbed};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::omta::{CaLevel, OmtaLevel, OtConfig, SolveInfo};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const GEN_LEVELS: usize = 4;
pub const DISC_LEVELS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    /// Generator (and image-branch) channels per level.
    pub gen_channels: Vec<usize>,
    pub disc_channels: Vec<usize>,
    pub blocks_per_level: usize,
    pub norm_groups: usize,
    pub temb_sin_dim: usize,
    pub temb_dim: usize,
    /// Channels of the broadcast text map in concatenation conditioning.
    pub text_concat_channels: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            gen_channels: vec![16, 32, 64, 64],
            disc_channels: vec![16, 32, 64, 64, 64],
            blocks_per_level: 2,
            norm_groups: 8,
            temb_sin_dim: 32,
            temb_dim: 64,
            text_concat_channels: 4,
        }
    }
}

impl NetConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.gen_channels.len() != GEN_LEVELS {
            return bad(format!("gen_channels needs {GEN_LEVELS} entries"));
        }
        if self.disc_channels.len() != DISC_LEVELS {
            return bad(format!("disc_channels needs {DISC_LEVELS} entries"));
        }
        if self.gen_channels.iter().chain(&self.disc_channels).any(|c| *c == 0) {
            return bad("channel counts must be positive".into());
        }
        if self.blocks_per_level == 0 || self.norm_groups == 0 {
            return bad("blocks_per_level and norm_groups must be positive".into());
        }
        if self.temb_sin_dim < 2 || self.temb_sin_dim % 2 != 0 || self.temb_dim == 0 {
            return bad("temb_sin_dim must be even and >= 2, temb_dim positive".into());
        }
        if image_size < 16 || !image_size.is_power_of_two() {
            return bad(format!("image size {image_size} must be a power of two >= 16"));
        }
        Ok(())
    }
}

/// Spatial side of generator level `i` (0-based).
pub fn level_side(image_size: usize, level: usize) -> usize {
    image_size >> level
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GenHead {
    /// `tanh`, predicts the clean image in `[-1, 1]`.
    Tanh,
    /// Identity, used for noise prediction.
    Linear,
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub temb: TimeEmbed,
    pub input: Conv,
    pub enc: Vec<Vec<ResBlock>>,
    pub dec: Vec<Vec<ResBlock>>,
    pub out_norm: Norm,
    pub out_conv: Conv,
    pub head: GenHead,
    pub channels: Vec<usize>,
}

pub struct GenOutput {
    /// `[B, 1, H, W]`.
    pub y: Var,
    /// Final decoder features `[B, C1, H, W]` before the output projection.
    pub features: Var,
}

fn level_blocks<R: Rng>(
    store: &mut ParamStore,
    name: &str,
    inp: usize,
    out: usize,
    n: usize,
    temb: Option<usize>,
    groups: usize,
    rng: &mut R,
) -> Vec<ResBlock> {
    (0..n)
        .map(|b| {
            let i = if b == 0 { inp } else { out };
            ResBlock::new(store, &format!("{name}.b{b}"), i, out, temb, groups, rng)
        })
        .collect()
}

fn run_blocks(
    g: &mut Graph,
    store: &ParamStore,
    blocks: &[ResBlock],
    mut h: Var,
    temb: Option<Var>,
) -> Var {
    for b in blocks {
        h = b.forward(g, store, h, temb);
    }
    h
}

impl Generator {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &NetConfig, head: GenHead, rng: &mut R) -> Self {
        let ch = &cfg.gen_channels;
        let e = Some(cfg.temb_dim);
        let n = cfg.blocks_per_level;
        let temb = TimeEmbed::new(store, "gen.temb", cfg.temb_sin_dim, cfg.temb_dim, rng);
        let input = Conv::new(store, "gen.in", 1, ch[0], 3, rng);
        let enc = (0..GEN_LEVELS)
            .map(|i| {
                let inp = if i == 0 { ch[0] } else { ch[i - 1] };
                level_blocks(store, &format!("gen.enc{i}"), inp, ch[i], n, e, cfg.norm_groups, rng)
            })
            .collect();
        let dec = (0..GEN_LEVELS)
            .map(|i| {
                let inp = if i == GEN_LEVELS - 1 { ch[i] } else { ch[i + 1] + ch[i] };
                level_blocks(store, &format!("gen.dec{i}"), inp, ch[i], n, e, cfg.norm_groups, rng)
            })
            .collect();
        let out_norm = Norm::new(store, "gen.out_norm", ch[0], cfg.norm_groups);
        let out_conv = Conv::new(store, "gen.out", ch[0], 1, 3, rng);
        Self {
            temb,
            input,
            enc,
            dec,
            out_norm,
            out_conv,
            head,
            channels: ch.clone(),
        }
    }

    /// `y_t: [B, 1, H, W]`, `ts[b]` the step of sample `b`, `cond` the
    /// per-level conditioning added to the encoder outputs.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y_t: Var,
        ts: &[usize],
        cond: &[Var],
    ) -> Result<GenOutput> {
        let s = g.shape(y_t).to_vec();
        if s.len() != 4 || s[1] != 1 || s[0] != ts.len() {
            return Err(Error::Shape(format!(
                "generator input {s:?} with {} steps",
                ts.len()
            )));
        }
        if cond.len() != GEN_LEVELS {
            return Err(Error::Shape(format!(
                "conditioning has {} levels, expected {GEN_LEVELS}",
                cond.len()
            )));
        }
        for (i, &c) in cond.iter().enumerate() {
            let want = [s[0], self.channels[i], s[2] >> i, s[3] >> i];
            if g.shape(c) != want {
                return Err(Error::Shape(format!(
                    "conditioning level {} is {:?}, expected {want:?}",
                    i + 1,
                    g.shape(c)
                )));
            }
        }
        let temb = self.temb.forward(g, store, ts);
        let mut h = self.input.forward(g, store, y_t);
        let mut skips = Vec::with_capacity(GEN_LEVELS);
        for (i, blocks) in self.enc.iter().enumerate() {
            h = run_blocks(g, store, blocks, h, Some(temb));
            h = g.add(h, cond[i]);
            skips.push(h);
            if i + 1 < GEN_LEVELS {
                h = g.avg_pool2(h);
            }
        }
        for i in (0..GEN_LEVELS).rev() {
            if i + 1 < GEN_LEVELS {
                let up = g.upsample2(h);
                h = g.concat(&[up, skips[i]], 1);
            }
            h = run_blocks(g, store, &self.dec[i], h, Some(temb));
        }
        let features = h;
        let o = self.out_norm.forward(g, store, h);
        let o = g.silu(o);
        let o = self.out_conv.forward(g, store, o);
        let y = match self.head {
            GenHead::Tanh => g.tanh(o),
            GenHead::Linear => o,
        };
        Ok(GenOutput { y, features })
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub temb: TimeEmbed,
    pub input: Conv,
    pub levels: Vec<Vec<ResBlock>>,
    pub out: Linear,
}

impl Discriminator {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &NetConfig, rng: &mut R) -> Self {
        let ch = &cfg.disc_channels;
        let e = Some(cfg.temb_dim);
        let temb = TimeEmbed::new(store, "disc.temb", cfg.temb_sin_dim, cfg.temb_dim, rng);
        let input = Conv::new(store, "disc.in", 2, ch[0], 3, rng);
        let levels = (0..DISC_LEVELS)
            .map(|i| {
                let inp = if i == 0 { ch[0] } else { ch[i - 1] };
                level_blocks(
                    store,
                    &format!("disc.l{i}"),
                    inp,
                    ch[i],
                    cfg.blocks_per_level,
                    e,
                    cfg.norm_groups,
                    rng,
                )
            })
            .collect();
        let out = Linear::new(store, "disc.out", ch[DISC_LEVELS - 1], 1, rng);
        Self {
            temb,
            input,
            levels,
            out,
        }
    }

    /// Logits `[B, 1]` for the pair `(y_prev, y_t)` at steps `ts`.
    pub fn logits(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y_prev: Var,
        y_t: Var,
        ts: &[usize],
    ) -> Result<Var> {
        if g.shape(y_prev) != g.shape(y_t) {
            return Err(Error::Shape(format!(
                "discriminator pair {:?} vs {:?}",
                g.shape(y_prev),
                g.shape(y_t)
            )));
        }
        let temb = self.temb.forward(g, store, ts);
        let x = g.concat(&[y_prev, y_t], 1);
        let mut h = self.input.forward(g, store, x);
        for (i, blocks) in self.levels.iter().enumerate() {
            h = run_blocks(g, store, blocks, h, Some(temb));
            if i + 1 < DISC_LEVELS {
                h = g.avg_pool2(h);
            }
        }
        let pooled = g.mean_spatial(h);
        Ok(self.out.forward(g, store, pooled))
    }

    /// Probabilities `[B, 1]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y_prev: Var,
        y_t: Var,
        ts: &[usize],
    ) -> Result<Var> {
        let l = self.logits(g, store, y_prev, y_t, ts)?;
        Ok(g.sigmoid(l))
    }
}

/// How the tabular prompt enters the conditioning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CondMode {
    /// Image branch only.
    Image,
    /// Pooled prompt broadcast as extra input channels of the image branch.
    Concat,
    Omta,
    Ca,
}

/// Conditional encoder: image branch plus the configured text fusion.
#[derive(Clone, Debug)]
pub struct McEncoder {
    pub mode: CondMode,
    pub input: Conv,
    pub levels: Vec<Vec<ResBlock>>,
    pub text_concat: Option<Linear>,
    pub omta: Vec<OmtaLevel>,
    pub ca: Vec<CaLevel>,
    pub channels: Vec<usize>,
}

impl McEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: &NetConfig,
        mode: CondMode,
        image_size: usize,
        text_dim: usize,
        tokens: usize,
        d_k: usize,
        rng: &mut R,
    ) -> Self {
        let ch = &cfg.gen_channels;
        let extra = if mode == CondMode::Concat {
            cfg.text_concat_channels
        } else {
            0
        };
        let input = Conv::new(store, "branch.in", 1 + extra, ch[0], 3, rng);
        let levels = (0..GEN_LEVELS)
            .map(|i| {
                let inp = if i == 0 { ch[0] } else { ch[i - 1] };
                level_blocks(
                    store,
                    &format!("branch.l{i}"),
                    inp,
                    ch[i],
                    cfg.blocks_per_level,
                    None,
                    cfg.norm_groups,
                    rng,
                )
            })
            .collect();
        let text_concat = (mode == CondMode::Concat)
            .then(|| Linear::new(store, "tab.concat", text_dim, cfg.text_concat_channels, rng));
        let pixels = |i: usize| level_side(image_size, i).pow(2);
        let omta = if mode == CondMode::Omta {
            (0..GEN_LEVELS)
                .map(|i| OmtaLevel::new(store, i + 1, ch[i], pixels(i), text_dim, tokens, d_k, rng))
                .collect()
        } else {
            Vec::new()
        };
        let ca = if mode == CondMode::Ca {
            (0..GEN_LEVELS)
                .map(|i| CaLevel::new(store, i + 1, ch[i], pixels(i), text_dim, tokens, d_k, rng))
                .collect()
        } else {
            Vec::new()
        };
        Self {
            mode,
            input,
            levels,
            text_concat,
            omta,
            ca,
            channels: ch.clone(),
        }
    }

    /// Image-branch features `v_1..v_4` of `x: [B, 1(+k), H, W]`.
    pub fn branch(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Vec<Var> {
        let mut h = self.input.forward(g, store, x);
        let mut out = Vec::with_capacity(GEN_LEVELS);
        for (i, blocks) in self.levels.iter().enumerate() {
            h = run_blocks(g, store, blocks, h, None);
            out.push(h);
            if i + 1 < GEN_LEVELS {
                h = g.avg_pool2(h);
            }
        }
        out
    }

    /// Conditioning stack `x_cnd^1..x_cnd^4` from `x_l: [B, 1, H, W]` and
    /// `p_tb: [B, d, L]` (required unless the mode is image-only).
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x_l: Var,
        p_tb: Option<Var>,
        ot: &OtConfig,
    ) -> Result<(Vec<Var>, Vec<SolveInfo>)> {
        let need_text = self.mode != CondMode::Image;
        let p_tb = match (need_text, p_tb) {
            (true, None) => {
                return Err(Error::Shape("text conditioning requires p_tb".into()));
            }
            (_, p) => p,
        };
        let x = match (self.mode, &self.text_concat) {
            (CondMode::Concat, Some(lin)) => {
                let p = p_tb.unwrap();
                let s = g.shape(x_l).to_vec();
                let l = g.shape(p)[2];
                let pooled = g.sum_last(p);
                let pooled = g.scale(pooled, 1.0 / l as f64);
                let feat = lin.forward(g, store, pooled);
                let k = g.shape(feat)[1];
                let zeros = g.input(Tensor::zeros(&[s[0], k, s[2], s[3]]));
                let map = g.add_channel(zeros, feat);
                g.concat(&[x_l, map], 1)
            }
            _ => x_l,
        };
        let v = self.branch(g, store, x);
        let mut infos = Vec::new();
        let stack = match self.mode {
            CondMode::Image | CondMode::Concat => v,
            CondMode::Omta => {
                let p = p_tb.unwrap();
                v.iter()
                    .zip(&self.omta)
                    .map(|(&vi, lvl)| {
                        let (x, info) = lvl.forward(g, store, vi, p, ot);
                        infos.push(info);
                        x
                    })
                    .collect()
            }
            CondMode::Ca => {
                let p = p_tb.unwrap();
                v.iter()
                    .zip(&self.ca)
                    .map(|(&vi, lvl)| lvl.forward(g, store, vi, p))
                    .collect()
            }
        };
        Ok((stack, infos))
    }

    pub fn fuse_ids(&self) -> Vec<ParamId> {
        self.omta
            .iter()
            .map(|l| l.fuse)
            .chain(self.ca.iter().map(|l| l.fuse))
            .flat_map(|f| f.ids())
            .collect()
    }
}
