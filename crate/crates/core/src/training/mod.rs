//! Losses, model assembly, the adversarial training step and the epoch loop.

pub mod checkpoint;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, TrainMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::m3trec::{pool_semantics, text_loss, Reconstructor, SemanticSource};
use crate::nets::{CondMode, Discriminator, GenHead, Generator, McEncoder};
use crate::omta::SolveInfo;
use crate::params::{cosine_lr, Adam, ParamId, ParamStore};
use crate::phantom::Subject;
use crate::schedule::VarianceSchedule;
use crate::tabenc::{PromptBundle, TokenEmbedding, Vocabulary};
use crate::tensor::Tensor;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// RNG stream used for parameter initialization.
pub const INIT_STREAM: u64 = u64::MAX;
/// Base RNG stream of the per-epoch shuffles.
pub const SHUFFLE_STREAM: u64 = 1 << 40;

/// Seeded ChaCha8 on an explicit stream.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Mean absolute difference.
pub fn image_loss(y0: &Tensor, pred: &Tensor) -> Result<f64> {
    if y0.shape() != pred.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", y0.shape(), pred.shape())));
    }
    Ok(y0.zip_map(pred, |a, b| (a - b).abs()).mean())
}

fn check_prob(name: &str, p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Param(format!("{name} probability {p} outside [0, 1]")));
    }
    Ok(p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP))
}

/// Non-saturating split: `(-log d_real - log(1 - d_fake), -log d_fake)`.
pub fn adversarial_losses(d_real: f64, d_fake: f64) -> Result<(f64, f64)> {
    let r = check_prob("d_real", d_real)?;
    let f = check_prob("d_fake", d_fake)?;
    Ok((-r.ln() - (1.0 - f).ln(), -f.ln()))
}

/// `g_adv + lambda_img * l_img + lambda_text * l_text`.
pub fn total_generator_loss(g_adv: f64, l_img: f64, l_text: f64, lambda_img: f64, lambda_text: f64) -> f64 {
    g_adv + lambda_img * l_img + lambda_text * l_text
}

/// Tape L1 loss.
pub fn image_loss_var(g: &mut Graph, y0: Var, pred: Var) -> Var {
    let d = g.sub(pred, y0);
    let a = g.abs(d);
    g.mean_all(a)
}

fn neg_log_mean(g: &mut Graph, p: Var) -> Var {
    let p = g.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let l = g.log(p);
    let m = g.mean_all(l);
    g.scale(m, -1.0)
}

/// Batch mean of the discriminator loss.
pub fn d_loss_var(g: &mut Graph, d_real: Var, d_fake: Var) -> Var {
    let real = neg_log_mean(g, d_real);
    let neg = g.scale(d_fake, -1.0);
    let one_minus = g.offset(neg, 1.0);
    let fake = neg_log_mean(g, one_minus);
    g.add(real, fake)
}

/// Batch mean of `-log d_fake`.
pub fn g_adv_var(g: &mut Graph, d_fake: Var) -> Var {
    neg_log_mean(g, d_fake)
}

/// One training/evaluation item with images rescaled to `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    /// Standard-dose target `[1, H, W]`.
    pub y0: Tensor,
    /// Low-dose input `[1, H, W]`.
    pub x_l: Tensor,
    pub prompt: PromptBundle,
}

pub fn normalize(img: &Tensor) -> Tensor {
    img.map(|v| 2.0 * v - 1.0)
}

pub fn denormalize(img: &Tensor) -> Tensor {
    img.map(|v| (v + 1.0) / 2.0)
}

fn as_channel(img: &Tensor) -> Tensor {
    let s = img.shape();
    img.clone().reshape(&[1, s[0], s[1]])
}

pub fn prepare_samples(subjects: &[&Subject], vocab: &Vocabulary) -> Result<Vec<Sample>> {
    subjects
        .iter()
        .map(|s| {
            Ok(Sample {
                id: s.record.subject_id.clone(),
                y0: as_channel(&normalize(&s.spet)),
                x_l: as_channel(&normalize(&s.lpet)),
                prompt: PromptBundle::new(&s.record, vocab)?,
            })
        })
        .collect()
}

/// Stacks `[1, H, W]` items to `[B, 1, H, W]`.
pub fn stack_field(batch: &[&Sample], f: impl Fn(&Sample) -> &Tensor) -> Tensor {
    let items: Vec<Tensor> = batch.iter().map(|s| f(s).clone()).collect();
    Tensor::stack(&items)
}

/// Every network of one run, built according to the toggles. Disabled
/// modules own no parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub vocab: Vocabulary,
    pub schedule: VarianceSchedule,
    pub embed: Option<TokenEmbedding>,
    pub encoder: McEncoder,
    pub gen: Generator,
    pub disc: Option<Discriminator>,
    pub rec: Option<Reconstructor>,
}

impl Model {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream_rng(cfg.seeds.master, INIT_STREAM);
        let m = &cfg.model;
        let ph = &cfg.data.phantom;
        let tg = cfg.training.toggles;
        let vocab = Vocabulary::new(ph.age_range, ph.weight_range, m.bins, m.prompt_len)?;
        let schedule = cfg.schedule.build()?;
        let mut store = ParamStore::new();
        let embed = tg
            .uses_tokens()
            .then(|| TokenEmbedding::new(&mut store, &vocab, m.text_dim, &mut rng));
        let encoder = McEncoder::new(
            &mut store,
            &m.net,
            tg.cond_mode(),
            ph.grid_size,
            m.text_dim,
            m.prompt_len,
            cfg.omta.d_k,
            &mut rng,
        );
        let head = match cfg.training.mode {
            TrainMode::Mcad => GenHead::Tanh,
            TrainMode::Ddpm => GenHead::Linear,
        };
        let gen = Generator::new(&mut store, &m.net, head, &mut rng);
        let disc = tg.adv.then(|| Discriminator::new(&mut store, &m.net, &mut rng));
        let rec = tg.rec.then(|| {
            let z_dim = match m.semantic_source {
                SemanticSource::Features => m.net.gen_channels[0],
                SemanticSource::Image => 1,
            };
            Reconstructor::new(&mut store, z_dim, m.text_dim, m.rec_hidden, &mut rng)
        });
        Ok(Self {
            cfg: cfg.clone(),
            store,
            vocab,
            schedule,
            embed,
            encoder,
            gen,
            disc,
            rec,
        })
    }

    pub fn disc_ids(&self) -> Vec<ParamId> {
        self.store.group("disc")
    }

    /// Everything trained by the generator-side optimizer.
    pub fn gen_ids(&self) -> Vec<ParamId> {
        let d = self.disc_ids();
        self.store.ids().filter(|id| !d.contains(id)).collect()
    }

    /// Conditioning stack and the prompt embedding `P_T` (when tokens are used).
    pub fn condition(
        &self,
        g: &mut Graph,
        x_l: Var,
        tokens: &[Vec<usize>],
    ) -> Result<(Vec<Var>, Option<Var>, Vec<SolveInfo>)> {
        self.condition_in(&self.store, g, x_l, tokens)
    }

    /// [`Model::condition`] with an explicit parameter store.
    pub fn condition_in(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        x_l: Var,
        tokens: &[Vec<usize>],
    ) -> Result<(Vec<Var>, Option<Var>, Vec<SolveInfo>)> {
        let p_t = match (&self.embed, self.encoder.mode) {
            (Some(e), _) => Some(e.embed(g, store, tokens)?),
            (None, CondMode::Image) => None,
            (None, _) => return Err(Error::Config("text conditioning without embedding".into())),
        };
        let p_tb = if self.encoder.mode == CondMode::Image { None } else { p_t };
        let (stack, infos) = self.encoder.encode(g, store, x_l, p_tb, &self.cfg.omta)?;
        Ok((stack, p_t, infos))
    }

    /// Semantic embedding `z'_0` from a generator output.
    pub fn semantics(&self, g: &mut Graph, y: Var, features: Var) -> Var {
        match self.cfg.model.semantic_source {
            SemanticSource::Features => pool_semantics(g, features),
            SemanticSource::Image => pool_semantics(g, y),
        }
    }
}

/// Model plus optimizer state; the step counter doubles as the RNG position.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub opt_g: Adam,
    pub opt_d: Option<Adam>,
    /// Global step count so far.
    pub step: u64,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let model = Model::new(cfg)?;
        let adam = cfg.training.adam;
        let opt_g = Adam::new(adam, &model.store, model.gen_ids());
        let opt_d = model
            .disc
            .as_ref()
            .map(|_| Adam::new(adam, &model.store, model.disc_ids()));
        Ok(Self {
            model,
            opt_g,
            opt_d,
            step: 0,
            epoch: 0,
        })
    }

    pub fn cfg(&self) -> &RunConfig {
        &self.model.cfg
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub t_mean: f64,
    pub d_loss: f64,
    pub g_adv: f64,
    pub l_img: f64,
    pub l_text: f64,
    pub l_total: f64,
    pub lr_g: f64,
    pub lr_d: f64,
}

pub fn steps_per_epoch(n_train: usize, batch_size: usize) -> usize {
    n_train.div_ceil(batch_size)
}

fn randn_like<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn numeric_failure(step: u64, ts: &[usize], parts: &[(&str, f64)]) -> Error {
    let parts: Vec<String> = parts.iter().map(|(n, v)| format!("{n}={v}")).collect();
    Error::Numeric(format!(
        "non-finite loss at step {step} (t = {ts:?}): {}",
        parts.join(", ")
    ))
}

/// Draws the coupled real pair `(y_{t-1}, y_t)` for each element.
fn real_pairs<R: Rng>(
    sched: &VarianceSchedule,
    y0: &[Tensor],
    ts: &[usize],
    rng: &mut R,
) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
    let mut prev = Vec::with_capacity(y0.len());
    let mut cur = Vec::with_capacity(y0.len());
    for (y, &t) in y0.iter().zip(ts) {
        let yp = if t == 1 {
            y.clone()
        } else {
            sched.forward_marginal_sample(y, t - 1, &randn_like(y.shape(), rng))?
        };
        let yt = sched.forward_step_sample(&yp, t, &randn_like(y.shape(), rng))?;
        prev.push(yp);
        cur.push(yt);
    }
    Ok((prev, cur))
}

/// R1 surrogate whose parameter gradient approximates that of
/// `gamma / (2B) * ||grad_x D(x)||^2` by a central difference of `D` along
/// the detached input gradient. Returns the surrogate and the penalty value.
pub fn r1_surrogate(
    g: &mut Graph,
    disc: &Discriminator,
    store: &ParamStore,
    y_prev: &Tensor,
    y_t: &Tensor,
    ts: &[usize],
    gamma: f64,
) -> Result<Option<(Var, f64)>> {
    let mut gg = Graph::new();
    gg.freeze(store.group("disc"));
    let a = gg.input_with_grad(y_prev.clone());
    let b = gg.input_with_grad(y_t.clone());
    let l = disc.logits(&mut gg, store, a, b, ts)?;
    let s = gg.sum_all(l);
    let grads = gg.backward(s);
    let zeros = || Tensor::zeros(y_prev.shape());
    let va = grads.wrt(a).cloned().unwrap_or_else(zeros);
    let vb = grads.wrt(b).cloned().unwrap_or_else(zeros);
    let norm2: f64 = va.data().iter().chain(vb.data()).map(|v| v * v).sum();
    if norm2 == 0.0 {
        return Ok(None);
    }
    let batch = ts.len() as f64;
    let h = 1e-3 / norm2.sqrt();
    let shifted = |sign: f64, g: &mut Graph| -> Result<Var> {
        let pa = g.input(y_prev.zip_map(&va, |x, v| x + sign * h * v));
        let pb = g.input(y_t.zip_map(&vb, |x, v| x + sign * h * v));
        let l = disc.logits(g, store, pa, pb, ts)?;
        Ok(g.sum_all(l))
    };
    let plus = shifted(1.0, g)?;
    let minus = shifted(-1.0, g)?;
    let diff = g.sub(plus, minus);
    let term = g.scale(diff, gamma / (2.0 * h * batch));
    Ok(Some((term, gamma / (2.0 * batch) * norm2)))
}

/// One optimization step on `batch`; randomness comes from `(seed, step)`.
pub fn train_step(state: &mut TrainState, batch: &[&Sample], total_steps: u64) -> Result<StepLog> {
    if batch.is_empty() {
        return Err(Error::Param("empty batch".into()));
    }
    let cfg = state.cfg().clone();
    let mut rng = stream_rng(cfg.seeds.master, state.step);
    let log = match cfg.training.mode {
        TrainMode::Mcad => mcad_step(state, batch, total_steps, &mut rng)?,
        TrainMode::Ddpm => ddpm_step(state, batch, total_steps, &mut rng)?,
    };
    state.step += 1;
    Ok(log)
}

fn lrs(cfg: &RunConfig, step: u64, total: u64) -> (f64, f64) {
    (
        cosine_lr(cfg.training.lr_g, step, total),
        cosine_lr(cfg.training.lr_d, step, total),
    )
}

/// Random draws of one adversarial step.
#[derive(Clone, Debug)]
pub struct StepDraws {
    pub ts: Vec<usize>,
    pub y0: Tensor,
    pub y_prev: Tensor,
    pub y_t: Tensor,
    /// `ct * y_t + sd * noise`, the non-predicted part of the posterior draw.
    pub post_rest: Tensor,
    pub c0s: Vec<f64>,
}

pub fn draw_step<R: Rng>(sched: &VarianceSchedule, batch: &[&Sample], rng: &mut R) -> Result<StepDraws> {
    let ts: Vec<usize> = batch.iter().map(|_| rng.gen_range(1..=sched.steps())).collect();
    let y0s: Vec<Tensor> = batch.iter().map(|s| s.y0.clone()).collect();
    let (prev, cur) = real_pairs(sched, &y0s, &ts, rng)?;
    let mut c0s = Vec::with_capacity(ts.len());
    let mut rest = Vec::with_capacity(ts.len());
    for (b, &t) in ts.iter().enumerate() {
        let noise = randn_like(y0s[b].shape(), rng);
        let (c0, ct, var) = sched.posterior_coeffs(t)?;
        let sd = var.sqrt();
        c0s.push(c0);
        rest.push(cur[b].zip_map(&noise, |y, n| ct * y + sd * n));
    }
    Ok(StepDraws {
        ts,
        y0: Tensor::stack(&y0s),
        y_prev: Tensor::stack(&prev),
        y_t: Tensor::stack(&cur),
        post_rest: Tensor::stack(&rest),
        c0s,
    })
}

/// Generator-side tape of one step.
pub struct GenPass {
    pub y0_pred: Var,
    pub features: Var,
    pub fake_prev: Var,
    pub y_t: Var,
    pub p_t: Option<Var>,
}

pub fn gen_pass(
    model: &Model,
    store: &ParamStore,
    g: &mut Graph,
    batch: &[&Sample],
    d: &StepDraws,
) -> Result<GenPass> {
    let x_l = g.input(stack_field(batch, |s| &s.x_l));
    let tokens: Vec<Vec<usize>> = batch.iter().map(|s| s.prompt.tokens.clone()).collect();
    let (cond, p_t, _) = model.condition_in(store, g, x_l, &tokens)?;
    let y_t = g.input(d.y_t.clone());
    let out = model.gen.forward(g, store, y_t, &d.ts, &cond)?;
    let scaled = g.scale_batch(out.y, d.c0s.clone());
    let rest = g.input(d.post_rest.clone());
    let fake_prev = g.add(scaled, rest);
    Ok(GenPass {
        y0_pred: out.y,
        features: out.features,
        fake_prev,
        y_t,
        p_t,
    })
}

/// Loss components on the tape; disabled parts are `None`.
pub struct GenLosses {
    pub total: Var,
    pub g_adv: Option<Var>,
    pub l_img: Var,
    pub l_text: Option<Var>,
}

/// `g_adv + lambda_img * l_img + lambda_text * l_text`, built so the tape
/// value equals [`total_generator_loss`] of the component values exactly.
pub fn gen_objective(
    model: &Model,
    store: &ParamStore,
    g: &mut Graph,
    batch: &[&Sample],
    d: &StepDraws,
    pass: &GenPass,
) -> Result<GenLosses> {
    let tc = &model.cfg.training;
    let y0 = g.input(d.y0.clone());
    let l_img = image_loss_var(g, y0, pass.y0_pred);
    let mut total = g.scale(l_img, tc.lambda_img);
    let mut g_adv = None;
    if let Some(disc) = &model.disc {
        let d_fake = disc.forward(g, store, pass.fake_prev, pass.y_t, &d.ts)?;
        let adv = g_adv_var(g, d_fake);
        total = g.add(adv, total);
        g_adv = Some(adv);
    }
    let mut l_text = None;
    if let (Some(rec), Some(embed), Some(p_t)) = (&model.rec, &model.embed, pass.p_t) {
        let masked: Vec<Vec<usize>> = batch.iter().map(|s| s.prompt.masked_tokens.clone()).collect();
        let positions: Vec<Vec<usize>> = batch.iter().map(|s| s.prompt.mask_positions.clone()).collect();
        let p_m = embed.embed(g, store, &masked)?;
        let z = model.semantics(g, pass.y0_pred, pass.features);
        let recon = rec.forward(g, store, p_m, z);
        let lt = text_loss(g, p_t, recon, &positions);
        let weighted = g.scale(lt, tc.lambda_text);
        total = g.add(total, weighted);
        l_text = Some(lt);
    }
    Ok(GenLosses {
        total,
        g_adv,
        l_img,
        l_text,
    })
}

/// Generator objective at the draws of step `step`, without updating anything.
pub fn generator_loss(model: &Model, batch: &[&Sample], step: u64) -> Result<f64> {
    let mut rng = stream_rng(model.cfg.seeds.master, step);
    let d = draw_step(&model.schedule, batch, &mut rng)?;
    let mut g = Graph::new();
    g.freeze(model.store.ids());
    let pass = gen_pass(model, &model.store, &mut g, batch, &d)?;
    let l = gen_objective(model, &model.store, &mut g, batch, &d, &pass)?;
    Ok(g.value(l.total).item())
}

fn mcad_step(
    state: &mut TrainState,
    batch: &[&Sample],
    total_steps: u64,
    rng: &mut ChaCha8Rng,
) -> Result<StepLog> {
    let cfg = state.cfg().clone();
    let tc = &cfg.training;
    let (lr_g, lr_d) = lrs(&cfg, state.step, total_steps);
    let d = draw_step(&state.model.schedule, batch, rng)?;

    // Generator forward; the discriminator is bound later, frozen.
    let mut g = Graph::new();
    g.freeze(state.model.disc_ids());
    let pass = gen_pass(&state.model, &state.model.store, &mut g, batch, &d)?;

    // Discriminator update on real vs detached fake pairs.
    let mut d_loss = 0.0;
    if let (Some(disc), Some(opt_d)) = (&state.model.disc, state.opt_d.as_mut()) {
        let store = &state.model.store;
        let mut gd = Graph::new();
        let rp = gd.input(d.y_prev.clone());
        let rt = gd.input(d.y_t.clone());
        let fp = gd.input(g.value(pass.fake_prev).clone());
        let d_real = disc.forward(&mut gd, store, rp, rt, &d.ts)?;
        let d_fake = disc.forward(&mut gd, store, fp, rt, &d.ts)?;
        let adv = d_loss_var(&mut gd, d_real, d_fake);
        d_loss = gd.value(adv).item();
        let mut loss = adv;
        if tc.r1_gamma > 0.0 {
            if let Some((term, _)) = r1_surrogate(&mut gd, disc, store, &d.y_prev, &d.y_t, &d.ts, tc.r1_gamma)? {
                loss = gd.add(loss, term);
            }
        }
        if !d_loss.is_finite() || !gd.value(loss).item().is_finite() {
            return Err(numeric_failure(state.step, &d.ts, &[("d_loss", d_loss)]));
        }
        let grads = gd.backward(loss).into_params();
        opt_d.update(&mut state.model.store, &grads, lr_d);
    }

    // Generator-side objective against the updated discriminator.
    let model = &state.model;
    let losses = gen_objective(model, &model.store, &mut g, batch, &d, &pass)?;
    let value = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item());
    let g_adv = value(losses.g_adv);
    let l_text = value(losses.l_text);
    let l_img = g.value(losses.l_img).item();
    let l_total = g.value(losses.total).item();
    if !l_total.is_finite() {
        return Err(numeric_failure(
            state.step,
            &d.ts,
            &[("g_adv", g_adv), ("l_img", l_img), ("l_text", l_text), ("d_loss", d_loss)],
        ));
    }
    let grads = g.backward(losses.total).into_params();
    state.opt_g.update(&mut state.model.store, &grads, lr_g);
    Ok(StepLog {
        step: state.step,
        epoch: state.epoch,
        t_mean: d.ts.iter().sum::<usize>() as f64 / d.ts.len() as f64,
        d_loss,
        g_adv,
        l_img,
        l_text,
        l_total,
        lr_g,
        lr_d: if state.opt_d.is_some() { lr_d } else { 0.0 },
    })
}

/// Noise-prediction step of the conventional baseline; `l_img` holds the
/// noise MSE and the total is `lambda_img * l_img`.
fn ddpm_step(
    state: &mut TrainState,
    batch: &[&Sample],
    total_steps: u64,
    rng: &mut ChaCha8Rng,
) -> Result<StepLog> {
    let cfg = state.cfg().clone();
    let (lr_g, _) = lrs(&cfg, state.step, total_steps);
    let model = &state.model;
    let steps = model.schedule.steps();
    let ts: Vec<usize> = batch.iter().map(|_| rng.gen_range(1..=steps)).collect();
    let mut noisy = Vec::with_capacity(batch.len());
    let mut eps = Vec::with_capacity(batch.len());
    for (s, &t) in batch.iter().zip(&ts) {
        let e = randn_like(s.y0.shape(), rng);
        noisy.push(model.schedule.forward_marginal_sample(&s.y0, t, &e)?);
        eps.push(e);
    }
    let mut g = Graph::new();
    let x_l = g.input(stack_field(batch, |s| &s.x_l));
    let tokens: Vec<Vec<usize>> = batch.iter().map(|s| s.prompt.tokens.clone()).collect();
    let (cond, _, _) = model.condition(&mut g, x_l, &tokens)?;
    let yt = g.input(Tensor::stack(&noisy));
    let out = model.gen.forward(&mut g, &model.store, yt, &ts, &cond)?;
    let target = g.input(Tensor::stack(&eps));
    let d = g.sub(out.y, target);
    let sq = g.square(d);
    let mse = g.mean_all(sq);
    let total = g.scale(mse, cfg.training.lambda_img);
    let l_img = g.value(mse).item();
    let l_total = g.value(total).item();
    if !l_total.is_finite() {
        return Err(numeric_failure(state.step, &ts, &[("l_img", l_img)]));
    }
    let grads = g.backward(total).into_params();
    state.opt_g.update(&mut state.model.store, &grads, lr_g);
    Ok(StepLog {
        step: state.step,
        epoch: state.epoch,
        t_mean: ts.iter().sum::<usize>() as f64 / ts.len() as f64,
        d_loss: 0.0,
        g_adv: 0.0,
        l_img,
        l_text: 0.0,
        l_total,
        lr_g,
        lr_d: 0.0,
    })
}

/// Validation summary after an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValRecord {
    pub epoch: usize,
    pub step: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub nmse: f64,
}

/// Progress notifications from [`train`].
pub enum Event<'a> {
    Step(&'a StepLog),
    Validation(&'a ValRecord),
    /// Emitted after every completed epoch, including validation.
    EpochEnd(&'a TrainState),
}

/// Total optimizer steps of the configured run.
pub fn total_steps(cfg: &RunConfig, n_train: usize) -> u64 {
    (cfg.training.epochs * steps_per_epoch(n_train, cfg.training.batch_size)) as u64
}

/// Runs the remaining epochs of `state` (resuming after `state.epoch`).
pub fn train(
    state: &mut TrainState,
    train_set: &[Sample],
    val_set: &[Sample],
    sink: &mut dyn FnMut(Event) -> Result<()>,
) -> Result<()> {
    let cfg = state.cfg().clone();
    let epochs = cfg.training.epochs;
    let bs = cfg.training.batch_size;
    let total = total_steps(&cfg, train_set.len());
    while state.epoch < epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seeds.master, SHUFFLE_STREAM + state.epoch as u64));
        for chunk in order.chunks(bs) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let log = train_step(state, &batch, total)?;
            sink(Event::Step(&log))?;
        }
        state.epoch += 1;
        let every = cfg.eval.val_every;
        let due = state.epoch == epochs || (every > 0 && state.epoch % every == 0);
        if due && !val_set.is_empty() {
            let rec = validate(&state.model, val_set, state.epoch, state.step)?;
            sink(Event::Validation(&rec))?;
        }
        sink(Event::EpochEnd(state))?;
    }
    Ok(())
}

/// Mean PSNR/SSIM/NMSE of full-chain samples on (a prefix of) `val_set`.
pub fn validate(model: &Model, val_set: &[Sample], epoch: usize, step: u64) -> Result<ValRecord> {
    let cap = model.cfg.eval.val_subjects;
    let n = if cap == 0 { val_set.len() } else { cap.min(val_set.len()) };
    let subset = &val_set[..n];
    let (ests, _) = crate::sampler::sample_samples(model, subset, crate::sampler::EVAL_STREAM, false)?;
    let mut acc = [0.0; 3];
    for (s, est) in subset.iter().zip(&ests) {
        let r = denormalize(&s.y0);
        let t = crate::metrics::evaluate_pair(&r, est)?;
        acc[0] += t.psnr;
        acc[1] += t.ssim;
        acc[2] += t.nmse;
    }
    let k = n.max(1) as f64;
    Ok(ValRecord {
        epoch,
        step,
        psnr: acc[0] / k,
        ssim: acc[1] / k,
        nmse: acc[2] / k,
    })
}

#[cfg(test)]
mod tests;
