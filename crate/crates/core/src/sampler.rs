//! Reverse sampling from pure noise to the estimated image.

use rand_chacha::ChaCha8Rng;

use crate::config::TrainMode;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::schedule::VarianceSchedule;
use crate::tensor::Tensor;
use crate::training::{denormalize, stack_field, stream_rng, Model, Sample};

/// Base RNG stream for evaluation/validation sampling (offset by subject index).
pub const EVAL_STREAM: u64 = 1 << 41;

#[derive(Clone, Debug, PartialEq)]
pub struct TraceStep {
    pub t: usize,
    pub y_t: Tensor,
    pub y0_pred: Tensor,
    pub y_prev: Tensor,
}

/// Per-step states of one batch, from `t = T` down to `t = 1`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SampleTrace {
    pub steps: Vec<TraceStep>,
}

/// Draws `[B, ...]` noise with element `b` taken from `rngs[b]`.
fn batch_noise(shape: &[usize], rngs: &mut [ChaCha8Rng]) -> Tensor {
    let items: Vec<Tensor> = rngs
        .iter_mut()
        .map(|r| Tensor::randn(&shape[1..], 1.0, r))
        .collect();
    Tensor::stack(&items)
}

/// Runs `t = T..1` with `denoise(y_t, t) -> y0'` and returns the final `y0'`
/// (still in `[-1, 1]` units). Step 1 consumes no noise.
pub fn reverse_chain(
    schedule: &VarianceSchedule,
    shape: &[usize],
    rngs: &mut [ChaCha8Rng],
    mut denoise: impl FnMut(&Tensor, usize) -> Result<Tensor>,
    keep_trace: bool,
) -> Result<(Tensor, Option<SampleTrace>)> {
    if shape.first() != Some(&rngs.len()) {
        return Err(Error::Shape(format!(
            "batch {shape:?} with {} noise streams",
            rngs.len()
        )));
    }
    let mut trace = keep_trace.then(SampleTrace::default);
    let mut y_t = batch_noise(shape, rngs);
    let mut last = None;
    for t in (1..=schedule.steps()).rev() {
        let y0 = denoise(&y_t, t)?;
        if y0.shape() != shape {
            return Err(Error::Shape(format!("denoiser returned {:?} at step {t}", y0.shape())));
        }
        if !y0.is_finite() {
            return Err(Error::Numeric(format!("non-finite prediction at step {t}")));
        }
        let y_prev = if t == 1 {
            y0.clone()
        } else {
            let noise = batch_noise(shape, rngs);
            schedule.posterior_sample(&y0, &y_t, t, &noise)?
        };
        if let Some(tr) = trace.as_mut() {
            tr.steps.push(TraceStep {
                t,
                y_t: y_t.clone(),
                y0_pred: y0.clone(),
                y_prev: y_prev.clone(),
            });
        }
        y_t = y_prev;
        last = Some(y0);
    }
    Ok((last.expect("at least one step"), trace))
}

/// Output of [`sample`].
#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// Estimated images in `[0, 1]`, `[B, 1, H, W]`.
    pub y_e: Tensor,
    /// Semantic embedding of the final step, `[B, C_z]`.
    pub z: Tensor,
    pub trace: Option<SampleTrace>,
}

/// Samples a batch; the conditioning stack is computed once and reused at
/// every step.
pub fn sample(
    model: &Model,
    x_l: &Tensor,
    tokens: &[Vec<usize>],
    rngs: &mut [ChaCha8Rng],
    keep_trace: bool,
) -> Result<SampleOutput> {
    let shape = x_l.shape().to_vec();
    if shape.len() != 4 || shape[1] != 1 || tokens.len() != shape[0] {
        return Err(Error::Shape(format!(
            "sampling input {shape:?} with {} prompts",
            tokens.len()
        )));
    }
    let ids: Vec<_> = model.store.ids().collect();
    let mut g0 = Graph::new();
    g0.freeze(ids.iter().copied());
    let xv = g0.input(x_l.clone());
    let (cond, _, _) = model.condition(&mut g0, xv, tokens)?;
    let cond: Vec<Tensor> = cond.iter().map(|&c| g0.value(c).clone()).collect();
    drop(g0);

    let sched = &model.schedule;
    let mode = model.cfg.training.mode;
    let mut z = None;
    let (y0, trace) = reverse_chain(
        sched,
        &shape,
        rngs,
        |y_t, t| {
            let mut g = Graph::new();
            g.freeze(ids.iter().copied());
            let c: Vec<_> = cond.iter().map(|c| g.input(c.clone())).collect();
            let yv = g.input(y_t.clone());
            let ts = vec![t; shape[0]];
            let out = model.gen.forward(&mut g, &model.store, yv, &ts, &c)?;
            if t == 1 {
                let zv = model.semantics(&mut g, out.y, out.features);
                z = Some(g.value(zv).clone());
            }
            let pred = g.value(out.y);
            Ok(match mode {
                TrainMode::Mcad => pred.clone(),
                TrainMode::Ddpm => {
                    let ab = sched.alpha_bar(t);
                    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
                    y_t.zip_map(pred, |y, e| ((y - b * e) / a).clamp(-1.0, 1.0))
                }
            })
        },
        keep_trace,
    )?;
    Ok(SampleOutput {
        y_e: denormalize(&y0),
        z: z.expect("step 1 always runs"),
        trace,
    })
}

/// Samples every item with its own stream `stream_base + index`, in
/// batches of the configured size. Returns `[1, H, W]` estimates in `[0, 1]`
/// and the per-item semantic embeddings.
pub fn sample_samples(
    model: &Model,
    items: &[Sample],
    stream_base: u64,
    keep_trace: bool,
) -> Result<(Vec<Tensor>, Vec<Vec<f64>>)> {
    let (ests, zs, _) = sample_samples_traced(model, items, stream_base, keep_trace)?;
    Ok((ests, zs))
}

/// Like [`sample_samples`], also returning the per-batch traces.
pub fn sample_samples_traced(
    model: &Model,
    items: &[Sample],
    stream_base: u64,
    keep_trace: bool,
) -> Result<(Vec<Tensor>, Vec<Vec<f64>>, Vec<SampleTrace>)> {
    let bs = model.cfg.training.batch_size.max(1);
    let seed = model.cfg.seeds.master;
    let mut ests = Vec::with_capacity(items.len());
    let mut zs = Vec::with_capacity(items.len());
    let mut traces = Vec::new();
    for (ci, chunk) in items.chunks(bs).enumerate() {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let x_l = stack_field(&batch, |s| &s.x_l);
        let tokens: Vec<Vec<usize>> = chunk.iter().map(|s| s.prompt.tokens.clone()).collect();
        let mut rngs: Vec<ChaCha8Rng> = (0..chunk.len())
            .map(|k| stream_rng(seed, stream_base + (ci * bs + k) as u64))
            .collect();
        let out = sample(model, &x_l, &tokens, &mut rngs, keep_trace)?;
        let cz = out.z.shape()[1];
        for k in 0..chunk.len() {
            ests.push(out.y_e.index0(k));
            zs.push(out.z.data()[k * cz..(k + 1) * cz].to_vec());
        }
        traces.extend(out.trace);
    }
    Ok((ests, zs, traces))
}
