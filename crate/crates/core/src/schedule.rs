//! Variance schedules and closed-form forward/posterior diffusion algebra.
//!
//! Step indices run `1..=T`; `alpha_bar(0) == 1` so the posterior at `t = 1`
//! collapses onto the clean-image prediction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// Discretized variance-preserving schedule.
    Vp,
    /// Betas linearly spaced between `beta_min` and `beta_max`.
    Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VarianceSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    /// `alpha_bars[t]` for `t = 0..=T`, with `alpha_bars[0] == 1`.
    alpha_bars: Vec<f64>,
}

pub const MAX_STEPS: usize = 64;

/// Variance-preserving schedule
/// `beta_t = 1 - exp(-beta_min/T - (beta_max - beta_min)(2t - 1)/(2T^2))`.
pub fn make_schedule(steps: usize, beta_min: f64, beta_max: f64) -> Result<VarianceSchedule> {
    check_args(steps, beta_min, beta_max)?;
    let t_f = steps as f64;
    let betas = (1..=steps)
        .map(|t| {
            let t = t as f64;
            1.0 - (-beta_min / t_f - (beta_max - beta_min) * (2.0 * t - 1.0) / (2.0 * t_f * t_f)).exp()
        })
        .collect();
    VarianceSchedule::from_betas(betas)
}

/// Betas spaced linearly from `beta_start` to `beta_end` (both in (0, 1)).
pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<VarianceSchedule> {
    check_args(steps, beta_start, beta_end)?;
    let betas = (0..steps)
        .map(|i| {
            if steps == 1 {
                beta_start
            } else {
                beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
            }
        })
        .collect();
    VarianceSchedule::from_betas(betas)
}

pub fn build_schedule(
    kind: ScheduleKind,
    steps: usize,
    beta_min: f64,
    beta_max: f64,
) -> Result<VarianceSchedule> {
    match kind {
        ScheduleKind::Vp => make_schedule(steps, beta_min, beta_max),
        ScheduleKind::Linear => make_linear_schedule(steps, beta_min, beta_max),
    }
}

fn check_args(steps: usize, lo: f64, hi: f64) -> Result<()> {
    if steps == 0 || steps > MAX_STEPS {
        return Err(Error::Param(format!(
            "step count must be in 1..={MAX_STEPS}, got {steps}"
        )));
    }
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::Param(format!(
            "beta range must satisfy 0 < beta_min <= beta_max, got ({lo}, {hi})"
        )));
    }
    Ok(())
}

impl VarianceSchedule {
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::Param("empty beta sequence".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(Error::Param(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len() + 1);
        alpha_bars.push(1.0);
        for a in &alphas {
            let prev = *alpha_bars.last().unwrap();
            alpha_bars.push(prev * a);
        }
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product for `t = 0..=T`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::Param(format!(
                "diffusion step {t} outside 1..={}",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `sqrt(abar_t) * y0 + sqrt(1 - abar_t) * noise`.
    pub fn forward_marginal_sample(&self, y0: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_step(t)?;
        same_shape(y0, noise)?;
        let ab = self.alpha_bar(t);
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        Ok(y0.zip_map(noise, |y, n| a * y + b * n))
    }

    /// `sqrt(1 - beta_t) * y_prev + sqrt(beta_t) * noise`.
    pub fn forward_step_sample(&self, y_prev: &Tensor, t: usize, noise: &Tensor) -> Result<Tensor> {
        self.check_step(t)?;
        same_shape(y_prev, noise)?;
        let beta = self.beta(t);
        let (a, b) = ((1.0 - beta).sqrt(), beta.sqrt());
        Ok(y_prev.zip_map(noise, |y, n| a * y + b * n))
    }

    /// Coefficients `(c0, ct, var)` of `q(y_{t-1} | y_t, y0)`:
    /// mean `c0 * y0 + ct * y_t`, variance `var`.
    pub fn posterior_coeffs(&self, t: usize) -> Result<(f64, f64, f64)> {
        self.check_step(t)?;
        if t == 1 {
            return Ok((1.0, 0.0, 0.0));
        }
        let ab_prev = self.alpha_bar(t - 1);
        let ab = self.alpha_bar(t);
        let beta = self.beta(t);
        let denom = 1.0 - ab;
        Ok((
            ab_prev.sqrt() * beta / denom,
            self.alpha(t).sqrt() * (1.0 - ab_prev) / denom,
            (1.0 - ab_prev) * beta / denom,
        ))
    }

    pub fn posterior_params(&self, y0: &Tensor, y_t: &Tensor, t: usize) -> Result<(Tensor, f64)> {
        same_shape(y0, y_t)?;
        let (c0, ct, var) = self.posterior_coeffs(t)?;
        if t == 1 {
            return Ok((y0.clone(), 0.0));
        }
        Ok((y0.zip_map(y_t, |a, b| c0 * a + ct * b), var))
    }

    /// Draws `y_{t-1} ~ q(y_{t-1} | y_t, y0 := y0_pred)` using the supplied noise.
    pub fn posterior_sample(
        &self,
        y0_pred: &Tensor,
        y_t: &Tensor,
        t: usize,
        noise: &Tensor,
    ) -> Result<Tensor> {
        same_shape(y0_pred, noise)?;
        let (mean, var) = self.posterior_params(y0_pred, y_t, t)?;
        if var == 0.0 {
            return Ok(mean);
        }
        let sd = var.sqrt();
        Ok(mean.zip_map(noise, |m, n| m + sd * n))
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}
