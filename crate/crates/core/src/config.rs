//! Run configuration: one JSON document, every field defaulted, unknown keys
//! rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::m3trec::SemanticSource;
use crate::nets::{CondMode, NetConfig};
use crate::omta::OtConfig;
use crate::params::AdamConfig;
use crate::phantom::PhantomConfig;
use crate::schedule::{build_schedule, ScheduleKind, VarianceSchedule};

/// Environment variable overriding `seeds.master`.
pub const SEED_ENV: &str = "MCAD_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub phantom: PhantomConfig,
    /// Fractions for train/val/test.
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            phantom: PhantomConfig::default(),
            split: [5.0 / 6.0, 1.0 / 12.0, 1.0 / 12.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::Vp,
            steps: 5,
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<VarianceSchedule> {
        build_schedule(self.kind, self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub net: NetConfig,
    /// Token embedding width `d`.
    pub text_dim: usize,
    /// Prompt length `L`.
    pub prompt_len: usize,
    /// Bins per numeric attribute.
    pub bins: usize,
    pub rec_hidden: usize,
    pub semantic_source: SemanticSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            text_dim: 32,
            prompt_len: 16,
            bins: 8,
            rec_hidden: 64,
            semantic_source: SemanticSource::Features,
        }
    }
}

/// Ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Toggles {
    pub adv: bool,
    pub text: bool,
    pub ca: bool,
    pub omta: bool,
    pub rec: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            adv: true,
            text: true,
            ca: false,
            omta: true,
            rec: true,
        }
    }
}

impl Toggles {
    pub fn cond_mode(&self) -> CondMode {
        match (self.text, self.omta, self.ca) {
            (false, _, _) => CondMode::Image,
            (true, true, _) => CondMode::Omta,
            (true, _, true) => CondMode::Ca,
            _ => CondMode::Concat,
        }
    }

    /// Whether the token embedding is instantiated.
    pub fn uses_tokens(&self) -> bool {
        self.text || self.rec
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Few-step adversarial diffusion with `y0` prediction.
    Mcad,
    /// Conventional Gaussian reverse steps with noise prediction and no
    /// discriminator.
    Ddpm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lambda_img: f64,
    pub lambda_text: f64,
    pub lr_g: f64,
    pub lr_d: f64,
    pub adam: AdamConfig,
    pub toggles: Toggles,
    /// R1 penalty weight on real discriminator inputs; 0 disables it.
    pub r1_gamma: f64,
    /// Save a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Mcad,
            epochs: 50,
            batch_size: 16,
            lambda_img: 100.0,
            lambda_text: 10.0,
            lr_g: 2e-4,
            lr_d: 1.5e-4,
            adam: AdamConfig::default(),
            toggles: Toggles::default(),
            r1_gamma: 0.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Validate every this many epochs (0: only after the last epoch).
    pub val_every: usize,
    /// Cap on validation subjects per pass (0: all).
    pub val_subjects: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            val_every: 0,
            val_subjects: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedConfig {
    pub master: u64,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self { master: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub omta: OtConfig,
    pub training: TrainConfig,
    pub eval: EvalConfig,
    pub seeds: SeedConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads, applies the seed override from the environment, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_env()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seeds.master = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let t = &self.training;
        let tg = t.toggles;
        if tg.ca && tg.omta {
            return bad("training.toggles: ca and omta are mutually exclusive".into());
        }
        if (tg.ca || tg.omta) && !tg.text {
            return bad("training.toggles: ca/omta require text".into());
        }
        if tg.rec && !tg.text {
            return bad("training.toggles: rec requires text".into());
        }
        if t.mode == TrainMode::Ddpm && (tg.adv || tg.rec) {
            return bad("training: ddpm mode has no discriminator or reconstruction head".into());
        }
        for (name, v) in [
            ("lambda_img", t.lambda_img),
            ("lambda_text", t.lambda_text),
            ("r1_gamma", t.r1_gamma),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("training.{name} must be finite and >= 0, got {v}"));
            }
        }
        for (name, v) in [("lr_g", t.lr_g), ("lr_d", t.lr_d)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("training.{name} must be finite and >= 0, got {v}"));
            }
        }
        if t.batch_size == 0 {
            return bad("training.batch_size must be positive".into());
        }
        let a = t.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || a.eps <= 0.0 {
            return bad("training.adam: betas must be in [0, 1) and eps positive".into());
        }
        self.schedule
            .build()
            .map_err(|e| Error::Config(format!("schedule: {e}")))?;
        self.data
            .phantom
            .validate()
            .map_err(|e| Error::Config(format!("data.phantom: {e}")))?;
        let s = self.data.split;
        if s.iter().any(|r| !(*r >= 0.0)) || (s.iter().sum::<f64>() - 1.0).abs() > 1e-2 {
            return bad(format!("data.split must be non-negative and sum to 1, got {s:?}"));
        }
        self.model.net.validate(self.data.phantom.grid_size)?;
        let m = &self.model;
        if m.text_dim == 0 || m.rec_hidden == 0 || m.bins == 0 {
            return bad("model: text_dim, rec_hidden and bins must be positive".into());
        }
        if m.prompt_len < crate::tabenc::TEMPLATE_LEN {
            return bad(format!(
                "model.prompt_len must be at least {}",
                crate::tabenc::TEMPLATE_LEN
            ));
        }
        let o = &self.omta;
        if !(o.eps > 0.0) || o.max_iters == 0 || !(o.tol > 0.0) || o.d_k == 0 {
            return bad("omta: eps, tol, max_iters and d_k must be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_and_validate() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
        assert_eq!(c.schedule.steps, 5);
        assert_eq!((c.training.lambda_img, c.training.lambda_text), (100.0, 10.0));
        assert_eq!((c.training.lr_g, c.training.lr_d), (2e-4, 1.5e-4));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            RunConfig::from_json(r#"{"training": {"lamda_img": 1}}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::from_json(r#"{"extra": 1}"#), Err(Error::Config(_))));
    }

    #[test]
    fn toggle_rules() {
        let err = RunConfig::from_json(r#"{"training": {"toggles": {"ca": true, "omta": true}}}"#)
            .unwrap_err();
        assert!(err.to_string().contains("mutually exclusive"));
        assert!(RunConfig::from_json(
            r#"{"training": {"toggles": {"text": false, "omta": true, "rec": false}}}"#
        )
        .is_err());
        let c = RunConfig::from_json(
            r#"{"training": {"toggles": {"text": true, "omta": false, "rec": false}}}"#,
        )
        .unwrap();
        assert_eq!(c.training.toggles.cond_mode(), CondMode::Concat);
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for doc in [
            r#"{"training": {"lambda_img": -1}}"#,
            r#"{"schedule": {"steps": 0}}"#,
            r#"{"data": {"split": [0.5, 0.1, 0.1]}}"#,
            r#"{"data": {"phantom": {"grid_size": 24}}}"#,
            r#"{"omta": {"eps": 0}}"#,
        ] {
            let e = RunConfig::from_json(doc).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{doc}: {e}");
        }
    }
}
