//! The six-variant ablation ladder and its summary table.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, ScheduleConfig, Toggles, TrainMode};
use crate::error::Result;
use crate::metrics::{MetricReport, Triple};
use crate::sampler::{sample_samples, EVAL_STREAM};
use crate::schedule::ScheduleKind;
use crate::tensor::Tensor;
use crate::training::{denormalize, train, Event, Sample, StepLog, TrainState};

/// Steps of the conventional baseline (a desk-scale stand-in for a long
/// conventional chain).
pub const BASELINE_STEPS: usize = 50;
/// Linear betas of the baseline: the usual 1e-4..0.02 over 1000 steps,
/// rescaled to [`BASELINE_STEPS`].
pub const BASELINE_BETAS: (f64, f64) = (0.002, 0.4);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Adv,
    AdvText,
    AdvTextCa,
    AdvTextOmta,
    Full,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Baseline,
        Variant::Adv,
        Variant::AdvText,
        Variant::AdvTextCa,
        Variant::AdvTextOmta,
        Variant::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Adv => "adv",
            Variant::AdvText => "adv_text",
            Variant::AdvTextCa => "adv_text_ca",
            Variant::AdvTextOmta => "adv_text_omta",
            Variant::Full => "full",
        }
    }

    pub fn toggles(self) -> Toggles {
        let t = |adv, text, ca, omta, rec| Toggles {
            adv,
            text,
            ca,
            omta,
            rec,
        };
        match self {
            Variant::Baseline => t(false, false, false, false, false),
            Variant::Adv => t(true, false, false, false, false),
            Variant::AdvText => t(true, true, false, false, false),
            Variant::AdvTextCa => t(true, true, true, false, false),
            Variant::AdvTextOmta => t(true, true, false, true, false),
            Variant::Full => t(true, true, false, true, true),
        }
    }

    /// The base config with this variant's toggles (and, for the baseline,
    /// the conventional noise-prediction chain).
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        c.training.toggles = self.toggles();
        c.training.mode = TrainMode::Mcad;
        if self == Variant::Baseline {
            c.training.mode = TrainMode::Ddpm;
            c.schedule = ScheduleConfig {
                kind: ScheduleKind::Linear,
                steps: BASELINE_STEPS,
                beta_min: BASELINE_BETAS.0,
                beta_max: BASELINE_BETAS.1,
            };
        }
        c
    }

    pub fn note(self) -> Option<String> {
        (self == Variant::Baseline).then(|| {
            format!(
                "scaled substitute: {BASELINE_STEPS}-step noise-prediction chain without discriminator"
            )
        })
    }
}

/// Samples every item and scores it against its standard-dose target.
pub fn evaluate_model(state: &TrainState, items: &[Sample]) -> Result<(MetricReport, Vec<Tensor>)> {
    let (ests, _) = sample_samples(&state.model, items, EVAL_STREAM, false)?;
    let reference: BTreeMap<String, Tensor> = items
        .iter()
        .map(|s| (s.id.clone(), denormalize(&s.y0)))
        .collect();
    let est: BTreeMap<String, Tensor> = items.iter().map(|s| s.id.clone()).zip(ests.iter().cloned()).collect();
    Ok((MetricReport::build(&reference, &est)?, ests))
}

/// A trained variant with its log and evaluation.
pub struct VariantRun {
    pub variant: Variant,
    pub state: TrainState,
    pub logs: Vec<StepLog>,
    pub report: MetricReport,
}

/// Trains `variant` on `train_set` and evaluates it on `eval_set`.
pub fn run_variant(
    base: &RunConfig,
    variant: Variant,
    train_set: &[Sample],
    eval_set: &[Sample],
) -> Result<VariantRun> {
    let cfg = variant.apply(base);
    let mut state = TrainState::new(&cfg)?;
    let mut logs = Vec::new();
    train(&mut state, train_set, &[], &mut |e| {
        if let Event::Step(l) = e {
            logs.push(l.clone());
        }
        Ok(())
    })?;
    let (report, _) = evaluate_model(&state, eval_set)?;
    Ok(VariantRun {
        variant,
        state,
        logs,
        report,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub adv: bool,
    pub text: bool,
    pub ca: bool,
    pub omta: bool,
    pub rec: bool,
    pub mean: Triple,
    pub std: Triple,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl AblationRow {
    pub fn new(variant: Variant, report: &MetricReport) -> Self {
        let t = variant.toggles();
        Self {
            variant,
            adv: t.adv,
            text: t.text,
            ca: t.ca,
            omta: t.omta,
            rec: t.rec,
            mean: report.mean,
            std: report.std,
            note: variant.note(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub columns: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn new(rows: Vec<AblationRow>) -> Self {
        Self {
            columns: vec!["PSNR".into(), "SSIM".into(), "NMSE".into()],
            rows,
        }
    }
}
