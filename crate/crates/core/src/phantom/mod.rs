//! Synthetic subjects: attribute-encoding ellipse phantoms, Poisson low-dose
//! simulation, and the on-disk dataset format.

mod io;
mod split;

pub use io::{
    read_dataset, read_image, read_tabular, write_dataset, write_image, write_tabular, Dataset,
    Manifest, SplitAssignment,
};
pub use split::{split_counts, split_dataset, Split};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    F = 0,
    M = 1,
}

impl Sex {
    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Option<Sex> {
        match code {
            0 => Some(Sex::F),
            1 => Some(Sex::M),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularRecord {
    pub subject_id: String,
    /// Years.
    pub age: f64,
    pub sex: Sex,
    /// Kilograms.
    pub weight: f64,
    /// MBq; informational only.
    pub injected_dose: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subject {
    pub record: TabularRecord,
    /// Standard-dose phantom, `[H, W]`, values in `[0, 1]`.
    pub spet: Tensor,
    /// Poisson-degraded low-dose image, `[H, W]`, values `>= 0`.
    pub lpet: Tensor,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub grid_size: usize,
    /// Expected counts per unit activity at standard dose.
    pub counts: f64,
    /// Dose reduction factor.
    pub drf: f64,
    pub age_range: [f64; 2],
    pub weight_range: [f64; 2],
    pub dose_range: [f64; 2],
    pub blur_sigma: f64,
    pub lesions: [usize; 2],
    /// Lesion radius as a fraction of the grid size.
    pub lesion_radius: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            grid_size: 32,
            counts: 1e4,
            drf: 100.0,
            age_range: [20.0, 90.0],
            weight_range: [40.0, 120.0],
            dose_range: [150.0, 400.0],
            blur_sigma: 0.8,
            lesions: [1, 3],
            lesion_radius: 0.05,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Param(format!("phantom config: {m}")));
        if self.grid_size < 8 {
            return bad("grid_size must be at least 8");
        }
        if !(self.counts > 0.0) {
            return bad("counts must be positive");
        }
        if !(self.drf >= 1.0) {
            return bad("drf must be >= 1");
        }
        for (name, r) in [
            ("age_range", self.age_range),
            ("weight_range", self.weight_range),
            ("dose_range", self.dose_range),
        ] {
            if !(r[0] < r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return bad(&format!("{name} must be an increasing pair"));
            }
        }
        if self.dose_range[0] <= 0.0 {
            return bad("dose_range must be positive");
        }
        if self.lesions[0] > self.lesions[1] {
            return bad("lesions must be an increasing pair");
        }
        if !(self.blur_sigma >= 0.0) || !(self.lesion_radius > 0.0) {
            return bad("blur_sigma must be >= 0 and lesion_radius > 0");
        }
        Ok(())
    }
}

fn unit(v: f64, range: [f64; 2]) -> f64 {
    (v - range[0]) / (range[1] - range[0])
}

/// Subject id used for the `index`-th generated subject.
pub fn subject_id(index: usize) -> String {
    format!("sub{index:04}")
}

/// Per-subject seed derived from a master seed (SplitMix64 finalizer).
pub fn subject_seed(master: u64, index: usize) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generates one subject; bitwise reproducible from `(seed, cfg)`.
pub fn gen_subject(seed: u64, id: &str, cfg: &PhantomConfig) -> Result<Subject> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let age = rng.gen_range(cfg.age_range[0]..=cfg.age_range[1]);
    let weight = rng.gen_range(cfg.weight_range[0]..=cfg.weight_range[1]);
    let sex = if rng.gen_bool(0.5) { Sex::M } else { Sex::F };
    let injected_dose = rng.gen_range(cfg.dose_range[0]..=cfg.dose_range[1]);
    let record = TabularRecord {
        subject_id: id.to_string(),
        age,
        sex,
        weight,
        injected_dose,
    };
    let spet = render_phantom(&record, cfg, &mut rng);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);
    let lpet = quantize(poisson_degrade(&spet, cfg.counts, cfg.drf, &mut noise_rng)?);
    Ok(Subject {
        record,
        spet,
        lpet,
        seed,
    })
}

/// Generates `n` subjects from a master seed.
pub fn gen_subjects(master_seed: u64, n: usize, cfg: &PhantomConfig) -> Result<Vec<Subject>> {
    (0..n)
        .map(|i| gen_subject(subject_seed(master_seed, i), &subject_id(i), cfg))
        .collect()
}

/// Ellipse phantom whose geometry and intensities encode the record.
pub fn render_phantom<R: Rng>(record: &TabularRecord, cfg: &PhantomConfig, rng: &mut R) -> Tensor {
    let n = cfg.grid_size;
    let half = n as f64 / 2.0;
    let w_hat = unit(record.weight, cfg.weight_range).clamp(0.0, 1.0);
    let a_hat = unit(record.age, cfg.age_range).clamp(0.0, 1.0);
    let semi_x = half * (0.75 + 0.15 * w_hat);
    let semi_y = half * (0.65 + 0.15 * w_hat);
    let base = 0.9 - 0.3 * a_hat;

    let mut img = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let dx = (x as f64 + 0.5 - half) / semi_x;
            let dy = (y as f64 + 0.5 - half) / semi_y;
            if dx * dx + dy * dy <= 1.0 {
                img[y * n + x] = base;
            }
        }
    }

    let n_lesions = rng.gen_range(cfg.lesions[0]..=cfg.lesions[1]);
    let radius = cfg.lesion_radius * n as f64;
    for _ in 0..n_lesions {
        let r = 0.6 * rng.gen::<f64>().sqrt();
        let theta = rng.gen::<f64>() * std::f64::consts::TAU;
        let cx = half + r * semi_x * theta.cos();
        let cy = half + r * semi_y * theta.sin();
        for y in 0..n {
            for x in 0..n {
                let dx = x as f64 + 0.5 - cx;
                let dy = y as f64 + 0.5 - cy;
                if dx * dx + dy * dy <= radius * radius {
                    img[y * n + x] = 1.0;
                }
            }
        }
    }

    let left_scale = 1.0 + 0.1 * (2.0 * record.sex.code() as f64 - 1.0);
    for y in 0..n {
        for x in 0..n / 2 {
            img[y * n + x] *= left_scale;
        }
    }

    let blurred = gaussian_blur(&img, n, n, cfg.blur_sigma);
    quantize(Tensor::new(&[n, n], blurred).map(|v| v.clamp(0.0, 1.0)))
}

/// Rounds every entry to the nearest `f32`, the precision of the image format.
fn quantize(t: Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}

/// Separable Gaussian blur with zero padding.
pub fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return img.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let xx = x as isize + ki as isize - radius;
                if xx >= 0 && xx < w as isize {
                    s += k * img[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = s;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let yy = y as isize + ki as isize - radius;
                if yy >= 0 && yy < h as isize {
                    s += k * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Per pixel `k ~ Poisson(img * counts / drf)`, returned as `k * drf / counts`.
pub fn poisson_degrade<R: Rng + ?Sized>(
    img: &Tensor,
    counts: f64,
    drf: f64,
    rng: &mut R,
) -> Result<Tensor> {
    if !(counts > 0.0) || !(drf >= 1.0) {
        return Err(Error::Param(format!(
            "poisson_degrade needs counts > 0 and drf >= 1, got ({counts}, {drf})"
        )));
    }
    let scale = counts / drf;
    let mut out = Vec::with_capacity(img.numel());
    for &v in img.data() {
        let lambda = v.max(0.0) * scale;
        let k = if lambda > 0.0 {
            Poisson::new(lambda)
                .map_err(|e| Error::Param(format!("poisson rate {lambda}: {e}")))?
                .sample(rng)
        } else {
            0.0
        };
        out.push(k / scale);
    }
    Ok(Tensor::new(img.shape(), out))
}

/// Image summary statistics `[area, mean intensity, hemispheric asymmetry]`.
///
/// Area counts pixels above `threshold`; intensity and asymmetry are taken
/// over those pixels, asymmetry as `left_mean / right_mean - 1`.
pub fn summary_stats(img: &Tensor, threshold: f64) -> [f64; 3] {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    let (mut area, mut sum) = (0.0, 0.0);
    let (mut left, mut nl, mut right, mut nr) = (0.0, 0.0, 0.0, 0.0);
    for y in 0..h {
        for x in 0..w {
            let v = img.data()[y * w + x];
            if v > threshold {
                area += 1.0;
                sum += v;
                if x < w / 2 {
                    left += v;
                    nl += 1.0;
                } else {
                    right += v;
                    nr += 1.0;
                }
            }
        }
    }
    let mean = if area > 0.0 { sum / area } else { 0.0 };
    let asym = if nl > 0.0 && nr > 0.0 && right > 0.0 {
        (left / nl) / (right / nr) - 1.0
    } else {
        0.0
    };
    [area, mean, asym]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(age: f64, weight: f64, sex: Sex) -> TabularRecord {
        TabularRecord {
            subject_id: "x".into(),
            age,
            sex,
            weight,
            injected_dose: 200.0,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = PhantomConfig::default();
        let a = gen_subject(42, "sub0000", &cfg).unwrap();
        let b = gen_subject(42, "sub0000", &cfg).unwrap();
        assert_eq!(a, b);
        let c = gen_subject(43, "sub0000", &cfg).unwrap();
        assert_ne!(a.spet, c.spet);
    }

    #[test]
    fn invariants_of_generated_subjects() {
        let cfg = PhantomConfig::default();
        for s in gen_subjects(5, 20, &cfg).unwrap() {
            let r = &s.record;
            assert!((20.0..=90.0).contains(&r.age));
            assert!((40.0..=120.0).contains(&r.weight));
            assert!(r.injected_dose > 0.0);
            assert_eq!(s.spet.shape(), &[32, 32]);
            assert_eq!(s.lpet.shape(), s.spet.shape());
            assert!(s.spet.data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert!(s.lpet.data().iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn default_drf_is_one_hundred() {
        assert_eq!(PhantomConfig::default().drf, 100.0);
    }

    #[test]
    fn heavier_subject_has_larger_ellipse() {
        let cfg = PhantomConfig::default();
        let light = render_phantom(
            &record(50.0, 40.0, Sex::F),
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        let heavy = render_phantom(
            &record(50.0, 120.0, Sex::F),
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(9),
        );
        let count = |t: &Tensor| t.data().iter().filter(|v| **v > 0.05).count();
        assert!(count(&heavy) > count(&light));
    }

    #[test]
    fn zero_image_degrades_to_zero() {
        let img = Tensor::zeros(&[8, 8]);
        let out = poisson_degrade(&img, 1e4, 100.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn high_count_degradation_is_accurate() {
        let img = Tensor::from_fn(&[16, 16], |i| (i as f64 / 255.0).min(1.0));
        let out = poisson_degrade(&img, 1e8, 1.0, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(out.max_abs_diff(&img) <= 1e-2);
    }

    #[test]
    fn degradation_rejects_bad_parameters() {
        let img = Tensor::zeros(&[2, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(poisson_degrade(&img, 0.0, 100.0, &mut rng).is_err());
        assert!(poisson_degrade(&img, 1e4, 0.5, &mut rng).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = PhantomConfig {
            drf: 0.5,
            ..Default::default()
        };
        assert!(gen_subject(0, "a", &cfg).is_err());
        let cfg = PhantomConfig {
            age_range: [90.0, 20.0],
            ..Default::default()
        };
        assert!(gen_subject(0, "a", &cfg).is_err());
    }

    #[test]
    fn sex_shows_up_as_asymmetry() {
        let cfg = PhantomConfig {
            lesions: [0, 0],
            ..Default::default()
        };
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let f = render_phantom(&record(50.0, 80.0, Sex::F), &cfg, &mut r);
        let m = render_phantom(&record(50.0, 80.0, Sex::M), &cfg, &mut r);
        assert!(summary_stats(&f, 0.05)[2] < -0.05);
        assert!(summary_stats(&m, 0.05)[2] > 0.05);
    }
}
