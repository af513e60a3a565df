//! Image-quality metrics, slice restacking and paired significance testing.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of normalized images.
pub const DATA_RANGE: f64 = 1.0;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "metric inputs {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.numel() == 0 {
        return Err(Error::Degenerate("empty image".into()));
    }
    Ok(())
}

pub fn mse(reference: &Tensor, est: &Tensor) -> Result<f64> {
    same_shape(reference, est)?;
    let s: f64 = reference
        .data()
        .iter()
        .zip(est.data())
        .map(|(r, e)| (e - r) * (e - r))
        .sum();
    Ok(s / reference.numel() as f64)
}

/// `10 log10(MAX^2 / MSE)`; `+inf` for identical inputs.
pub fn psnr(reference: &Tensor, est: &Tensor) -> Result<f64> {
    let m = mse(reference, est)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (DATA_RANGE * DATA_RANGE / m).log10())
}

/// `sum (est - ref)^2 / sum ref^2`.
pub fn nmse(reference: &Tensor, est: &Tensor) -> Result<f64> {
    same_shape(reference, est)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (r, e) in reference.data().iter().zip(est.data()) {
        num += (e - r) * (e - r);
        den += r * r;
    }
    if den == 0.0 {
        return Err(Error::Degenerate("nmse reference is all zero".into()));
    }
    Ok(num / den)
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let x = i as f64 - r;
            (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of an `h x w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Per-position SSIM map of one 2-D slice.
fn ssim_map(a: &[f64], b: &[f64], h: usize, w: usize) -> Vec<f64> {
    let k = gaussian_window();
    let c1 = (SSIM_K1 * DATA_RANGE).powi(2);
    let c2 = (SSIM_K2 * DATA_RANGE).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| f(*x, *y)).collect()
    };
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, &k);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, &k);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, &k);
    (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect()
}

/// Mean SSIM over valid window positions; volumes `[D, H, W]` average over
/// every slice's positions.
pub fn ssim(reference: &Tensor, est: &Tensor) -> Result<f64> {
    same_shape(reference, est)?;
    let s = reference.shape();
    let (d, h, w) = match s {
        [h, w] => (1, *h, *w),
        [d, h, w] => (*d, *h, *w),
        _ => return Err(Error::Shape(format!("ssim needs 2-D or 3-D input, got {s:?}"))),
    };
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for z in 0..d {
        let r = &reference.data()[z * h * w..(z + 1) * h * w];
        let e = &est.data()[z * h * w..(z + 1) * h * w];
        let m = ssim_map(r, e, h, w);
        count += m.len();
        total += m.iter().sum::<f64>();
    }
    Ok(total / count as f64)
}

/// Stacks same-shape slices along a new leading axis.
pub fn restack(slices: &[Tensor]) -> Result<Tensor> {
    let first = slices
        .first()
        .ok_or_else(|| Error::Degenerate("no slices to restack".into()))?;
    if slices.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::Shape("slices differ in shape".into()));
    }
    Ok(Tensor::stack(slices))
}

pub fn unstack(volume: &Tensor) -> Vec<Tensor> {
    (0..volume.shape()[0]).map(|i| volume.index0(i)).collect()
}

/// Two-sided paired Student t-test on `a - b`; returns `(t, p)`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("paired samples {} vs {}", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Degenerate(format!("paired t-test needs n >= 2, got {n}")));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::Degenerate("differences have zero variance".into()));
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64)
        .map_err(|e| Error::Numeric(format!("t distribution: {e}")))?;
    let p = 2.0 * dist.cdf(-t.abs());
    Ok((t, p))
}

/// JSON has no infinity; non-finite values are written as strings.
mod lenient_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_str(&v.to_string())
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(v),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Triple {
    #[serde(with = "lenient_f64")]
    pub psnr: f64,
    #[serde(with = "lenient_f64")]
    pub ssim: f64,
    #[serde(with = "lenient_f64")]
    pub nmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject_id: String,
    #[serde(flatten)]
    pub values: Triple,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_subject: Vec<SubjectMetrics>,
    pub mean: Triple,
    pub std: Triple,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_vs_baseline: Option<Triple>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    // Identical entries (including all-infinite PSNR) have zero spread.
    if xs.iter().all(|x| *x == xs[0]) {
        return (m, 0.0);
    }
    let v = if xs.len() > 1 {
        xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, v.sqrt())
}

pub fn evaluate_pair(reference: &Tensor, est: &Tensor) -> Result<Triple> {
    Ok(Triple {
        psnr: psnr(reference, est)?,
        ssim: ssim(reference, est)?,
        nmse: nmse(reference, est)?,
    })
}

impl MetricReport {
    /// Scores every reference subject; `est` must contain all of them.
    pub fn build(
        reference: &BTreeMap<String, Tensor>,
        est: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let missing: Vec<String> = reference
            .keys()
            .filter(|k| !est.contains_key(*k))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingSubjects(missing));
        }
        if reference.is_empty() {
            return Err(Error::Degenerate("no subjects to evaluate".into()));
        }
        let per_subject = reference
            .iter()
            .map(|(id, r)| {
                Ok(SubjectMetrics {
                    subject_id: id.clone(),
                    values: evaluate_pair(r, &est[id])?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_subjects(per_subject))
    }

    pub fn from_subjects(per_subject: Vec<SubjectMetrics>) -> Self {
        let col = |f: fn(&Triple) -> f64| -> Vec<f64> {
            per_subject.iter().map(|s| f(&s.values)).collect()
        };
        let (pm, ps) = mean_std(&col(|t| t.psnr));
        let (sm, ss) = mean_std(&col(|t| t.ssim));
        let (nm, ns) = mean_std(&col(|t| t.nmse));
        Self {
            per_subject,
            mean: Triple {
                psnr: pm,
                ssim: sm,
                nmse: nm,
            },
            std: Triple {
                psnr: ps,
                ssim: ss,
                nmse: ns,
            },
            p_vs_baseline: None,
        }
    }

    /// Adds paired t-test p-values against `baseline`, matched by subject id.
    pub fn compare_with(&mut self, baseline: &MetricReport) -> Result<()> {
        let base: BTreeMap<&str, &Triple> = baseline
            .per_subject
            .iter()
            .map(|s| (s.subject_id.as_str(), &s.values))
            .collect();
        let missing: Vec<String> = self
            .per_subject
            .iter()
            .filter(|s| !base.contains_key(s.subject_id.as_str()))
            .map(|s| s.subject_id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingSubjects(missing));
        }
        let pairs = |f: fn(&Triple) -> f64| -> (Vec<f64>, Vec<f64>) {
            self.per_subject
                .iter()
                .map(|s| (f(&s.values), f(base[s.subject_id.as_str()])))
                .unzip()
        };
        let p = |f: fn(&Triple) -> f64| -> Result<f64> {
            let (a, b) = pairs(f);
            Ok(paired_t_test(&a, &b)?.1)
        };
        self.p_vs_baseline = Some(Triple {
            psnr: p(|t| t.psnr)?,
            ssim: p(|t| t.ssim)?,
            nmse: p(|t| t.nmse)?,
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(h: usize, w: usize, seed: u64) -> Tensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w], |_| r.gen::<f64>())
    }

    #[test]
    fn psnr_cases() {
        let r = rand_img(8, 8, 0).map(|v| v * 0.8);
        assert_eq!(psnr(&r, &r).unwrap(), f64::INFINITY);
        let e = r.map(|v| v + 0.1);
        assert!((psnr(&r, &e).unwrap() - 20.0).abs() < 1e-9);
        let e = rand_img(8, 8, 1);
        let m: f64 = r.data().iter().zip(e.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 64.0;
        assert!((psnr(&r, &e).unwrap() - 10.0 * (1.0 / m).log10()).abs() <= 1e-9);
    }

    #[test]
    fn halving_mse_adds_three_db() {
        let r = rand_img(8, 8, 2);
        let e = rand_img(8, 8, 3);
        let half = r.zip_map(&e, |a, b| a + (b - a) / 2f64.sqrt());
        let gain = psnr(&r, &half).unwrap() - psnr(&r, &e).unwrap();
        assert!((gain - 10.0 * 2f64.log10()).abs() < 1e-9);
        let ratio = nmse(&r, &half).unwrap() / nmse(&r, &e).unwrap();
        assert!((ratio - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nmse_cases() {
        let r = rand_img(6, 6, 4);
        assert_eq!(nmse(&r, &r).unwrap(), 0.0);
        assert!((nmse(&r, &r.scale(2.0)).unwrap() - 1.0).abs() < 1e-12);
        let e = rand_img(6, 6, 5);
        let num: f64 = r.data().iter().zip(e.data()).map(|(a, b)| (b - a).powi(2)).sum();
        let den: f64 = r.data().iter().map(|a| a * a).sum();
        assert!((nmse(&r, &e).unwrap() - num / den).abs() <= 1e-9);
        assert!(nmse(&Tensor::zeros(&[2, 2]), &r.index0(0).reshape(&[2, 3])).is_err());
        assert!(matches!(
            nmse(&Tensor::zeros(&[2, 2]), &Tensor::ones(&[2, 2])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn ssim_identity_inversion_symmetry() {
        let r = rand_img(16, 16, 6);
        assert!((ssim(&r, &r).unwrap() - 1.0).abs() < 1e-12);
        let inv = r.map(|v| 1.0 - v);
        assert!(ssim(&r, &inv).unwrap() < 1.0);
        let e = rand_img(16, 16, 7);
        assert!((ssim(&r, &e).unwrap() - ssim(&e, &r).unwrap()).abs() <= 1e-12);
        assert!(ssim(&rand_img(8, 8, 0), &rand_img(8, 8, 1)).is_err());
    }

    #[test]
    fn permutation_invariance_of_pointwise_metrics() {
        let r = rand_img(5, 7, 8);
        let e = rand_img(5, 7, 9);
        let mut perm: Vec<usize> = (0..35).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for i in (1..35).rev() {
            perm.swap(i, rng.gen_range(0..=i));
        }
        let pr = Tensor::from_fn(&[5, 7], |i| r.data()[perm[i]]);
        let pe = Tensor::from_fn(&[5, 7], |i| e.data()[perm[i]]);
        assert!((psnr(&r, &e).unwrap() - psnr(&pr, &pe).unwrap()).abs() < 1e-9);
        assert!((nmse(&r, &e).unwrap() - nmse(&pr, &pe).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn restack_cases() {
        let a = rand_img(12, 12, 11);
        let v = restack(&[a.clone()]).unwrap();
        assert_eq!(v.shape(), &[1, 12, 12]);
        let b = rand_img(12, 12, 12);
        assert!((psnr(&a, &b).unwrap() - psnr(&v, &restack(&[b.clone()]).unwrap()).unwrap()).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&v, &restack(&[b]).unwrap()).unwrap()).abs() < 1e-12);
        let slices = vec![rand_img(12, 12, 13), rand_img(12, 12, 14), a];
        assert_eq!(unstack(&restack(&slices).unwrap()), slices);
        // Identical per-slice error: volume PSNR equals slice PSNR.
        let refs: Vec<Tensor> = (0..3).map(|i| rand_img(12, 12, 20 + i)).collect();
        let ests: Vec<Tensor> = refs.iter().map(|r| r.map(|v| v + 0.05)).collect();
        let vol = psnr(&restack(&refs).unwrap(), &restack(&ests).unwrap()).unwrap();
        assert!((vol - psnr(&refs[0], &ests[0]).unwrap()).abs() < 1e-9);
        assert!(restack(&[]).is_err());
    }

    #[test]
    fn t_test_cases() {
        let a = vec![1.0, 2.0, 3.0];
        assert!(matches!(paired_t_test(&a, &a), Err(Error::Degenerate(_))));
        assert!(paired_t_test(&[1.0], &[2.0]).is_err());
        let n = 20;
        let a: Vec<f64> = (0..n).map(|i| 0.5 + 1e-9 * (i % 3) as f64).collect();
        let b = vec![0.0; n];
        let (_, p) = paired_t_test(&a, &b).unwrap();
        assert!(p < 1e-6);
    }

    #[test]
    fn report_means_and_missing_subjects() {
        let mut refs = BTreeMap::new();
        let mut ests = BTreeMap::new();
        for i in 0..4 {
            let r = rand_img(12, 12, 30 + i);
            ests.insert(format!("s{i}"), r.map(|v| v * 0.9));
            refs.insert(format!("s{i}"), r);
        }
        let rep = MetricReport::build(&refs, &ests).unwrap();
        let m: f64 = rep.per_subject.iter().map(|s| s.values.psnr).sum::<f64>() / 4.0;
        assert!((rep.mean.psnr - m).abs() <= 1e-12);
        let json = serde_json::to_string(&rep).unwrap();
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);

        let same = MetricReport::build(&refs, &refs).unwrap();
        assert_eq!(same.mean.nmse, 0.0);
        assert!((same.mean.ssim - 1.0).abs() < 1e-12);
        let json = serde_json::to_string(&same).unwrap();
        assert!(json.contains("\"inf\""));
        assert_eq!(serde_json::from_str::<MetricReport>(&json).unwrap(), same);

        ests.remove("s2");
        match MetricReport::build(&refs, &ests) {
            Err(Error::MissingSubjects(ids)) => assert_eq!(ids, vec!["s2".to_string()]),
            other => panic!("{other:?}"),
        }
    }
}
