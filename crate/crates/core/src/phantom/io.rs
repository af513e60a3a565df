use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{split_dataset, Sex, Split, Subject, TabularRecord};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MCPT";
const HEADER_LEN: usize = 16;
const CSV_COLUMNS: [&str; 5] = ["subject_id", "age", "sex", "weight", "injected_dose"];

/// Writes an `[H, W]` or `[H, W, C]` tensor as an MCPT image.
pub fn write_image(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w, c) = match img.shape() {
        [h, w] => (*h, *w, 1),
        [h, w, c] => (*h, *w, *c),
        s => return Err(Error::Shape(format!("image must be 2-D or 3-D, got {s:?}"))),
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * img.numel());
    buf.extend_from_slice(MAGIC);
    for d in [h, w, c] {
        let d = u32::try_from(d).map_err(|_| Error::Shape(format!("dimension {d} too large")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &v in img.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads an MCPT image; single-channel images come back as `[H, W]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "unknown magic"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (h, w, c) = (dim(0), dim(1), dim(2));
    let n = h
        .checked_mul(w)
        .and_then(|x| x.checked_mul(c))
        .ok_or_else(|| Error::format(path, "dimensions overflow"))?;
    if c == 0 {
        return Err(Error::format(path, "zero channels"));
    }
    if bytes.len() != HEADER_LEN + 4 * n {
        return Err(Error::format(
            path,
            format!(
                "payload is {} bytes, header {h}x{w}x{c} needs {}",
                bytes.len() - HEADER_LEN,
                4 * n
            ),
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let shape: Vec<usize> = if c == 1 { vec![h, w] } else { vec![h, w, c] };
    Ok(Tensor::new(&shape, data))
}

pub fn write_tabular(path: &Path, records: &[TabularRecord]) -> Result<()> {
    let mut s = CSV_COLUMNS.join(",");
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.subject_id,
            r.age,
            r.sex.code(),
            r.weight,
            r.injected_dose
        ));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads `tabular.csv`; column order is free, extra columns are ignored.
pub fn read_tabular(path: &Path) -> Result<Vec<TabularRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::format(path, "empty file"))?
        .split(',')
        .map(str::trim)
        .collect();
    let missing: Vec<String> = CSV_COLUMNS
        .iter()
        .filter(|c| !header.contains(c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Schema {
            path: path.to_path_buf(),
            missing,
        });
    }
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let idx: Vec<usize> = CSV_COLUMNS.iter().map(|c| col(c)).collect();
    let mut out = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let row = lineno + 2;
        if fields.len() != header.len() {
            return Err(Error::format(
                path,
                format!("row {row}: {} fields, header has {}", fields.len(), header.len()),
            ));
        }
        let num = |i: usize| -> Result<f64> {
            fields[idx[i]].parse::<f64>().map_err(|_| {
                Error::format(path, format!("row {row}: bad {} {:?}", CSV_COLUMNS[i], fields[idx[i]]))
            })
        };
        let sex = match fields[idx[2]] {
            "0" => Sex::F,
            "1" => Sex::M,
            other => return Err(Error::format(path, format!("row {row}: bad sex {other:?}"))),
        };
        out.push(TabularRecord {
            subject_id: fields[idx[0]].to_string(),
            age: num(1)?,
            sex,
            weight: num(3)?,
            injected_dose: num(4)?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn from_ratios(ids: &[String], ratios: [f64; 3]) -> Result<Self> {
        let (train, val, test) = split_dataset(ids, ratios)?;
        Ok(Self { train, val, test })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub master_seed: u64,
    /// Effective configuration at generation time.
    pub config: serde_json::Value,
    pub split: SplitAssignment,
    /// Per-subject generation seeds, keyed by id.
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub subjects: Vec<Subject>,
    pub split: SplitAssignment,
    pub manifest: Option<Manifest>,
}

impl Dataset {
    pub fn subjects_in(&self, split: Split) -> Vec<&Subject> {
        let by_id: BTreeMap<&str, &Subject> = self
            .subjects
            .iter()
            .map(|s| (s.record.subject_id.as_str(), s))
            .collect();
        self.split
            .ids(split)
            .iter()
            .filter_map(|id| by_id.get(id.as_str()).copied())
            .collect()
    }
}

fn image_path(dir: &Path, kind: &str, id: &str) -> PathBuf {
    dir.join(kind).join(format!("{id}.mcpt"))
}

/// Writes the dataset directory; the manifest is written when given.
pub fn write_dataset(dir: &Path, subjects: &[Subject], manifest: Option<&Manifest>) -> Result<()> {
    for kind in ["spet", "lpet"] {
        let d = dir.join(kind);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for s in subjects {
        write_image(&image_path(dir, "spet", &s.record.subject_id), &s.spet)?;
        write_image(&image_path(dir, "lpet", &s.record.subject_id), &s.lpet)?;
    }
    let records: Vec<TabularRecord> = subjects.iter().map(|s| s.record.clone()).collect();
    write_tabular(&dir.join("tabular.csv"), &records)?;
    if let Some(m) = manifest {
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(m).map_err(|e| Error::format(&path, e.to_string()))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Reads a dataset directory.
///
/// Without a manifest (externally supplied data) the split falls back to
/// `default_ratios` over the CSV order and subject seeds are 0.
pub fn read_dataset(dir: &Path, default_ratios: [f64; 3]) -> Result<Dataset> {
    let csv = dir.join("tabular.csv");
    let records = read_tabular(&csv)?;
    let manifest_path = dir.join("manifest.json");
    let manifest: Option<Manifest> = if manifest_path.exists() {
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        Some(
            serde_json::from_str(&text)
                .map_err(|e| Error::format(&manifest_path, e.to_string()))?,
        )
    } else {
        None
    };

    for kind in ["spet", "lpet"] {
        let d = dir.join(kind);
        let n_files = match fs::read_dir(&d) {
            Ok(rd) => rd
                .filter_map(|e| e.ok())
                .filter(|e| e.path().extension().is_some_and(|x| x == "mcpt"))
                .count(),
            Err(e) => return Err(Error::io(&d, e)),
        };
        if n_files != records.len() {
            return Err(Error::format(
                &d,
                format!("{n_files} images but {} tabular records", records.len()),
            ));
        }
    }

    let mut subjects = Vec::with_capacity(records.len());
    for record in records {
        let sp = image_path(dir, "spet", &record.subject_id);
        let lp = image_path(dir, "lpet", &record.subject_id);
        let spet = read_image(&sp)?;
        let lpet = read_image(&lp)?;
        if spet.shape() != lpet.shape() || spet.ndim() != 2 {
            return Err(Error::format(
                &lp,
                format!("shape {:?} does not match spet {:?}", lpet.shape(), spet.shape()),
            ));
        }
        let seed = manifest
            .as_ref()
            .and_then(|m| m.seeds.get(&record.subject_id).copied())
            .unwrap_or(0);
        subjects.push(Subject {
            record,
            spet,
            lpet,
            seed,
        });
    }

    let ids: Vec<String> = subjects.iter().map(|s| s.record.subject_id.clone()).collect();
    let split = match &manifest {
        Some(m) => {
            let unknown: Vec<String> = m
                .split
                .train
                .iter()
                .chain(&m.split.val)
                .chain(&m.split.test)
                .filter(|id| !ids.contains(id))
                .cloned()
                .collect();
            if !unknown.is_empty() {
                return Err(Error::format(
                    &manifest_path,
                    format!("split names unknown subjects {unknown:?}"),
                ));
            }
            m.split.clone()
        }
        None => SplitAssignment::from_ratios(&ids, default_ratios)?,
    };
    Ok(Dataset {
        subjects,
        split,
        manifest,
    })
}
