//! Binary checkpoints: `"MCKP"`, u32 version, u64-length-prefixed JSON
//! metadata, then named little-endian f64 arrays.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainState;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{Adam, ParamStore};
use crate::tabenc::Vocabulary;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MCKP";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: RunConfig,
    pub vocabulary: Vocabulary,
    pub epoch: usize,
    pub step: u64,
    pub adam_g_step: u64,
    pub adam_d_step: Option<u64>,
    pub arrays: Vec<ArrayInfo>,
}

fn adam_arrays<'a>(prefix: &str, opt: &'a Adam, store: &ParamStore, out: &mut Vec<(String, &'a Tensor)>) {
    for (k, &id) in opt.params.iter().enumerate() {
        out.push((format!("{prefix}.m/{}", store.name(id)), &opt.m[k]));
    }
    for (k, &id) in opt.params.iter().enumerate() {
        out.push((format!("{prefix}.v/{}", store.name(id)), &opt.v[k]));
    }
}

fn collect(state: &TrainState) -> Vec<(String, &Tensor)> {
    let store = &state.model.store;
    let mut out: Vec<(String, &Tensor)> = store
        .iter()
        .map(|(_, n, t)| (format!("param/{n}"), t))
        .collect();
    adam_arrays("adam_g", &state.opt_g, store, &mut out);
    if let Some(d) = &state.opt_d {
        adam_arrays("adam_d", d, store, &mut out);
    }
    out
}

pub fn to_bytes(state: &TrainState) -> Vec<u8> {
    let arrays = collect(state);
    let meta = CheckpointMeta {
        config: state.model.cfg.clone(),
        vocabulary: state.model.vocab.clone(),
        epoch: state.epoch,
        step: state.step,
        adam_g_step: state.opt_g.step,
        adam_d_step: state.opt_d.as_ref().map(|d| d.step),
        arrays: arrays
            .iter()
            .map(|(n, t)| ArrayInfo {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (name, t) in arrays {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.numel() as u64).to_le_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

pub fn save(path: &Path, state: &TrainState) -> Result<()> {
    std::fs::write(path, to_bytes(state)).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses metadata and every named array.
pub fn parse(path: &Path, bytes: &[u8]) -> Result<(CheckpointMeta, BTreeMap<String, Vec<f64>>)> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let len = r.u64()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::format(path, format!("metadata: {e}")))?;
    let mut arrays = BTreeMap::new();
    while r.pos < bytes.len() {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| Error::format(path, "array name is not UTF-8"))?
            .to_string();
        let count = r.u64()? as usize;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::format(path, "array too large"))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.insert(name, data);
    }
    Ok((meta, arrays))
}

pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<TrainState> {
    let (meta, mut arrays) = parse(path, bytes)?;
    meta.config
        .validate()
        .map_err(|e| Error::format(path, format!("embedded config: {e}")))?;
    let mut state = TrainState::new(&meta.config)?;
    if state.model.vocab != meta.vocabulary {
        return Err(Error::format(path, "vocabulary does not match the embedded config"));
    }
    let mut fill = |name: String, t: &mut Tensor| -> Result<()> {
        let data = arrays
            .remove(&name)
            .ok_or_else(|| Error::format(path, format!("missing array {name}")))?;
        if data.len() != t.numel() {
            return Err(Error::format(
                path,
                format!("array {name} has {} values, expected {}", data.len(), t.numel()),
            ));
        }
        t.data_mut().copy_from_slice(&data);
        Ok(())
    };
    let ids: Vec<_> = state.model.store.ids().collect();
    for &id in &ids {
        let name = format!("param/{}", state.model.store.name(id));
        fill(name, state.model.store.get_mut(id))?;
    }
    let names: Vec<String> = ids.iter().map(|&id| state.model.store.name(id).to_string()).collect();
    let mut fill_adam = |prefix: &str, opt: &mut Adam, step: u64| -> Result<()> {
        for k in 0..opt.params.len() {
            let n = &names[opt.params[k].index()];
            fill(format!("{prefix}.m/{n}"), &mut opt.m[k])?;
            fill(format!("{prefix}.v/{n}"), &mut opt.v[k])?;
        }
        opt.step = step;
        Ok(())
    };
    fill_adam("adam_g", &mut state.opt_g, meta.adam_g_step)?;
    match (state.opt_d.as_mut(), meta.adam_d_step) {
        (Some(d), Some(s)) => fill_adam("adam_d", d, s)?,
        (None, None) => {}
        _ => return Err(Error::format(path, "discriminator optimizer presence mismatch")),
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::format(path, format!("unexpected array {extra}")));
    }
    state.epoch = meta.epoch;
    state.step = meta.step;
    Ok(state)
}

pub fn load(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(path, &bytes)
}
