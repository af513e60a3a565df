//! Named parameter storage and the Adam optimizer.

use std::collections::BTreeMap;

use rand::Rng;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named trainable tensors.
///
/// Names are dotted paths whose first component is the parameter group
/// (`gen`, `disc`, `branch`, `omta`, `ca`, `text`, `tab`, `rec`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    /// Adds a tensor with entries drawn from N(0, std^2).
    pub fn add_randn<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        self.add(name, Tensor::randn(shape, std, rng))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Parameter ids whose name starts with `group.`.
    pub fn group(&self, group: &str) -> Vec<ParamId> {
        let prefix = format!("{group}.");
        self.iter()
            .filter(|(_, n, _)| n.starts_with(&prefix))
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed subset of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub params: Vec<ParamId>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore, params: Vec<ParamId>) -> Self {
        let m: Vec<Tensor> = params
            .iter()
            .map(|&id| Tensor::zeros(store.get(id).shape()))
            .collect();
        Self {
            cfg,
            v: m.clone(),
            m,
            params,
            step: 0,
        }
    }

    /// Applies one update. Parameters without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, &id) in self.params.iter().enumerate() {
            let Some(g) = grads.get(id.0).and_then(Option::as_ref) else {
                continue;
            };
            let m = self.m[k].data_mut();
            for (mi, gi) in m.iter_mut().zip(g.data()) {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
            }
            let v = self.v[k].data_mut();
            for (vi, gi) in v.iter_mut().zip(g.data()) {
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            }
            apply(store.get_mut(id), &self.m[k], &self.v[k], lr, bc1, bc2, eps);
        }
    }
}

fn apply(p: &mut Tensor, m: &Tensor, v: &Tensor, lr: f64, bc1: f64, bc2: f64, eps: f64) {
    for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
        let mhat = mi / bc1;
        let vhat = vi / bc2;
        *pi -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// Cosine-decayed learning rate: `lr0 * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(lr0: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let frac = (step.min(total_steps)) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}
