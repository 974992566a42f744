//! Learnable tensors, gradient buffers and the Adam optimizer.

use serde::{Deserialize, Serialize};

/// Index of a parameter tensor within its model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Hash-grid feature tables.
    HashTable,
    /// Height-field raw heights and column embeddings.
    Grid,
    /// Dense network weights and biases.
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub id: ParamId,
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub group: ParamGroup,
}

impl Param {
    pub fn new(id: ParamId, name: &str, shape: Vec<usize>, data: Vec<f64>, group: ParamGroup) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name}: shape/data mismatch");
        Self { id, name: name.to_string(), shape, data, group }
    }

    pub fn zeros(id: ParamId, name: &str, shape: Vec<usize>, group: ParamGroup) -> Self {
        let n = shape.iter().product();
        Self::new(id, name, shape, vec![0.0; n], group)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Shape folded to 2D: leading dimensions become rows.
    pub fn matrix_shape(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [] => (1, 1),
            [n] => (1, *n),
            [.., last] => (self.data.len() / last.max(&1), *last),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Anything that owns an ordered set of [`Param`]s with ids `0..n`.
pub trait ParameterSet {
    fn params(&self) -> Vec<&Param>;
    fn params_mut(&mut self) -> Vec<&mut Param>;

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

impl ParameterSet for Vec<Param> {
    fn params(&self) -> Vec<&Param> {
        self.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.iter_mut().collect()
    }
}

/// One gradient buffer per parameter, indexed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    bufs: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn for_params<'a>(params: impl IntoIterator<Item = &'a Param>) -> Self {
        let mut bufs: Vec<Vec<f64>> = Vec::new();
        for p in params {
            if bufs.len() <= p.id.0 {
                bufs.resize(p.id.0 + 1, Vec::new());
            }
            bufs[p.id.0] = vec![0.0; p.len()];
        }
        Self { bufs }
    }

    pub fn for_set(set: &impl ParameterSet) -> Self {
        Self::for_params(set.params())
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.bufs[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, g: &[f64]) {
        let buf = &mut self.bufs[id.0];
        assert_eq!(buf.len(), g.len(), "gradient shape mismatch for param {}", id.0);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }

    pub fn zero(&mut self) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.bufs.iter().flatten().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.bufs.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.99, eps: 1e-15 }
    }
}

/// Adam with bias correction. Moments start at zero.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, set: &impl ParameterSet) -> Self {
        let params = set.params();
        let n = params.iter().map(|p| p.id.0 + 1).max().unwrap_or(0);
        let mut m = vec![Vec::new(); n];
        for p in &params {
            m[p.id.0] = vec![0.0; p.len()];
        }
        Self { config, v: m.clone(), m, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. `lr` maps each parameter group to its current rate.
    pub fn step(&mut self, set: &mut impl ParameterSet, grads: &Gradients, lr: impl Fn(ParamGroup) -> f64) {
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for p in set.params_mut() {
            let id = p.id.0;
            let g = grads.get(p.id);
            let rate = lr(p.group);
            let (m, v) = (&mut self.m[id], &mut self.v[id]);
            for i in 0..p.data.len() {
                let gi = g[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p.data[i] -= rate * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}
