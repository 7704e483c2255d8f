use super::autodiff::{Gradients, Graph, Var};
use super::tensor::Tensor;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(t);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalars.
    pub fn n_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        self.values
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(i, t))
            .collect()
    }

    /// Dense per-parameter gradients, zero where a parameter was unused.
    pub fn collect_grads(&self, g: &Graph, grads: &Gradients) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.values.iter().map(|t| vec![0.0; t.len()]).collect();
        for (i, d) in g.param_grads(grads) {
            out[i].iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
        out
    }

    /// Copies values from a store with identical names and shapes.
    pub(crate) fn assign_from(&mut self, src: ParamStore) -> Result<(), String> {
        if src.len() != self.len() {
            return Err(format!(
                "expected {} parameters, found {}",
                self.len(),
                src.len()
            ));
        }
        for i in 0..src.len() {
            if src.names[i] != self.names[i] || src.values[i].shape() != self.values[i].shape() {
                return Err(format!("parameter {} does not match", self.names[i]));
            }
        }
        self.values = src.values;
        Ok(())
    }

    pub fn flat_get(&self, k: usize) -> f64 {
        let (i, j) = self.locate(k);
        self.values[i].data()[j]
    }

    pub fn flat_set(&mut self, k: usize, v: f64) {
        let (i, j) = self.locate(k);
        self.values[i].data_mut()[j] = v;
    }

    fn locate(&self, mut k: usize) -> (usize, usize) {
        for (i, t) in self.values.iter().enumerate() {
            if k < t.len() {
                return (i, k);
            }
            k -= t.len();
        }
        panic!("flat parameter index out of range");
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip, if any.
    pub clip: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip: Some(1.0),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.values.iter().map(|t| vec![0.0; t.len()]).collect();
        Adam {
            config,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One bias-corrected update. Returns the gradient norm before clipping.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Vec<f64>]) -> f64 {
        let c = self.config;
        let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
        let mult = match c.clip {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = store.values[i].data_mut();
            for j in 0..g.len() {
                let gj = g[j] * mult;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                p[j] -= c.lr * (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
            }
        }
        norm
    }
}
