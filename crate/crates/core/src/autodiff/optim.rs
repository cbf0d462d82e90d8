use super::tensor::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            other => Err(format!("unknown optimizer {other:?} (expected sgd or adam)")),
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

/// First-order optimizer with per-tensor moment state.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer { kind, lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the stored gradients, then clears them.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(id) = store.ids().find(|&id| store.get(id).grad().is_none()) {
            return Err(Error::Contract(format!(
                "optimizer step without gradient for {}",
                store.name(id)
            )));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for id in store.ids().collect::<Vec<_>>() {
                    let t = store.get_mut(id);
                    let g = t.take_grad().unwrap();
                    for (v, gi) in t.values_mut().iter_mut().zip(&g) {
                        *v -= self.lr * gi;
                    }
                }
            }
            OptimizerKind::Adam => {
                if self.first.len() != store.len() {
                    self.first = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
                    self.second = self.first.clone();
                }
                let t = self.step as f64;
                let c1 = 1.0 - self.beta1.powf(t);
                let c2 = 1.0 - self.beta2.powf(t);
                for id in store.ids().collect::<Vec<_>>() {
                    let i = id.index();
                    let tensor = store.get_mut(id);
                    let g = tensor.take_grad().unwrap();
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (k, value) in tensor.values_mut().iter_mut().enumerate() {
                        m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                        v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        *value -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
