use std::collections::HashMap;
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};

/// Dense row-major array of doubles with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {expected} values, got {}", values.len()),
            ));
        }
        Ok(Tensor { shape, values, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, values: vec![0.0; n], grad: None }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut Vec<f64> {
        let n = self.values.len();
        self.grad.get_or_insert_with(|| vec![0.0; n])
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }
}

/// Handle to a tensor registered in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named registry of every learned tensor of a model.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

pub const CHECKPOINT_MAGIC: &str = "TDTD-CKPT v1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Contract(format!("invalid parameter name {name:?}")));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        let id = ParamId(self.tensors.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    /// Registers a tensor initialized uniformly in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn insert_uniform<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let values = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        self.insert(name, Tensor::new(shape, values)?)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Adds `scale * grads` into every tensor's gradient buffer, creating zeroed
    /// buffers where missing so unreachable tensors report zero.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (t, g) in self.tensors.iter_mut().zip(&grads.per_param) {
            let buf = t.grad_mut();
            if let Some(g) = g {
                for (b, v) in buf.iter_mut().zip(g) {
                    *b += scale * v;
                }
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            let n = t.len();
            t.grad = Some(vec![0.0; n]);
        }
    }

    pub fn clear_grads(&mut self) {
        for t in &mut self.tensors {
            t.clear_grad();
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(Tensor::grad)
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn value_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.values.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for t in &mut self.tensors {
            if let Some(g) = t.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// Serializes in the versioned text checkpoint format. Values use 17
    /// significant digits so a reload is bit-exact.
    pub fn to_checkpoint(&self) -> String {
        let mut out = String::with_capacity(self.num_values() * 24 + 64);
        out.push_str(CHECKPOINT_MAGIC);
        out.push('\n');
        for (name, t) in self.iter() {
            write!(out, "{} {}", name, t.shape.len()).unwrap();
            for d in &t.shape {
                write!(out, " {d}").unwrap();
            }
            out.push('\n');
            for (i, v) in t.values.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                write!(out, "{v:.16e}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Parses a checkpoint into a fresh store, preserving tensor order.
    pub fn from_checkpoint(text: &str) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, tensor) in parse_records(text)? {
            store.insert(name, tensor)?;
        }
        Ok(store)
    }

    /// Overwrites this store's values from a checkpoint. Every registered
    /// tensor must be present with an identical shape.
    pub fn load_checkpoint(&mut self, text: &str) -> Result<()> {
        let mut found: HashMap<String, Tensor> = parse_records(text)?.into_iter().collect();
        for (i, name) in self.names.iter().enumerate() {
            let Some(t) = found.get(name) else {
                return Err(Error::Checkpoint {
                    line: 0,
                    message: format!("missing tensor {name}"),
                });
            };
            if t.shape != self.tensors[i].shape {
                return Err(Error::Checkpoint {
                    line: 0,
                    message: format!(
                        "tensor {name}: expected shape {:?}, found {:?}",
                        self.tensors[i].shape, t.shape
                    ),
                });
            }
        }
        if found.len() > self.names.len() {
            let extra = found.keys().filter(|k| !self.index.contains_key(*k)).min();
            return Err(Error::Checkpoint {
                line: 0,
                message: format!("unexpected tensor {}", extra.map_or("?", |s| s.as_str())),
            });
        }
        for (i, name) in self.names.iter().enumerate() {
            self.tensors[i].values = found.remove(name).unwrap().values;
            self.tensors[i].grad = None;
        }
        Ok(())
    }
}

fn parse_records(text: &str) -> Result<Vec<(String, Tensor)>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, l)) if l.trim() == CHECKPOINT_MAGIC => {}
        Some((n, l)) => {
            return Err(Error::Checkpoint {
                line: n + 1,
                message: format!("expected header {CHECKPOINT_MAGIC:?}, found {:?}", l.trim()),
            })
        }
        None => return Err(Error::Checkpoint { line: 1, message: "empty checkpoint".into() }),
    }
    let mut out = Vec::new();
    while let Some((n, header)) = lines.next() {
        let lineno = n + 1;
        let mut fields = header.split_whitespace();
        let name = fields.next().unwrap().to_string();
        let ndim: usize = fields
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Checkpoint {
                line: lineno,
                message: format!("tensor {name}: missing or invalid rank"),
            })?;
        let shape = fields
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Checkpoint {
                line: lineno,
                message: format!("tensor {name}: bad dimension: {e}"),
            })?;
        if shape.len() != ndim {
            return Err(Error::Checkpoint {
                line: lineno,
                message: format!("tensor {name}: rank {ndim} but {} dimensions", shape.len()),
            });
        }
        let count: usize = shape.iter().product();
        let mut values = Vec::with_capacity(count);
        let mut value_line = lineno;
        while values.len() < count {
            let Some((m, l)) = lines.next() else {
                return Err(Error::Checkpoint {
                    line: value_line + 1,
                    message: format!(
                        "tensor {name}: expected {count} values, found {}",
                        values.len()
                    ),
                });
            };
            value_line = m + 1;
            for tok in l.split_whitespace() {
                let v: f64 = tok.parse().map_err(|_| Error::Checkpoint {
                    line: value_line,
                    message: format!("tensor {name}: invalid value {tok:?}"),
                })?;
                values.push(v);
            }
        }
        if values.len() != count {
            return Err(Error::Checkpoint {
                line: value_line,
                message: format!(
                    "tensor {name}: expected {count} values, found {}",
                    values.len()
                ),
            });
        }
        out.push((name, Tensor { shape, values, grad: None }));
    }
    Ok(out)
}

/// Gradients produced by one backward pass, indexed by parameter.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) per_param: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.per_param.get(id.0).and_then(|g| g.as_deref())
    }

    /// Element-wise sum in a fixed order.
    pub fn add_assign(&mut self, other: &Gradients) {
        if self.per_param.len() < other.per_param.len() {
            self.per_param.resize(other.per_param.len(), None);
        }
        for (mine, theirs) in self.per_param.iter_mut().zip(&other.per_param) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.iter_mut().zip(t).for_each(|(a, b)| *a += b),
                    None => *mine = Some(t.clone()),
                }
            }
        }
    }
}
