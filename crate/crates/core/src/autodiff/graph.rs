//! Tape-based reverse-mode differentiation over vectors.
//!
//! Every node holds a flat vector. Parameters are read in place from the
//! borrowed [`ParamStore`]; matrices are only ever consumed by `affine` and
//! `row`, which interpret them as `[rows, cols]`.

use super::tensor::{Gradients, ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    /// `x · W + b` with `x: [n]`, `W: [n, m]`, `b: [m]`.
    Affine { x: NodeId, w: ParamId, b: Option<ParamId> },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    OneMinus(NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Concat(Vec<NodeId>),
    /// Row `row` of a `[rows, cols]` parameter matrix.
    Row { table: ParamId, row: usize },
    /// Log-softmax; masked entries are excluded and produce `-inf`.
    LogSoftmax { x: NodeId, mask: Option<Vec<bool>> },
    Pick(NodeId, usize),
    Sum(NodeId),
    Dot(NodeId, NodeId),
    /// Vector times a scalar node.
    ScaleBy(NodeId, NodeId),
}

struct Node {
    op: Op,
    value: Vec<f64>,
}

/// A single forward computation recorded for differentiation.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph { store, nodes: Vec::with_capacity(256), param_nodes: vec![None; store.len()] }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        let node = &self.nodes[id.0];
        match node.op {
            Op::Param(p) => self.store.get(p).values(),
            _ => &node.value,
        }
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, values: Vec<f64>) -> NodeId {
        self.push(Op::Input, values)
    }

    /// Node reading a parameter tensor as a flat vector.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id.0] {
            return n;
        }
        let n = self.push(Op::Param(id), Vec::new());
        self.param_nodes[id.0] = Some(n);
        n
    }

    fn matrix_dims(&self, w: ParamId, op: &'static str) -> Result<(usize, usize)> {
        match self.store.get(w).shape() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(op, format!("{} must be a matrix, has shape {s:?}", self.store.name(w)))),
        }
    }

    pub fn affine(&mut self, x: NodeId, w: ParamId, b: Option<ParamId>) -> Result<NodeId> {
        let (rows, cols) = self.matrix_dims(w, "affine")?;
        let xv = self.value(x);
        if xv.len() != rows {
            return Err(Error::dim(
                "affine",
                format!("input length {} vs weight {} rows {rows}", xv.len(), self.store.name(w)),
            ));
        }
        let mut out = match b {
            Some(b) => {
                let bv = self.store.get(b).values();
                if bv.len() != cols {
                    return Err(Error::dim(
                        "affine",
                        format!("bias {} length {} vs {cols} columns", self.store.name(b), bv.len()),
                    ));
                }
                bv.to_vec()
            }
            None => vec![0.0; cols],
        };
        let wv = self.store.get(w).values();
        for (i, &xi) in xv.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &wv[i * cols..(i + 1) * cols];
            for (o, &wij) in out.iter_mut().zip(row) {
                *o += xi * wij;
            }
        }
        Ok(self.push(Op::Affine { x, w, b }, out))
    }

    fn same_len(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        let (la, lb) = (self.value(a).len(), self.value(b).len());
        if la != lb {
            return Err(Error::dim(op, format!("lengths {la} and {lb} differ")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len("add", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        Ok(self.push(Op::Add(a, b), v))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len("mul", a, b)?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        Ok(self.push(Op::Mul(a, b), v))
    }

    pub fn one_minus(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|x| 1.0 - x).collect();
        self.push(Op::OneMinus(a), v)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).iter().map(|x| x * factor).collect();
        self.push(Op::Scale(a, factor), v)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        self.push(Op::Sigmoid(a), v)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|x| x.tanh()).collect();
        self.push(Op::Tanh(a), v)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).iter().map(|x| x.exp()).collect();
        self.push(Op::Exp(a), v)
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        let total = parts.iter().map(|&p| self.value(p).len()).sum();
        let mut v = Vec::with_capacity(total);
        for &p in parts {
            v.extend_from_slice(self.value(p));
        }
        self.push(Op::Concat(parts.to_vec()), v)
    }

    /// Embedding lookup.
    pub fn row(&mut self, table: ParamId, row: usize) -> Result<NodeId> {
        let (rows, cols) = self.matrix_dims(table, "row")?;
        if row >= rows {
            return Err(Error::dim(
                "row",
                format!("row {row} out of range for {} with {rows} rows", self.store.name(table)),
            ));
        }
        let v = self.store.get(table).values()[row * cols..(row + 1) * cols].to_vec();
        Ok(self.push(Op::Row { table, row }, v))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        let v = log_softmax_values(self.value(x), None);
        self.push(Op::LogSoftmax { x, mask: None }, v)
    }

    /// Log-softmax restricted to entries where `allowed` is true.
    pub fn log_softmax_masked(&mut self, x: NodeId, allowed: Vec<bool>) -> Result<NodeId> {
        if allowed.len() != self.value(x).len() {
            return Err(Error::dim(
                "log_softmax",
                format!("mask length {} vs input {}", allowed.len(), self.value(x).len()),
            ));
        }
        if !allowed.iter().any(|&a| a) {
            return Err(Error::Contract("log_softmax mask excludes every entry".into()));
        }
        let v = log_softmax_values(self.value(x), Some(&allowed));
        Ok(self.push(Op::LogSoftmax { x, mask: Some(allowed) }, v))
    }

    pub fn pick(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let xv = self.value(x);
        if index >= xv.len() {
            return Err(Error::dim("pick", format!("index {index} out of range {}", xv.len())));
        }
        let v = vec![xv[index]];
        Ok(self.push(Op::Pick(x, index), v))
    }

    /// Negative log-likelihood of `target` given log-probabilities.
    pub fn nll(&mut self, log_probs: NodeId, target: usize) -> Result<NodeId> {
        let p = self.pick(log_probs, target)?;
        Ok(self.scale(p, -1.0))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let v = vec![self.value(x).iter().sum()];
        self.push(Op::Sum(x), v)
    }

    /// Sum of a list of scalar nodes; a single node is returned as is.
    pub fn sum_scalars(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        match terms {
            [] => Ok(self.input(vec![0.0])),
            [one] => Ok(*one),
            _ => {
                let c = self.concat(terms);
                if self.value(c).len() != terms.len() {
                    return Err(Error::dim("sum_scalars", "terms must be scalars"));
                }
                Ok(self.sum(c))
            }
        }
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len("dot", a, b)?;
        let v = vec![self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum()];
        Ok(self.push(Op::Dot(a, b), v))
    }

    pub fn scale_by(&mut self, v: NodeId, s: NodeId) -> Result<NodeId> {
        let sv = self.value(s);
        if sv.len() != 1 {
            return Err(Error::dim("scale_by", format!("scale must be scalar, has {}", sv.len())));
        }
        let f = sv[0];
        let out = self.value(v).iter().map(|x| x * f).collect();
        Ok(self.push(Op::ScaleBy(v, s), out))
    }

    /// Propagates d(loss)/d(node) back to every parameter. `seed` scales the
    /// loss gradient (use `1/batch` for a mean).
    pub fn backward(&self, loss: NodeId, seed: f64) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got length {}",
                self.value(loss).len()
            )));
        }
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); loss.0 + 1];
        grads[loss.0] = vec![seed];
        let mut per_param: Vec<Option<Vec<f64>>> = vec![None; self.store.len()];

        fn acc(slot: &mut Vec<f64>, len: usize) -> &mut Vec<f64> {
            if slot.is_empty() {
                slot.resize(len, 0.0);
            }
            slot
        }
        fn param_acc<'a>(pp: &'a mut [Option<Vec<f64>>], store: &ParamStore, p: ParamId) -> &'a mut Vec<f64> {
            pp[p.0].get_or_insert_with(|| vec![0.0; store.get(p).len()])
        }

        for idx in (0..=loss.0).rev() {
            if grads[idx].is_empty() {
                continue;
            }
            let g = std::mem::take(&mut grads[idx]);
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(p) => {
                    let buf = param_acc(&mut per_param, self.store, *p);
                    buf.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                }
                Op::Affine { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.store.get(*w).values();
                    let cols = g.len();
                    {
                        let gx = acc(&mut grads[x.0], xv.len());
                        for (i, gxi) in gx.iter_mut().enumerate() {
                            let row = &wv[i * cols..(i + 1) * cols];
                            *gxi += row.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                    let gw = param_acc(&mut per_param, self.store, *w);
                    for (i, &xi) in xv.iter().enumerate() {
                        if xi == 0.0 {
                            continue;
                        }
                        let row = &mut gw[i * cols..(i + 1) * cols];
                        for (r, &gj) in row.iter_mut().zip(&g) {
                            *r += xi * gj;
                        }
                    }
                    if let Some(b) = b {
                        let gb = param_acc(&mut per_param, self.store, *b);
                        gb.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                    }
                }
                Op::Add(a, b) => {
                    for n in [a, b] {
                        let ga = acc(&mut grads[n.0], g.len());
                        ga.iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                    let ga = acc(&mut grads[a.0], g.len());
                    for ((x, gi), bi) in ga.iter_mut().zip(&g).zip(&bv) {
                        *x += gi * bi;
                    }
                    let gb = acc(&mut grads[b.0], g.len());
                    for ((x, gi), ai) in gb.iter_mut().zip(&g).zip(&av) {
                        *x += gi * ai;
                    }
                }
                Op::OneMinus(a) => {
                    let ga = acc(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x -= y);
                }
                Op::Scale(a, f) => {
                    let ga = acc(&mut grads[a.0], g.len());
                    ga.iter_mut().zip(&g).for_each(|(x, y)| *x += f * y);
                }
                Op::Sigmoid(a) => {
                    let ga = acc(&mut grads[a.0], g.len());
                    for ((x, gi), y) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *x += gi * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let ga = acc(&mut grads[a.0], g.len());
                    for ((x, gi), y) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *x += gi * (1.0 - y * y);
                    }
                }
                Op::Exp(a) => {
                    let ga = acc(&mut grads[a.0], g.len());
                    for ((x, gi), y) in ga.iter_mut().zip(&g).zip(&node.value) {
                        *x += gi * y;
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.value(*p).len();
                        let gp = acc(&mut grads[p.0], len);
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y);
                        off += len;
                    }
                }
                Op::Row { table, row } => {
                    let cols = g.len();
                    let gt = param_acc(&mut per_param, self.store, *table);
                    gt[row * cols..(row + 1) * cols].iter_mut().zip(&g).for_each(|(x, y)| *x += y);
                }
                Op::LogSoftmax { x, mask } => {
                    // d/dx_j = g_j - softmax_j * sum(g) over allowed entries.
                    let allowed = |j: usize| mask.as_ref().map_or(true, |m| m[j]);
                    let total: f64 = g.iter().enumerate().filter(|(j, _)| allowed(*j)).map(|(_, v)| v).sum();
                    let gx = acc(&mut grads[x.0], g.len());
                    for (j, gxj) in gx.iter_mut().enumerate() {
                        if allowed(j) {
                            *gxj += g[j] - node.value[j].exp() * total;
                        }
                    }
                }
                Op::Pick(x, i) => {
                    let len = self.value(*x).len();
                    acc(&mut grads[x.0], len)[*i] += g[0];
                }
                Op::Sum(x) => {
                    let len = self.value(*x).len();
                    acc(&mut grads[x.0], len).iter_mut().for_each(|v| *v += g[0]);
                }
                Op::Dot(a, b) => {
                    let (av, bv) = (self.value(*a).to_vec(), self.value(*b).to_vec());
                    let ga = acc(&mut grads[a.0], av.len());
                    ga.iter_mut().zip(&bv).for_each(|(x, y)| *x += g[0] * y);
                    let gb = acc(&mut grads[b.0], bv.len());
                    gb.iter_mut().zip(&av).for_each(|(x, y)| *x += g[0] * y);
                }
                Op::ScaleBy(v, s) => {
                    let vv = self.value(*v).to_vec();
                    let f = self.value(*s)[0];
                    let gv = acc(&mut grads[v.0], vv.len());
                    gv.iter_mut().zip(&g).for_each(|(x, y)| *x += f * y);
                    let gs: f64 = g.iter().zip(&vv).map(|(a, b)| a * b).sum();
                    acc(&mut grads[s.0], 1)[0] += gs;
                }
            }
        }
        Ok(Gradients { per_param })
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_softmax_values(x: &[f64], mask: Option<&[bool]>) -> Vec<f64> {
    let allowed = |j: usize| mask.map_or(true, |m| m[j]);
    let max = x
        .iter()
        .enumerate()
        .filter(|(j, _)| allowed(*j))
        .map(|(_, v)| *v)
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + x.iter()
            .enumerate()
            .filter(|(j, _)| allowed(*j))
            .map(|(_, v)| (v - max).exp())
            .sum::<f64>()
            .ln();
    x.iter()
        .enumerate()
        .map(|(j, v)| if allowed(j) { v - lse } else { f64::NEG_INFINITY })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tensor::Tensor;

    fn store_with(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> ParamStore {
        let mut s = ParamStore::new();
        for (n, shape, v) in entries {
            s.insert(*n, Tensor::new(shape.clone(), v.clone()).unwrap()).unwrap();
        }
        s
    }

    #[test]
    fn affine_identity() {
        let s = store_with(&[("w", vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]), ("b", vec![2], vec![0.0, 0.0])]);
        let mut g = Graph::new(&s);
        let x = g.input(vec![1.0, 2.0]);
        let y = g.affine(x, s.id("w").unwrap(), s.id("b")).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(vec![0.0]);
        let y = g.sigmoid(x);
        assert_eq!(g.value(y), &[0.5]);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let s = store_with(&[("x", vec![3], vec![0.0; 3])]);
        let mut g = Graph::new(&s);
        let x = g.param(s.id("x").unwrap());
        let t = g.tanh(x);
        let l = g.sum(t);
        let grads = g.backward(l, 1.0).unwrap();
        assert_eq!(grads.get(s.id("x").unwrap()).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn product_rule() {
        let s = store_with(&[("x", vec![1], vec![3.0]), ("y", vec![1], vec![4.0])]);
        let mut g = Graph::new(&s);
        let x = g.param(s.id("x").unwrap());
        let y = g.param(s.id("y").unwrap());
        let l = g.mul(x, y).unwrap();
        let grads = g.backward(l, 1.0).unwrap();
        assert_eq!(grads.get(s.id("x").unwrap()).unwrap(), &[4.0]);
        assert_eq!(grads.get(s.id("y").unwrap()).unwrap(), &[3.0]);
    }

    #[test]
    fn sum_gradient_is_ones_and_unreached_is_zero() {
        let mut s = store_with(&[("x", vec![2, 3], vec![0.5; 6]), ("unused", vec![2], vec![1.0; 2])]);
        let grads = {
            let mut g = Graph::new(&s);
            let x = g.param(s.id("x").unwrap());
            let l = g.sum(x);
            g.backward(l, 1.0).unwrap()
        };
        assert_eq!(grads.get(s.id("x").unwrap()).unwrap(), &[1.0; 6]);
        s.accumulate(&grads, 1.0);
        assert_eq!(s.by_name("unused").unwrap().grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(vec![1.0, 2.0]);
        assert!(matches!(g.backward(x, 1.0), Err(Error::Contract(_))));
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let s = store_with(&[("w", vec![3, 2], vec![0.0; 6])]);
        let mut g = Graph::new(&s);
        let x = g.input(vec![1.0, 2.0]);
        let err = g.affine(x, s.id("w").unwrap(), None).unwrap_err();
        assert!(matches!(err, Error::Dimension { op: "affine", .. }));
        let y = g.input(vec![1.0]);
        assert!(matches!(g.add(x, y), Err(Error::Dimension { op: "add", .. })));
    }

    #[test]
    fn masked_log_softmax_normalizes_over_allowed() {
        let s = ParamStore::new();
        let mut g = Graph::new(&s);
        let x = g.input(vec![0.3, -1.0, 2.0]);
        let y = g.log_softmax_masked(x, vec![true, false, true]).unwrap();
        let v = g.value(y);
        assert_eq!(v[1], f64::NEG_INFINITY);
        assert!((v[0].exp() + v[2].exp() - 1.0).abs() < 1e-15);
        assert!(g.log_softmax_masked(x, vec![false; 3]).is_err());
    }
}
