//! Parameter bundles shared by the models: GRU cells and affine layers.

use rand::Rng;

use crate::autodiff::{Graph, NodeId, ParamId, ParamStore};
use crate::error::Result;

/// Single-layer GRU cell.
///
/// ```text
/// z  = sigmoid([x; h] Wz + bz)
/// r  = sigmoid([x; h] Wr + br)
/// n  = tanh([x; r*h] Wn + bn)
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Debug, Clone, Copy)]
pub struct Gru {
    pub input: usize,
    pub hidden: usize,
    w_z: ParamId,
    b_z: ParamId,
    w_r: ParamId,
    b_r: ParamId,
    w_n: ParamId,
    b_n: ParamId,
}

impl Gru {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan = input + hidden;
        let mat = |s: &mut ParamStore, n: &str, r: &mut R| {
            s.insert_uniform(format!("{prefix}.{n}"), vec![fan, hidden], fan, r)
        };
        let w_z = mat(store, "w_z", rng)?;
        let w_r = mat(store, "w_r", rng)?;
        let w_n = mat(store, "w_n", rng)?;
        let b_z = store.insert_uniform(format!("{prefix}.b_z"), vec![hidden], fan, rng)?;
        let b_r = store.insert_uniform(format!("{prefix}.b_r"), vec![hidden], fan, rng)?;
        let b_n = store.insert_uniform(format!("{prefix}.b_n"), vec![hidden], fan, rng)?;
        Ok(Gru { input, hidden, w_z, b_z, w_r, b_r, w_n, b_n })
    }

    pub fn step(&self, g: &mut Graph, h: NodeId, x: NodeId) -> Result<NodeId> {
        let xh = g.concat(&[x, h]);
        let z_pre = g.affine(xh, self.w_z, Some(self.b_z))?;
        let z = g.sigmoid(z_pre);
        let r_pre = g.affine(xh, self.w_r, Some(self.b_r))?;
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, h)?;
        let xrh = g.concat(&[x, rh]);
        let n_pre = g.affine(xrh, self.w_n, Some(self.b_n))?;
        let n = g.tanh(n_pre);
        let keep = g.mul(z, h)?;
        let one_minus_z = g.one_minus(z);
        let fresh = g.mul(one_minus_z, n)?;
        g.add(fresh, keep)
    }
}

/// `x · W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub input: usize,
    pub output: usize,
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.insert_uniform(format!("{prefix}.w"), vec![input, output], input, rng)?;
        let b = store.insert_uniform(format!("{prefix}.b"), vec![output], input, rng)?;
        Ok(Linear { input, output, w, b })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        g.affine(x, self.w, Some(self.b))
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gru_step_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = ParamStore::new();
        let cell = Gru::register(&mut s, "gru", 4, 3, &mut rng).unwrap();
        let cell2 = Gru::register(&mut s, "gru2", 3, 3, &mut rng).unwrap();
        let head = Linear::register(&mut s, "head", 3, 5, &mut rng).unwrap();
        let xs: Vec<Vec<f64>> = (0..3).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        let report = gradient_check(&s, 1e-5, 1000, 2, |g| {
            let mut h1 = g.input(vec![0.1, -0.2, 0.3]);
            let mut h2 = g.input(vec![0.0; 3]);
            let mut terms = Vec::new();
            for (t, x) in xs.iter().enumerate() {
                let xi = g.input(x.clone());
                h1 = cell.step(g, h1, xi)?;
                h2 = cell2.step(g, h2, h1)?;
                let logits = head.forward(g, h2)?;
                let lp = g.log_softmax(logits);
                terms.push(g.pick(lp, t)?);
            }
            g.sum_scalars(&terms)
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
