use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::tensor::ParamStore;
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Floor of the relative-error denominator, per unit of loss magnitude.
///
/// Rounding in `loss(x + eps) - loss(x - eps)` leaves about
/// `|L| * 1e-16 / eps` of noise in the numeric derivative, so below this
/// floor the comparison measures rounding, not the gradient.
pub const FLOOR_PER_UNIT_LOSS: f64 = 1e-6;

/// Compares analytic gradients against central finite differences.
///
/// At most `per_tensor` coordinates of each tensor are probed, chosen with a
/// seeded rng. The error of a coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, floor)` with
/// `floor = max(1e-8, FLOOR_PER_UNIT_LOSS * max(1, |L|))`.
pub fn gradient_check<F>(
    store: &ParamStore,
    eps: f64,
    per_tensor: usize,
    seed: u64,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<NodeId>,
{
    let (analytic, floor) = {
        let mut g = Graph::new(store);
        let l = loss(&mut g)?;
        let floor = (FLOOR_PER_UNIT_LOSS * g.scalar(l).abs().max(1.0)).max(1e-8);
        (g.backward(l, 1.0)?, floor)
    };
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s);
        let l = loss(&mut g)?;
        Ok(g.scalar(l))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, coordinates: 0, worst: None };
    for id in store.ids() {
        let n = store.get(id).len();
        let coords: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, per_tensor).into_vec();
            c.sort_unstable();
            c
        };
        for k in coords {
            let original = store.get(id).values()[k];
            probe.get_mut(id).values_mut()[k] = original + eps;
            let plus = eval(&probe)?;
            probe.get_mut(id).values_mut()[k] = original - eps;
            let minus = eval(&probe)?;
            probe.get_mut(id).values_mut()[k] = original;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(id).map_or(0.0, |g| g[k]);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), k));
            }
        }
    }
    Ok(report)
}
