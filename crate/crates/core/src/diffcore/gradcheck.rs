//! Central finite-difference verification of reverse-mode gradients.

use std::collections::BTreeMap;

use serde::Serialize;

use super::graph::{Feed, Graph, LeafKind, NodeId};
use crate::error::{Error, Result};

/// Largest accepted analytic-vs-numeric relative error.
pub const GRAD_TOLERANCE: f64 = 1e-5;

const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, Serialize)]
pub struct LeafReport {
    pub max_rel_error: f64,
    pub elements: usize,
    /// The analytic gradient is exactly zero everywhere.
    pub all_zero: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub step: f64,
    pub leaves: BTreeMap<String, LeafReport>,
    pub pass: bool,
}

impl GradReport {
    pub fn max_rel_error(&self) -> f64 {
        self.leaves.values().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `backward(seed)` against central differences for every parameter leaf.
///
/// Each perturbed point is re-evaluated through the whole graph with every
/// `detach` output held at its unperturbed value, so both sides differentiate
/// the same function.
pub fn check_gradients(graph: &Graph, point: &Feed<f64>, seed: NodeId, step: f64) -> Result<GradReport> {
    if !(1e-7..=1e-4).contains(&step) {
        return Err(Error::config(format!(
            "finite-difference step {step} outside [1e-7, 1e-4]"
        )));
    }
    let base = graph.evaluate(point)?;
    let analytic = base.backward_where(seed, |_, kind| kind == LeafKind::Param)?;
    let pinned = base.detached_values();
    drop(base);

    let mut work = point.clone();
    let mut leaves = BTreeMap::new();
    for (name, grad) in &analytic {
        let mut worst = 0.0f64;
        for i in 0..grad.len() {
            let base = work[name].data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = base + step;
            let plus = graph.evaluate_pinned(&work, &pinned)?.value(seed).item();
            work.get_mut(name).unwrap().data_mut()[i] = base - step;
            let minus = graph.evaluate_pinned(&work, &pinned)?.value(seed).item();
            work.get_mut(name).unwrap().data_mut()[i] = base;
            let numeric = (plus - minus) / (2.0 * step);
            if !numeric.is_finite() {
                return Err(Error::numeric(format!("finite difference of {name}[{i}]")));
            }
            worst = worst.max(relative_error(grad.data()[i], numeric));
        }
        leaves.insert(
            name.clone(),
            LeafReport {
                max_rel_error: worst,
                elements: grad.len(),
                all_zero: grad.data().iter().all(|&g| g == 0.0),
            },
        );
    }
    let pass = leaves.values().all(|l| l.max_rel_error <= GRAD_TOLERANCE);
    Ok(GradReport { step, leaves, pass })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::Array;

    #[test]
    fn quadratic_is_essentially_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.param("x", &[6]).unwrap();
        let sq = g.square(x);
        let s = g.sum_all(sq).unwrap();
        let mut feed = Feed::new();
        feed.insert("x".into(), Array::from_fn(&[6], |_| rng.random_range(-2.0..2.0)));
        let report = check_gradients(&g, &feed, s, 1e-6).unwrap();
        assert!(report.pass);
        assert!(report.max_rel_error() <= 1e-8, "{}", report.max_rel_error());
    }

    #[test]
    fn detach_is_respected_by_both_sides() {
        let mut g = Graph::new();
        let x = g.param("x", &[3]).unwrap();
        let d = g.detach(x);
        let e = g.exp(d);
        let p = g.mul(x, e).unwrap();
        let s = g.sum_all(p).unwrap();
        let mut feed = Feed::new();
        feed.insert("x".into(), Array::from_f64(vec![3], &[0.2, -0.5, 1.1]).unwrap());
        let report = check_gradients(&g, &feed, s, 1e-6).unwrap();
        assert!(report.pass, "{report:?}");

        let mut g2 = Graph::new();
        let x = g2.param("x", &[3]).unwrap();
        let d = g2.detach(x);
        let e = g2.exp(d);
        let s = g2.sum_all(e).unwrap();
        let report = check_gradients(&g2, &feed, s, 1e-6).unwrap();
        assert!(report.leaves["x"].all_zero);
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let mut g = Graph::new();
        let x = g.param("x", &[1]).unwrap();
        let s = g.sum_all(x).unwrap();
        let mut feed = Feed::new();
        feed.insert("x".into(), Array::zeros(&[1]));
        assert!(check_gradients(&g, &feed, s, 1e-3).is_err());
    }
}
