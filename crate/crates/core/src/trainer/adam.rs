//! Adaptive-moment optimizer without weight decay, with per-group step counts
//! so a frozen group keeps its moments and bias correction untouched.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::Gradients;
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamSet, ParamSpec};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub first: ParamSet<T>,
    pub second: ParamSet<T>,
    /// Updates applied to each group so far.
    pub steps: BTreeMap<ParamGroup, u64>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, specs: &[ParamSpec]) -> Self {
        Adam {
            config,
            first: ParamSet::zeros(specs),
            second: ParamSet::zeros(specs),
            steps: ParamGroup::ALL.into_iter().map(|g| (g, 0)).collect(),
        }
    }

    /// Applies one update to every parameter of `groups`. Gradients for other
    /// groups are ignored; a missing gradient for an updated group is an error.
    pub fn update(
        &mut self,
        params: &mut ParamSet<T>,
        grads: &Gradients<T>,
        lr: f64,
        groups: &[ParamGroup],
    ) -> Result<()> {
        let AdamConfig { beta1, beta2, eps } = self.config;
        for &group in groups {
            let t = self.steps[&group] + 1;
            let c1 = T::lit(1.0 - beta1.powi(t as i32));
            let c2 = T::lit(1.0 - beta2.powi(t as i32));
            let (b1, b2) = (T::lit(beta1), T::lit(beta2));
            let (lr, eps) = (T::lit(lr), T::lit(eps));
            let names: Vec<String> = params.group(group).map(|(n, _)| n.to_string()).collect();
            for name in names {
                let g = grads
                    .get(&name)
                    .ok_or_else(|| Error::contract("adam", format!("no gradient for {name}")))?;
                let p = params.get_mut(&name).unwrap();
                let m = self.first.get_mut(&name).unwrap();
                let v = self.second.get_mut(&name).unwrap();
                if g.shape() != p.shape() {
                    return Err(Error::contract("adam", format!("gradient shape mismatch for {name}")));
                }
                for (((p, m), v), &g) in p
                    .data_mut()
                    .iter_mut()
                    .zip(m.data_mut())
                    .zip(v.data_mut())
                    .zip(g.data())
                {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                }
            }
            self.steps.insert(group, t);
        }
        Ok(())
    }
}
