//! Named trainable arrays, partitioned into the text head, the conditional
//! sampler and the depth decoder.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Array, Feed};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Caption head producing the latent mean and scale.
    Text,
    /// Image-conditional sampler producing the epsilon grid.
    Sampler,
    /// Depth decoder, shared by both branches.
    Decoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Text, ParamGroup::Sampler, ParamGroup::Decoder];

    pub fn prefix(self) -> &'static str {
        match self {
            ParamGroup::Text => "text.",
            ParamGroup::Sampler => "sampler.",
            ParamGroup::Decoder => "decoder.",
        }
    }

    pub fn of(name: &str) -> Option<ParamGroup> {
        Self::ALL.into_iter().find(|g| name.starts_with(g.prefix()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Fan-in for weights; `None` marks a bias (initialized to zero).
    pub fan_in: Option<usize>,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, shape: Vec<usize>, fan_in: usize) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            fan_in: Some(fan_in),
        }
    }

    pub fn bias(name: impl Into<String>, len: usize) -> Self {
        ParamSpec {
            name: name.into(),
            shape: vec![len],
            fan_in: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    arrays: BTreeMap<String, Array<T>>,
}

impl<T: Scalar> ParamSet<T> {
    /// Fan-in scaled uniform weights in `±sqrt(6 / fan_in)`, zero biases.
    /// Values are drawn in spec order from one seeded stream.
    pub fn init(specs: &[ParamSpec], seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut arrays = BTreeMap::new();
        for spec in specs {
            if ParamGroup::of(&spec.name).is_none() {
                return Err(Error::config(format!("parameter {} has no group prefix", spec.name)));
            }
            let array = match spec.fan_in {
                Some(fan_in) => {
                    let bound = (6.0 / fan_in as f64).sqrt();
                    Array::from_fn(&spec.shape, |_| T::lit(rng.random_range(-bound..bound)))
                }
                None => Array::zeros(&spec.shape),
            };
            if arrays.insert(spec.name.clone(), array).is_some() {
                return Err(Error::config(format!("duplicate parameter {}", spec.name)));
            }
        }
        Ok(ParamSet { arrays })
    }

    pub fn zeros(specs: &[ParamSpec]) -> Self {
        ParamSet {
            arrays: specs.iter().map(|s| (s.name.clone(), Array::zeros(&s.shape))).collect(),
        }
    }

    pub fn from_arrays(arrays: BTreeMap<String, Array<T>>) -> Result<Self> {
        if let Some(bad) = arrays.keys().find(|n| ParamGroup::of(n).is_none()) {
            return Err(Error::config(format!("parameter {bad} has no group prefix")));
        }
        Ok(ParamSet { arrays })
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.arrays.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.arrays.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.keys().map(String::as_str)
    }

    pub fn group(&self, group: ParamGroup) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.iter().filter(move |(n, _)| ParamGroup::of(n) == Some(group))
    }

    pub fn len(&self) -> usize {
        self.arrays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.arrays.values().map(Array::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            arrays: self.arrays.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copies every array into `feed` under its own name.
    pub fn feed_into(&self, feed: &mut Feed<T>) {
        for (k, v) in &self.arrays {
            feed.insert(k.clone(), v.clone());
        }
    }

    /// Checks that exactly the arrays in `specs` are present with the right shapes.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        if specs.len() != self.arrays.len() {
            return Err(Error::config(format!(
                "parameter set holds {} arrays, architecture needs {}",
                self.arrays.len(),
                specs.len()
            )));
        }
        for spec in specs {
            match self.arrays.get(&spec.name) {
                Some(a) if a.shape() == spec.shape.as_slice() => {}
                Some(a) => {
                    return Err(Error::config(format!(
                        "parameter {} has shape {:?}, expected {:?}",
                        spec.name,
                        a.shape(),
                        spec.shape
                    )))
                }
                None => return Err(Error::config(format!("missing parameter {}", spec.name))),
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec::weight("text.fc0.w", vec![4, 3], 3),
            ParamSpec::bias("text.fc0.b", 4),
            ParamSpec::weight("decoder.head.w", vec![1, 2, 1, 1], 2),
        ]
    }

    #[test]
    fn init_respects_bounds_and_zero_biases() {
        let p = ParamSet::<f64>::init(&specs(), 3).unwrap();
        let bound = (6.0f64 / 3.0).sqrt();
        assert!(p.get("text.fc0.w").unwrap().data().iter().all(|v| v.abs() < bound));
        assert!(p.get("text.fc0.b").unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(p, ParamSet::<f64>::init(&specs(), 3).unwrap());
        assert_ne!(p, ParamSet::<f64>::init(&specs(), 4).unwrap());
    }

    #[test]
    fn groups_follow_prefixes() {
        let p = ParamSet::<f32>::init(&specs(), 0).unwrap();
        assert_eq!(p.group(ParamGroup::Text).count(), 2);
        assert_eq!(p.group(ParamGroup::Sampler).count(), 0);
        assert_eq!(ParamGroup::of("misc.w"), None);
    }

    #[test]
    fn shape_check_reports_mismatch() {
        let p = ParamSet::<f32>::init(&specs(), 0).unwrap();
        assert!(p.check_against(&specs()).is_ok());
        let mut other = specs();
        other[0].shape = vec![5, 3];
        assert!(p.check_against(&other).is_err());
    }
}
