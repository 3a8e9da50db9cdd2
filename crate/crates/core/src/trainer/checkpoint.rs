//! Checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "WDCK" | version u16 | step u64 | meta_len u32 | meta (JSON, utf-8)
//! array_count u32
//! array_count × (name_len u16, name utf-8, rank u8, dims u32[rank], f32[prod(dims)])
//! ```
//!
//! The JSON metadata holds the training config echo, the vocabulary size,
//! the schedule length and the per-group optimizer step counts. Arrays are
//! the parameters under their own names plus the optimizer moments under
//! `adam.m/` and `adam.v/` prefixes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::diffcore::Array;
use crate::error::{Error, FormatError, Result};
use crate::params::{ParamGroup, ParamSet};
use crate::scenegen::Reader;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"WDCK";
pub const CHECKPOINT_VERSION: u16 = 1;

const FIRST_MOMENT: &str = "adam.m/";
const SECOND_MOMENT: &str = "adam.v/";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab_size: usize,
    pub step: u64,
    pub total_steps: u64,
    pub group_steps: BTreeMap<ParamGroup, u64>,
    pub params: ParamSet<f32>,
    pub first: ParamSet<f32>,
    pub second: ParamSet<f32>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    vocab_size: usize,
    total_steps: u64,
    group_steps: BTreeMap<ParamGroup, u64>,
}

fn put_array(out: &mut Vec<u8>, name: &str, a: &Array<f32>) -> Result<()> {
    let len = u16::try_from(name.len()).map_err(|_| Error::config(format!("array name {name:?} too long")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(a.shape().len() as u8);
    for &d in a.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in a.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Meta {
            config: self.config.clone(),
            vocab_size: self.vocab_size,
            total_steps: self.total_steps,
            group_steps: self.group_steps.clone(),
        })?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        let count = self.params.len() + self.first.len() + self.second.len();
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (name, a) in self.params.iter() {
            put_array(&mut out, name, a)?;
        }
        for (prefix, set) in [(FIRST_MOMENT, &self.first), (SECOND_MOMENT, &self.second)] {
            for (name, a) in set.iter() {
                put_array(&mut out, &format!("{prefix}{name}"), a)?;
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(FormatError::Magic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            }
            .into());
        }
        let version = r.u16("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(FormatError::Version {
                expected: CHECKPOINT_VERSION,
                found: version,
            }
            .into());
        }
        let step = r.u64("step")?;
        let meta_len = r.u32("metadata length")? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len, "metadata")?)
            .map_err(|e| FormatError::Malformed(format!("metadata: {e}")))?;
        let count = r.u32("array count")? as usize;
        let mut sets: [BTreeMap<String, Array<f32>>; 3] = Default::default();
        for i in 0..count {
            let len = r.u16("array name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "array name")?)
                .map_err(|_| FormatError::Malformed(format!("array {i} name is not utf-8")))?
                .to_string();
            let rank = r.take(1, "rank")?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32("dimension")? as usize);
            }
            let numel: usize = dims.iter().product();
            let data = r.f32s(numel, &name)?;
            let array = Array::new(dims, data).map_err(|e| FormatError::Malformed(format!("{name}: {e}")))?;
            let (slot, key) = if let Some(k) = name.strip_prefix(FIRST_MOMENT) {
                (1, k.to_string())
            } else if let Some(k) = name.strip_prefix(SECOND_MOMENT) {
                (2, k.to_string())
            } else {
                (0, name.clone())
            };
            if sets[slot].insert(key, array).is_some() {
                return Err(FormatError::Malformed(format!("duplicate array {name}")).into());
            }
        }
        if r.remaining() > 0 {
            return Err(FormatError::Malformed(format!("{} trailing bytes", r.remaining())).into());
        }
        let [params, first, second] = sets.map(ParamSet::from_arrays);
        let specs = meta.config.model.param_specs();
        let (params, first, second) = (params?, first?, second?);
        for set in [&params, &first, &second] {
            set.check_against(&specs)
                .map_err(|e| FormatError::Malformed(format!("arrays disagree with config: {e}")))?;
        }
        Ok(Checkpoint {
            config: meta.config,
            vocab_size: meta.vocab_size,
            step,
            total_steps: meta.total_steps,
            group_steps: meta.group_steps,
            params,
            first,
            second,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
