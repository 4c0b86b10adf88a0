//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "TACGANCK"
//! version  u32
//! config   u32 length + UTF-8 "key=value\n" lines
//! step     u64
//! count    u32
//! arrays   count x { u32 name length, name, u8 dtype tag, u32 rank,
//!                    rank x u64 dims, payload }
//! ```
//!
//! The only dtype is `0` (f64, 8 bytes per element).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{AdamConfig, OptimizerState, TrainingState};
use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig, NetworkParams};
use crate::tensor::{ParamSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TACGANCK";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

/// Training state plus free-form run metadata echoed in the config block.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainingState,
    pub meta: BTreeMap<String, String>,
}

const GROUPS: [&str; 7] = ["g", "d", "stats", "opt_d.m", "opt_d.v", "opt_g.m", "opt_g.v"];

fn adam_pairs(prefix: &str, opt: &OptimizerState) -> Vec<(String, String)> {
    let c = &opt.config;
    vec![
        (format!("{prefix}.learning_rate"), format!("{:?}", c.learning_rate)),
        (format!("{prefix}.beta1"), format!("{:?}", c.beta1)),
        (format!("{prefix}.beta2"), format!("{:?}", c.beta2)),
        (format!("{prefix}.epsilon"), format!("{:?}", c.epsilon)),
        (format!("{prefix}.step"), opt.step.to_string()),
    ]
}

fn read_adam(pairs: &BTreeMap<String, String>, prefix: &str) -> Result<(AdamConfig, u64)> {
    let get = |k: &str| {
        pairs
            .get(&format!("{prefix}.{k}"))
            .ok_or_else(|| Error::Format(format!("config block lacks {prefix}.{k}")))
    };
    let real = |k: &str| -> Result<f64> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("{prefix}.{k} is not a number")))
    };
    let config = AdamConfig {
        learning_rate: real("learning_rate")?,
        beta1: real("beta1")?,
        beta2: real("beta2")?,
        epsilon: real("epsilon")?,
    };
    let step = get("step")?
        .parse()
        .map_err(|_| Error::Format(format!("{prefix}.step is not an integer")))?;
    Ok((config, step))
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    fs::write(path, encode(checkpoint)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(message) => Error::Load {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let st = &ck.state;
    let mut pairs: Vec<(String, String)> = st.model.config.to_pairs();
    pairs.extend(adam_pairs("opt_d", &st.opt_d));
    pairs.extend(adam_pairs("opt_g", &st.opt_g));
    for (k, v) in &ck.meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::Validation(format!("metadata entry {k:?} cannot be stored")));
        }
        if pairs.iter().any(|(p, _)| p == k) {
            return Err(Error::Validation(format!("metadata key {k:?} is reserved")));
        }
        pairs.push((k.clone(), v.clone()));
    }
    let block: String = pairs.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(block.len() as u32).to_le_bytes());
    out.extend_from_slice(block.as_bytes());
    out.extend_from_slice(&st.step.to_le_bytes());

    let sets = [
        &st.model.params.generator,
        &st.model.params.discriminator,
        &st.model.stats,
        &st.opt_d.m,
        &st.opt_d.v,
        &st.opt_g.m,
        &st.opt_g.v,
    ];
    let count: usize = sets.iter().map(|s| s.len()).sum();
    out.extend_from_slice(&(count as u32).to_le_bytes());
    for (group, set) in GROUPS.iter().zip(sets) {
        for (name, t) in set.iter() {
            let full = format!("{group}/{name}");
            out.extend_from_slice(&(full.len() as u32).to_le_bytes());
            out.extend_from_slice(full.as_bytes());
            out.push(DTYPE_F64);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: {what} needs {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let block_len = r.u32("config length")? as usize;
    let block = std::str::from_utf8(r.take(block_len, "config block")?)
        .map_err(|_| Error::Format("config block is not UTF-8".into()))?;
    let mut pairs = BTreeMap::new();
    for line in block.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("config line {line:?} lacks '='")))?;
        pairs.insert(k.to_string(), v.to_string());
    }
    let step = r.u64("step")?;

    let mut sets: BTreeMap<&str, ParamSet> = GROUPS.iter().map(|g| (*g, ParamSet::new())).collect();
    let count = r.u32("array count")?;
    for _ in 0..count {
        let name_len = r.u32("array name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "array name")?)
            .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
        let dtype = r.take(1, "dtype tag")?[0];
        if dtype != DTYPE_F64 {
            return Err(Error::Format(format!("array {name}: unknown dtype tag {dtype}")));
        }
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes_len = numel
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::Format(format!("array {name}: shape {shape:?} overflows")))?;
        let payload = r.take(bytes_len, name)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let (group, local) = name
            .split_once('/')
            .ok_or_else(|| Error::Format(format!("array name {name:?} lacks a group")))?;
        let set = sets
            .get_mut(group)
            .ok_or_else(|| Error::Format(format!("unknown array group {group:?}")))?;
        set.insert(local, Tensor::from_vec(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let config = ModelConfig::from_pairs(&pairs)?;
    let (adam_d, step_d) = read_adam(&pairs, "opt_d")?;
    let (adam_g, step_g) = read_adam(&pairs, "opt_g")?;
    let mut take = |g: &str| sets.remove(g).expect("every group present");
    let model = Model {
        params: NetworkParams {
            generator: take("g"),
            discriminator: take("d"),
        },
        stats: take("stats"),
        config,
    };
    let reference = Model::zeros(model.config.clone())?;
    check_names("generator", &model.params.generator, &reference.params.generator)?;
    check_names("discriminator", &model.params.discriminator, &reference.params.discriminator)?;
    check_names("statistics", &model.stats, &reference.stats)?;
    let opt_d = OptimizerState {
        config: adam_d,
        step: step_d,
        m: take("opt_d.m"),
        v: take("opt_d.v"),
    };
    let opt_g = OptimizerState {
        config: adam_g,
        step: step_g,
        m: take("opt_g.m"),
        v: take("opt_g.v"),
    };
    for (label, m, p) in [
        ("opt_d", &opt_d.m, &model.params.discriminator),
        ("opt_d", &opt_d.v, &model.params.discriminator),
        ("opt_g", &opt_g.m, &model.params.generator),
        ("opt_g", &opt_g.v, &model.params.generator),
    ] {
        check_names(label, m, p)?;
    }

    let reserved: Vec<String> = model
        .config
        .to_pairs()
        .into_iter()
        .map(|(k, _)| k)
        .collect();
    let meta = pairs
        .into_iter()
        .filter(|(k, _)| !reserved.contains(k) && !k.starts_with("opt_d.") && !k.starts_with("opt_g."))
        .collect();
    Ok(Checkpoint {
        state: TrainingState {
            model,
            opt_d,
            opt_g,
            step,
        },
        meta,
    })
}

fn check_names(label: &str, got: &ParamSet, expected: &ParamSet) -> Result<()> {
    for (name, t) in expected.iter() {
        match got.get(name) {
            Some(g) if g.shape() == t.shape() => {}
            Some(g) => return Err(Error::shape(format!("{label} array {name}"), t.shape(), g.shape())),
            None => return Err(Error::Format(format!("{label} array {name} is missing"))),
        }
    }
    if got.len() != expected.len() {
        return Err(Error::Format(format!("{label} arrays contain unexpected entries")));
    }
    Ok(())
}
