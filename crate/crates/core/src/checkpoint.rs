//! "DTRI1" checkpoint archives.
//!
//! Layout (all integers little-endian):
//!   magic     b"DTRI1"
//!   meta_len  u32, then meta_len bytes of JSON metadata
//!   n_sections u32
//!   section*  name_len u32, name bytes, ndim u32, dims (u64 each),
//!             count u64, then count f64 values (little-endian)
//!
//! Sections hold, per model, the ordered (name, shape, raw f64) parameter
//! list, plus the optimizer moments needed for bitwise-identical resume.
//! Save -> load -> save produces byte-identical archives.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::atomic_write;
use crate::models::{ModelConfig, Models, ParamStore};
use crate::optim::AdamState;
use crate::rng::SeedTree;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"DTRI1";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct Meta {
    config: ModelConfig,
    iter: u64,
    seed: u64,
    adam_t: [u64; 3],
}

/// Everything needed to resume a run exactly.
#[derive(Clone, Debug)]
pub struct CheckpointData {
    pub config: ModelConfig,
    pub iter: u64,
    pub seed: u64,
    pub gen: ParamStore,
    pub inf: ParamStore,
    pub en: ParamStore,
    pub adam_gen: AdamState,
    pub adam_inf: AdamState,
    pub adam_en: AdamState,
}

fn push_section(out: &mut Vec<u8>, name: &str, tensor: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.extend_from_slice(&(tensor.numel() as u64).to_le_bytes());
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn store_sections(out: &mut Vec<u8>, prefix: &str, store: &ParamStore) {
    for (name, tensor) in store.iter() {
        push_section(out, &format!("{prefix}.{name}"), tensor);
    }
}

fn adam_sections(out: &mut Vec<u8>, prefix: &str, store: &ParamStore, state: &AdamState) {
    for (i, (name, _)) in store.iter().enumerate() {
        push_section(out, &format!("adam.{prefix}.m.{name}"), &state.m[i]);
        push_section(out, &format!("adam.{prefix}.v.{name}"), &state.v[i]);
    }
}

pub fn encode(data: &CheckpointData) -> Vec<u8> {
    let meta = Meta {
        config: data.config.clone(),
        iter: data.iter,
        seed: data.seed,
        adam_t: [data.adam_gen.t, data.adam_inf.t, data.adam_en.t],
    };
    let meta_json = serde_json::to_vec(&meta).expect("metadata serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);

    let n_sections = 3 * (data.gen.len() + data.inf.len() + data.en.len());
    out.extend_from_slice(&(n_sections as u32).to_le_bytes());
    store_sections(&mut out, "gen", &data.gen);
    store_sections(&mut out, "inf", &data.inf);
    store_sections(&mut out, "en", &data.en);
    adam_sections(&mut out, "gen", &data.gen, &data.adam_gen);
    adam_sections(&mut out, "inf", &data.inf, &data.adam_inf);
    adam_sections(&mut out, "en", &data.en, &data.adam_en);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated archive".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointData> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(5)? != MAGIC {
        return Err(Error::Checkpoint(
            "bad magic: not a DTRI1 archive (or incompatible version)".into(),
        ));
    }
    let meta_len = cur.u32()? as usize;
    let meta: Meta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;

    let n_sections = cur.u32()? as usize;
    let mut sections: Vec<(String, Tensor)> = Vec::with_capacity(n_sections);
    for _ in 0..n_sections {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-utf8 section name".into()))?;
        let ndim = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u64()? as usize);
        }
        let count = cur.u64()? as usize;
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let raw = cur.take(8)?;
            data.push(f64::from_le_bytes(raw.try_into().unwrap()));
        }
        let tensor = Tensor::from_vec(shape, data)
            .map_err(|_| Error::Checkpoint(format!("section {name}: shape/data mismatch")))?;
        sections.push((name, tensor));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after archive".into()));
    }

    // Rebuild the stores by re-deriving the architecture from the config and
    // overwriting its parameters with the archived tensors.
    let seeds = SeedTree::new(meta.seed);
    let models = Models::new(meta.config.clone(), &seeds)?;
    let mut data = CheckpointData {
        config: meta.config,
        iter: meta.iter,
        seed: meta.seed,
        adam_gen: AdamState::for_params(&models.gen.params),
        adam_inf: AdamState::for_params(&models.inf.params),
        adam_en: AdamState::for_params(&models.en.params),
        gen: models.gen.params,
        inf: models.inf.params,
        en: models.en.params,
    };
    data.adam_gen.t = meta.adam_t[0];
    data.adam_inf.t = meta.adam_t[1];
    data.adam_en.t = meta.adam_t[2];

    let mut assign = |name: &str, tensor: Tensor| -> Result<()> {
        let (kind, rest) = name
            .split_once('.')
            .ok_or_else(|| Error::Checkpoint(format!("malformed section name {name}")))?;
        let (store, adam, slot) = match kind {
            "gen" => (&mut data.gen, None, rest),
            "inf" => (&mut data.inf, None, rest),
            "en" => (&mut data.en, None, rest),
            "adam" => {
                let (model, rest2) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Checkpoint(format!("malformed section name {name}")))?;
                let (mv, pname) = rest2
                    .split_once('.')
                    .ok_or_else(|| Error::Checkpoint(format!("malformed section name {name}")))?;
                let (store, state) = match model {
                    "gen" => (&mut data.gen, &mut data.adam_gen),
                    "inf" => (&mut data.inf, &mut data.adam_inf),
                    "en" => (&mut data.en, &mut data.adam_en),
                    other => {
                        return Err(Error::Checkpoint(format!("unknown model section {other}")))
                    }
                };
                (store, Some((state, mv.to_string())), pname)
            }
            other => return Err(Error::Checkpoint(format!("unknown section kind {other}"))),
        };
        let idx = (0..store.len())
            .find(|&i| store.name(i) == slot)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if store.value(idx).shape() != tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {name}: archived shape {:?} vs model shape {:?}",
                tensor.shape(),
                store.value(idx).shape()
            )));
        }
        match adam {
            None => *store.value_mut(idx) = tensor,
            Some((state, mv)) => match mv.as_str() {
                "m" => state.m[idx] = tensor,
                "v" => state.v[idx] = tensor,
                other => return Err(Error::Checkpoint(format!("unknown moment {other}"))),
            },
        }
        Ok(())
    };
    for (name, tensor) in sections {
        assign(&name, tensor)?;
    }
    Ok(data)
}

pub fn save(path: &Path, data: &CheckpointData) -> Result<()> {
    atomic_write(path, &encode(data))
}

pub fn load(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

impl CheckpointData {
    /// Instantiate models carrying the archived parameters.
    pub fn into_models(self) -> Result<(Models, [AdamState; 3], u64, u64)> {
        let seeds = SeedTree::new(self.seed);
        let mut models = Models::new(self.config, &seeds)?;
        models.gen.params = self.gen;
        models.inf.params = self.inf;
        models.en.params = self.en;
        Ok((models, [self.adam_gen, self.adam_inf, self.adam_en], self.iter, self.seed))
    }
}
