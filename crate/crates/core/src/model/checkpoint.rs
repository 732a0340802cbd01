//! Versioned binary checkpoint.
//!
//! ```text
//! magic "GRCK" | version u32
//! n_meta u32   | { key_len u32, key, val_len u32, val }   (sorted by key)
//! n_tensor u32 | { name_len u32, name, kind u8, ndim u32, dims u64.., f64 data } (row-major)
//! ```
//! All integers and floats are little-endian. The model configuration is
//! stored as flattened `a.b.c = <json literal>` pairs. Optimizer moments, when
//! present, are tensors named `adam.m/<param>` and `adam.v/<param>`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde_json::{Map, Value};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GRCK";
const VERSION: u32 = 1;
const KIND_DENSE: u8 = 0;
const KIND_TABLE: u8 = 1;
const STEP_KEY: &str = "optimizer.step";
const CONFIG_PREFIX: &str = "config.";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: Option<AdamState>,
}

fn flatten(prefix: &str, value: &Value, out: &mut BTreeMap<String, String>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                flatten(&format!("{prefix}{k}."), v, out);
            }
        }
        leaf => {
            out.insert(prefix.trim_end_matches('.').to_string(), leaf.to_string());
        }
    }
}

fn unflatten(entries: &BTreeMap<String, String>) -> Result<Value> {
    let mut root = Map::new();
    for (key, raw) in entries {
        let leaf: Value = serde_json::from_str(raw)?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for part in &parts[..parts.len() - 1] {
            node = node
                .entry(part.to_string())
                .or_insert_with(|| Value::Object(Map::new()))
                .as_object_mut()
                .ok_or_else(|| Error::format(format!("config key {key} conflicts with a scalar")))?;
        }
        node.insert(parts[parts.len() - 1].to_string(), leaf);
    }
    Ok(Value::Object(root))
}

fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_le_bytes());
    out.extend_from_slice(b);
}

fn put_tensor(out: &mut Vec<u8>, name: &str, kind: u8, t: &Tensor) {
    put_bytes(out, name.as_bytes());
    out.push(kind);
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(t.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(t.cols() as u64).to_le_bytes());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises a model (and optionally optimizer state) to bytes.
pub fn write_checkpoint(model: &Model, optimizer: Option<&AdamState>) -> Result<Vec<u8>> {
    let mut meta = BTreeMap::new();
    flatten(CONFIG_PREFIX, &serde_json::to_value(model.config())?, &mut meta);
    if let Some(opt) = optimizer {
        meta.insert(STEP_KEY.to_string(), opt.step.to_string());
    }
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    for (k, v) in &meta {
        put_bytes(&mut out, k.as_bytes());
        put_bytes(&mut out, v.as_bytes());
    }
    let params = model.params();
    let n = params.len() * if optimizer.is_some() { 3 } else { 1 };
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for id in params.ids() {
        let kind = if params.is_table(id) { KIND_TABLE } else { KIND_DENSE };
        put_tensor(&mut out, params.name(id), kind, params.get(id));
    }
    if let Some(opt) = optimizer {
        for (prefix, moments) in [("adam.m/", &opt.m), ("adam.v/", &opt.v)] {
            for id in params.ids() {
                put_tensor(&mut out, &format!("{prefix}{}", params.name(id)), KIND_DENSE, &moments[id.index()]);
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format("checkpoint truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("invalid utf-8 in checkpoint"))
    }
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let mut config_entries = BTreeMap::new();
    let mut step = None;
    for _ in 0..r.u32()? {
        let (k, v) = (r.string()?, r.string()?);
        if k == STEP_KEY {
            step = Some(v.parse::<u64>().map_err(|_| Error::format("bad optimizer step"))?);
        } else if let Some(key) = k.strip_prefix(CONFIG_PREFIX) {
            config_entries.insert(key.to_string(), v);
        } else {
            return Err(Error::format(format!("unknown checkpoint metadata key {k}")));
        }
    }
    let config: ModelConfig = serde_json::from_value(unflatten(&config_entries)?)?;
    config.validate()?;

    let mut params = ParamStore::new();
    let mut moments: BTreeMap<String, Tensor> = BTreeMap::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let kind = r.u8()?;
        if r.u32()? != 2 {
            return Err(Error::format(format!("tensor {name} is not 2-dimensional")));
        }
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let count = rows.checked_mul(cols).ok_or_else(|| Error::format("tensor too large"))?;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::format("tensor too large"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::from_vec(rows, cols, data);
        if name.starts_with("adam.") {
            moments.insert(name, t);
        } else if kind == KIND_TABLE {
            params.add_table(name, t);
        } else {
            params.add(name, t);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format("trailing bytes after checkpoint"));
    }
    let reference = Model::new(config.clone())?;
    check_layout(reference.params(), &params)?;
    let optimizer = match step {
        None => None,
        Some(step) => {
            let mut pick = |prefix: &str| -> Result<Vec<Tensor>> {
                params
                    .ids()
                    .map(|id| {
                        moments
                            .remove(&format!("{prefix}{}", params.name(id)))
                            .ok_or_else(|| Error::format(format!("missing optimizer moment for {}", params.name(id))))
                    })
                    .collect()
            };
            let m = pick("adam.m/")?;
            let v = pick("adam.v/")?;
            Some(AdamState { step, m, v })
        }
    };
    Ok(Checkpoint { model: Model::from_parts(config, params), optimizer })
}

fn check_layout(expected: &ParamStore, got: &ParamStore) -> Result<()> {
    if expected.len() != got.len() {
        return Err(Error::format(format!("checkpoint has {} tensors, config implies {}", got.len(), expected.len())));
    }
    for id in expected.ids() {
        let name = expected.name(id);
        let other = got.id(name).ok_or_else(|| Error::format(format!("checkpoint is missing tensor {name}")))?;
        if expected.get(id).shape() != got.get(other).shape() || other != id {
            return Err(Error::format(format!("tensor {name} has unexpected shape or position")));
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Model, optimizer: Option<&AdamState>) -> Result<()> {
    let bytes = write_checkpoint(model, optimizer)?;
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reload_is_byte_identical() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let state = AdamState::new(model.params());
        for opt in [None, Some(&state)] {
            let bytes = write_checkpoint(&model, opt).unwrap();
            let ck = read_checkpoint(&bytes).unwrap();
            assert_eq!(ck.model.config(), model.config());
            assert_eq!(write_checkpoint(&ck.model, ck.optimizer.as_ref()).unwrap(), bytes);
        }
    }

    #[test]
    fn corrupt_inputs_are_format_errors() {
        let model = Model::new(ModelConfig::tiny()).unwrap();
        let bytes = write_checkpoint(&model, None).unwrap();
        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 3]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad), Err(Error::Format(_))));
    }
}
