//! Checkpoint directories: a `manifest.txt` of `key=value` records plus one
//! little-endian blob `tensors.bin` holding every tensor back to back.
//!
//! ```text
//! format=ibev-checkpoint
//! version=1
//! meta step=120
//! tensor name=encoder.layer0.bixattn.proj_i.weight shape=128x128 dtype=f32 offset=0 init=uniform(0.0883)
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::param::{Init, ParamStore, Parameter};
use super::scalar::Scalar;
use super::tensor::{shape_str, Tensor};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "tensors.bin";
const FORMAT: &str = "ibev-checkpoint";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub init: Option<Init>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint<T> {
    pub meta: BTreeMap<String, String>,
    pub entries: Vec<Entry<T>>,
}

/// Writes `bytes` to `path` through a temporary sibling and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp~");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new() -> Self {
        Checkpoint { meta: BTreeMap::new(), entries: Vec::new() }
    }

    pub fn push_params(&mut self, store: &ParamStore<T>) {
        for p in store.iter() {
            self.entries.push(Entry { name: p.name.clone(), tensor: p.tensor.clone(), init: Some(p.init) });
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<T>) {
        self.entries.push(Entry { name: name.into(), tensor, init: None });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    /// Copies every parameter of `store` from this checkpoint, checking shapes.
    pub fn restore_params(&self, store: &mut ParamStore<T>) -> Result<()> {
        for p in store.iter_mut() {
            let t = self
                .get(&p.name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {}", p.name)))?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::Config(format!(
                    "parameter {} has shape {} in checkpoint but {} in model",
                    p.name,
                    shape_str(t.shape()),
                    shape_str(p.tensor.shape())
                )));
            }
            p.tensor = t.clone();
        }
        Ok(())
    }

    pub fn to_param_store(&self) -> Result<ParamStore<T>> {
        let mut store = ParamStore::new();
        for e in &self.entries {
            if let Some(init) = e.init {
                store.insert(Parameter { name: e.name.clone(), tensor: e.tensor.clone(), init })?;
            }
        }
        Ok(store)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("format={FORMAT}\nversion={VERSION}\n");
        for (k, v) in &self.meta {
            manifest.push_str(&format!("meta {k}={v}\n"));
        }
        let mut blob = Vec::new();
        for e in &self.entries {
            let offset = blob.len();
            for &v in e.tensor.data() {
                v.write_le(&mut blob);
            }
            let shape: Vec<String> = e.tensor.shape().iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!(
                "tensor name={} shape={} dtype={} offset={}",
                e.name,
                shape.join("x"),
                T::DTYPE,
                offset
            ));
            if let Some(init) = e.init {
                manifest.push_str(&format!(" init={init}"));
            }
            manifest.push('\n');
        }
        write_atomic(&dir.join(BLOB_FILE), &blob)?;
        write_atomic(&dir.join(MANIFEST_FILE), manifest.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let blob_path = dir.join(BLOB_FILE);
        let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let bad = |line: usize, detail: String| Error::Format { path: manifest_path.clone(), offset: line as u64, detail };

        let mut ckpt = Checkpoint::new();
        let mut lines = manifest.lines().enumerate();
        match lines.next() {
            Some((_, l)) if l == format!("format={FORMAT}") => {}
            _ => return Err(bad(0, "missing format line".into())),
        }
        match lines.next() {
            Some((_, l)) if l == format!("version={VERSION}") => {}
            Some((i, l)) => return Err(bad(i, format!("unsupported version line {l:?}"))),
            None => return Err(bad(1, "missing version line".into())),
        }
        for (i, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(kv) = line.strip_prefix("meta ") {
                let (k, v) = kv.split_once('=').ok_or_else(|| bad(i, "meta without '='".into()))?;
                ckpt.meta.insert(k.to_string(), v.to_string());
                continue;
            }
            let rest = line.strip_prefix("tensor ").ok_or_else(|| bad(i, format!("unknown record {line:?}")))?;
            let mut fields = BTreeMap::new();
            for tok in rest.split_whitespace() {
                let (k, v) = tok.split_once('=').ok_or_else(|| bad(i, format!("field {tok:?} without '='")))?;
                fields.insert(k, v);
            }
            let field = |k: &str| fields.get(k).copied().ok_or_else(|| bad(i, format!("missing field {k}")));
            let name = field("name")?.to_string();
            let shape: Vec<usize> = field("shape")?
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(i, format!("bad extent {d:?}"))))
                .collect::<Result<_>>()?;
            let dtype = field("dtype")?;
            if dtype != T::DTYPE {
                return Err(bad(i, format!("tensor {name} has dtype {dtype}, expected {}", T::DTYPE)));
            }
            let offset: usize = field("offset")?.parse().map_err(|_| bad(i, "bad offset".into()))?;
            let numel: usize = shape.iter().product();
            let end = offset + numel * T::BYTES;
            if end > blob.len() {
                return Err(Error::Format {
                    path: blob_path.clone(),
                    offset: blob.len() as u64,
                    detail: format!("tensor {name} needs bytes up to {end}, blob is truncated"),
                });
            }
            let data: Vec<T> = blob[offset..end].chunks(T::BYTES).map(T::read_le).collect();
            let init = fields.get("init").map(|s| s.parse()).transpose()?;
            ckpt.entries.push(Entry { name, tensor: Tensor::new(&shape, data)?, init });
        }
        Ok(ckpt)
    }
}
