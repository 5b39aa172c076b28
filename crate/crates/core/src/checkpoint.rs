//! Single-file model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"CTXDETCK"
//! str    version
//! str    model config JSON
//! str    metadata JSON
//! u32    array count
//! array* str name, u8 role (0 parameter, 1 momentum), u32 rank, u64 dims[rank], f32 data[]
//! ```
//! where `str` is a `u32` byte length followed by UTF-8 bytes.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ctxdet_tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, RunMode};
use crate::model::{build_model, Model};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"CTXDETCK";
pub const CHECKPOINT_VERSION: &str = "ctxdet-checkpoint/1";

/// Training progress stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub mode: RunMode,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Number of completed optimizer steps.
    pub step: usize,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Tensor<f32>)>,
    pub velocity: Vec<(String, Tensor<f32>)>,
}

fn ck_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn put_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn put_array(w: &mut impl Write, name: &str, role: u8, t: &Tensor<f32>) -> std::io::Result<()> {
    put_str(w, name)?;
    w.write_all(&[role])?;
    w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct Cursor<R> {
    inner: R,
    path: PathBuf,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| ck_err(&self.path, "truncated file"))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > 1 << 26 {
            return Err(ck_err(&self.path, "implausible string length"));
        }
        String::from_utf8(self.bytes(n)?).map_err(|_| ck_err(&self.path, "invalid UTF-8"))
    }
}

impl Checkpoint {
    /// Captures the model weights and, optionally, optimizer momentum by
    /// parameter index.
    pub fn capture(model: &Model<f32>, meta: CheckpointMeta, velocity: &[Option<Tensor<f32>>]) -> Self {
        let params = model
            .params
            .iter()
            .map(|(_, e)| (e.name.clone(), e.value.clone()))
            .collect();
        let velocity = model
            .params
            .iter()
            .filter_map(|(id, e)| {
                velocity
                    .get(id.index())
                    .and_then(|v| v.as_ref())
                    .map(|v| (e.name.clone(), v.clone()))
            })
            .collect();
        Checkpoint {
            config: model.config().clone(),
            meta,
            params,
            velocity,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // write-then-rename so an interrupted save never leaves a torn file
        let tmp = path.with_extension("tmp");
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        let res = (|| -> std::io::Result<()> {
            w.write_all(MAGIC)?;
            put_str(&mut w, CHECKPOINT_VERSION)?;
            put_str(&mut w, &serde_json::to_string(&self.config)?)?;
            put_str(&mut w, &serde_json::to_string(&self.meta)?)?;
            w.write_all(&((self.params.len() + self.velocity.len()) as u32).to_le_bytes())?;
            for (name, t) in &self.params {
                put_array(&mut w, name, 0, t)?;
            }
            for (name, t) in &self.velocity {
                put_array(&mut w, name, 1, t)?;
            }
            w.flush()
        })();
        res.map_err(|e| Error::io(&tmp, e))?;
        drop(w);
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint. When `expected` is given, the stored configuration
    /// must match it before any array is read.
    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut c = Cursor {
            inner: BufReader::new(file),
            path: path.to_path_buf(),
        };
        if c.bytes(MAGIC.len())? != MAGIC {
            return Err(ck_err(path, "not a checkpoint file"));
        }
        let version = c.string()?;
        if version != CHECKPOINT_VERSION {
            return Err(ck_err(path, format!("unsupported version {version:?}")));
        }
        let config: ModelConfig =
            serde_json::from_str(&c.string()?).map_err(|e| ck_err(path, format!("bad model config: {e}")))?;
        config.validate().map_err(|e| ck_err(path, e.to_string()))?;
        if let Some(exp) = expected {
            if *exp != config {
                return Err(ck_err(path, "model configuration does not match the requested one"));
            }
        }
        let meta: CheckpointMeta =
            serde_json::from_str(&c.string()?).map_err(|e| ck_err(path, format!("bad metadata: {e}")))?;
        let count = c.u32()? as usize;
        let mut params = Vec::new();
        let mut velocity = Vec::new();
        for _ in 0..count {
            let name = c.string()?;
            let role = c.bytes(1)?[0];
            let rank = c.u32()? as usize;
            if rank > 8 {
                return Err(ck_err(path, format!("array {name} has rank {rank}")));
            }
            let shape: Vec<usize> = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = shape.iter().product();
            let raw = c.bytes(4 * n)?;
            let data = raw
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_vec(&shape, data);
            match role {
                0 => params.push((name, t)),
                1 => velocity.push((name, t)),
                r => return Err(ck_err(path, format!("array {name} has unknown role {r}"))),
            }
        }
        Ok(Checkpoint {
            config,
            meta,
            params,
            velocity,
        })
    }

    /// Rebuilds the model and overwrites every parameter with the stored value.
    pub fn restore_model(&self, path_hint: &Path) -> Result<Model<f32>> {
        let mut model = build_model::<f32>(&self.config)?;
        let stored: HashMap<&str, &Tensor<f32>> = self.params.iter().map(|(n, t)| (n.as_str(), t)).collect();
        if stored.len() != model.params.len() {
            return Err(ck_err(
                path_hint,
                format!("{} arrays stored, model has {}", stored.len(), model.params.len()),
            ));
        }
        let ids: Vec<_> = model.params.ids().collect();
        for id in ids {
            let name = model.params.entry(id).name.clone();
            let t = stored
                .get(name.as_str())
                .ok_or_else(|| ck_err(path_hint, format!("missing array {name}")))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != t.shape() {
                return Err(ck_err(path_hint, format!("array {name} has shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = (*t).clone();
        }
        Ok(model)
    }

    /// Momentum buffers laid out by the parameter indices of `model`.
    pub fn velocity_for(&self, model: &Model<f32>, path_hint: &Path) -> Result<Vec<Option<Tensor<f32>>>> {
        let mut out = vec![None; model.params.len()];
        for (name, t) in &self.velocity {
            let id = model
                .params
                .id(name)
                .ok_or_else(|| ck_err(path_hint, format!("momentum for unknown parameter {name}")))?;
            if model.params.get(id).shape() != t.shape() {
                return Err(ck_err(path_hint, format!("momentum {name} has the wrong shape")));
            }
            out[id.index()] = Some(t.clone());
        }
        Ok(out)
    }
}
