//! Binary checkpoint container.
//!
//! All integers are little-endian `u32`, all values little-endian `f64`.
//!
//! ```text
//! magic      8 bytes   "OWDCKPT\0"
//! version    u32       CHECKPOINT_VERSION
//! meta_len   u32
//! meta       meta_len bytes of UTF-8 JSON:
//!            {"detector": DetectorConfig, "epoch": u64, "extra": any}
//! n_groups   u32       1 + number of optimizer-state groups
//! repeated n_groups times:
//!   n_tensors u32
//!   repeated n_tensors times:
//!     name_len u32, name bytes (UTF-8)
//!     ndim u32, ndim x u32 dims
//!     prod(dims) x f64 values, row-major
//! ```
//!
//! Group 0 holds the network parameters; the remaining groups hold optimizer
//! buffers in the order the optimizer reports them. Readers reject any other
//! version number.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DetectorConfig, Params, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"OWDCKPT\0";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub detector: DetectorConfig,
    pub params: Params,
    pub epoch: usize,
    pub optimizer_state: Vec<Params>,
    pub extra: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    detector: DetectorConfig,
    epoch: u64,
    #[serde(default)]
    extra: serde_json::Value,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_group(buf: &mut Vec<u8>, p: &Params) {
    put_u32(buf, p.tensors.len());
    for t in &p.tensors {
        put_u32(buf, t.name.len());
        buf.extend_from_slice(t.name.as_bytes());
        put_u32(buf, t.shape.len());
        for &d in &t.shape {
            put_u32(buf, d);
        }
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = Meta {
            detector: self.detector.clone(),
            epoch: self.epoch as u64,
            extra: self.extra.clone(),
        };
        let meta = serde_json::to_vec(&meta).expect("metadata serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut buf, meta.len());
        buf.extend_from_slice(&meta);
        put_u32(&mut buf, 1 + self.optimizer_state.len());
        put_group(&mut buf, &self.params);
        for g in &self.optimizer_state {
            put_group(&mut buf, g);
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != MAGIC {
            return Err(Error::schema(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::schema(
                path,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| Error::schema(path, format!("metadata: {e}")))?;
        let n_groups = r.u32()? as usize;
        if n_groups == 0 {
            return Err(Error::schema(path, "missing parameter group"));
        }
        let mut groups = Vec::with_capacity(n_groups);
        for _ in 0..n_groups {
            groups.push(r.group()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::schema(path, "trailing bytes"));
        }
        let params = groups.remove(0);
        params
            .check_layout(&meta.detector)
            .map_err(|e| Error::schema(path, e.to_string()))?;
        Ok(Self {
            detector: meta.detector,
            params,
            epoch: meta.epoch as usize,
            optimizer_state: groups,
            extra: meta.extra,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::schema(self.path, "truncated checkpoint"));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn group(&mut self) -> Result<Params> {
        let n = self.u32()? as usize;
        let mut tensors = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::schema(self.path, "tensor name is not UTF-8"))?
                .to_string();
            let ndim = self.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                shape.push(self.u32()? as usize);
            }
            let count: usize = shape.iter().product();
            let raw = self.take(
                count
                    .checked_mul(8)
                    .ok_or_else(|| Error::schema(self.path, "tensor too large"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        Ok(Params { tensors })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes, path)
}
