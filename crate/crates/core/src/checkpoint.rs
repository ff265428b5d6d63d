//! Flat binary checkpoint format, shared by base and coordinator models.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "QLTCKPT1"
//! version    u32       currently 1
//! meta_len   u32       length of the JSON metadata blob
//! meta       bytes     UTF-8 JSON (model kind, config, grid, sigma_data, ...)
//! n_params   u32
//! per parameter:
//!   name_len   u16
//!   name       bytes (UTF-8)
//!   trainable  u8 (0 or 1)
//!   n_dims     u8
//!   dims       u32 * n_dims
//!   data       f32 * prod(dims)
//! ```
//!
//! Values are stored as 32-bit floats; loading widens back to f64.
//! Files are written to a temporary sibling and renamed into place.

use crate::error::{QuiltError, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"QLTCKPT1";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub params: ParamSet,
}

pub fn save_checkpoint(path: &Path, meta: &serde_json::Value, params: &ParamSet) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta_bytes = serde_json::to_vec(meta)
        .map_err(|e| QuiltError::Checkpoint(format!("meta serialization: {e}")))?;
    buf.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&meta_bytes);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(QuiltError::Checkpoint(format!(
                "parameter name too long: {}",
                p.name
            )));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.trainable as u8);
        let dims = p.value.shape();
        if dims.len() > u8::MAX as usize {
            return Err(QuiltError::Checkpoint("too many dimensions".into()));
        }
        buf.push(dims.len() as u8);
        for &d in dims {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.value.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }

    let tmp = path.with_extension("tmp");
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&buf)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(QuiltError::Checkpoint("unexpected end of file".into()));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(8)? != MAGIC {
        return Err(QuiltError::Checkpoint(format!(
            "bad magic in {}",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(QuiltError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let meta_len = r.u32()? as usize;
    let meta: serde_json::Value = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| QuiltError::Checkpoint(format!("meta parse: {e}")))?;
    let n_params = r.u32()? as usize;
    let mut params = ParamSet::new();
    for _ in 0..n_params {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| QuiltError::Checkpoint(format!("name: {e}")))?;
        let trainable = r.u8()? != 0;
        let n_dims = r.u8()? as usize;
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            dims.push(r.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(r.f32()? as f64);
        }
        params.push(name, Tensor::new(dims, data)?, trainable);
    }
    if r.pos != bytes.len() {
        return Err(QuiltError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { meta, params })
}
