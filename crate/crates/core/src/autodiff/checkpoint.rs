//! Little-endian tensor checkpoint.
//!
//! ```text
//! "SANETCKPT" | version u32 | count u32 |
//!   count × ( name_len u32 | name utf-8 | rank u32 | rank × extent u32 | f32 data )
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 9] = b"SANETCKPT";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(tensors: &[(String, Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos.checked_add(n)?)?;
        self.pos += n;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
}

pub fn decode<T: Real>(buf: &[u8]) -> std::result::Result<Vec<(String, Tensor<T>)>, String> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(MAGIC.len()) != Some(MAGIC.as_slice()) {
        return Err("bad magic".into());
    }
    let version = c.u32().ok_or("truncated header")?;
    if version != VERSION {
        return Err(format!("unsupported version {version}"));
    }
    let count = c.u32().ok_or("truncated header")?;
    let mut out = Vec::with_capacity(count as usize);
    for i in 0..count {
        let trunc = || format!("truncated at tensor {i}");
        let len = c.u32().ok_or_else(trunc)? as usize;
        let name = std::str::from_utf8(c.take(len).ok_or_else(trunc)?)
            .map_err(|_| format!("tensor {i}: name is not utf-8"))?
            .to_string();
        let rank = c.u32().ok_or_else(trunc)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32().ok_or_else(trunc)? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = c.take(n * 4).ok_or_else(trunc)?;
        let data = raw
            .chunks_exact(4)
            .map(|b| T::of(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| format!("tensor `{name}`: {e}"))?;
        out.push((name, t));
    }
    if c.pos != buf.len() {
        return Err("trailing bytes".into());
    }
    Ok(out)
}

pub fn save<T: Real>(path: &Path, tensors: &[(String, Tensor<T>)]) -> Result<()> {
    let bytes = encode(tensors);
    // Write-then-rename so an interrupted save never clobbers the last good file.
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf).map_err(|msg| Error::Checkpoint { path: path.to_path_buf(), msg })
}
