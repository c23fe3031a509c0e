//! Tensor container files.
//!
//! Layout: the 6-byte magic `BRNET1`, then records until end of file. Each
//! record is a `u32` LE name length, the UTF-8 name, four `u64` LE dims
//! (rows, height, width, channels) and the data as `f32` LE.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::Network;
use crate::tensor::{Dims, Tensor4};

pub const MAGIC: &[u8; 6] = b"BRNET1";

pub fn encode<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor4)>) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in t.dims().as_array() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.origin,
                format!("truncated {what} at byte {}", self.pos),
            ));
        }
        self.pos += n;
        Ok(&self.bytes[self.pos - n..self.pos])
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8], origin: &Path) -> Result<Vec<(String, Tensor4)>> {
    let fail = |detail: String| Error::format(origin, detail);
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(fail("missing BRNET1 magic".into()));
    }
    let mut cur = Cursor {
        bytes,
        pos: MAGIC.len(),
        origin,
    };
    let mut out = Vec::new();
    while cur.pos < bytes.len() {
        let len = u32::from_le_bytes(cur.take(4, "name length")?.try_into().expect("4 bytes"));
        let name = std::str::from_utf8(cur.take(len as usize, "name")?)
            .map_err(|_| fail("tensor name is not UTF-8".into()))?
            .to_owned();
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let v = cur.u64("dims")?;
            *d = usize::try_from(v).map_err(|_| fail(format!("dimension {v} too large")))?;
        }
        let dims = Dims::new(dims[0], dims[1], dims[2], dims[3]);
        let n = dims
            .as_array()
            .iter()
            .try_fold(4usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| fail(format!("tensor '{name}' dims {dims} overflow")))?;
        let data = cur
            .take(n, "tensor data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        out.push((name, Tensor4::from_vec(dims, data)?));
    }
    Ok(out)
}

pub fn write_tensors<'a>(path: &Path, tensors: impl IntoIterator<Item = (&'a str, &'a Tensor4)>) -> Result<()> {
    let bytes = encode(tensors);
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn read_tensors(path: &Path) -> Result<Vec<(String, Tensor4)>> {
    decode(&fs::read(path)?, path)
}

/// Writes all parameters and batch-norm running statistics.
pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    write_tensors(path, net.params.iter().chain(net.buffers.iter()))
}

/// Loads tensors written by [`save_network`] into a network of the same
/// architecture. Every tensor must be present with matching dims.
pub fn load_network(net: &mut Network, path: &Path) -> Result<()> {
    let records = read_tensors(path)?;
    let expected = net.params.len() + net.buffers.len();
    if records.len() != expected {
        return Err(Error::format(
            path,
            format!("{} tensors, architecture {} has {expected}", records.len(), net.arch),
        ));
    }
    for (name, t) in records {
        let slot = match (net.params.find(&name), net.buffers.find(&name)) {
            (Some(id), _) => net.params.get_mut(id),
            (None, Some(id)) => net.buffers.get_mut(id),
            (None, None) => {
                return Err(Error::format(
                    path,
                    format!("unknown tensor '{name}' for {}", net.arch),
                ))
            }
        };
        if slot.dims() != t.dims() {
            return Err(Error::format(
                path,
                format!("tensor '{name}' is {}, expected {}", t.dims(), slot.dims()),
            ));
        }
        *slot = t;
    }
    Ok(())
}
