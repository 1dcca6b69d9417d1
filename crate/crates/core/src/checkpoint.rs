//! Shared little-endian layout for the binary checkpoints.
//!
//! ```text
//! magic        4 bytes ("DPV1", "DPL1", "DPG1")
//! config hash  u32 length + UTF-8 bytes (empty when unset)
//! header       u32 count + that many u64 values
//! tensors      u32 count, then per tensor:
//!              u32 name length, name bytes, u32 rank, rank x u64 dims,
//!              product(dims) x f64
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub magic: [u8; 4],
    pub config_hash: String,
    pub header: Vec<u64>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(magic: &[u8; 4], config_hash: &str) -> Self {
        Checkpoint {
            magic: *magic,
            config_hash: config_hash.to_string(),
            header: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: &Tensor) {
        self.tensors.push((name.into(), t.clone()));
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::input(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.magic);
        put_str(&mut out, &self.config_hash);
        out.extend_from_slice(&(self.header.len() as u32).to_le_bytes());
        for v in &self.header {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], expected_magic: &[u8; 4], path: &Path) -> Result<Self> {
        let mut r = bytes;
        let bad = |reason: &str| Error::format(path, reason.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
        if &magic != expected_magic {
            return Err(bad(&format!(
                "expected magic {:?}, found {:?}",
                String::from_utf8_lossy(expected_magic),
                String::from_utf8_lossy(&magic)
            )));
        }
        let config_hash = get_str(&mut r).ok_or_else(|| bad("truncated config hash"))?;
        let n = get_u32(&mut r).ok_or_else(|| bad("truncated header"))? as usize;
        let mut header = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            header.push(get_u64(&mut r).ok_or_else(|| bad("truncated header"))?);
        }
        let n = get_u32(&mut r).ok_or_else(|| bad("truncated tensor count"))? as usize;
        let mut tensors = Vec::with_capacity(n.min(256));
        for _ in 0..n {
            let name = get_str(&mut r).ok_or_else(|| bad("truncated tensor name"))?;
            let rank = get_u32(&mut r).ok_or_else(|| bad("truncated rank"))? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(get_u64(&mut r).ok_or_else(|| bad("truncated dims"))? as usize);
            }
            let len: usize = shape.iter().product();
            if len.saturating_mul(8) > r.len() {
                return Err(bad(&format!("tensor `{name}` runs past end of file")));
            }
            let mut data = Vec::with_capacity(len);
            for _ in 0..len {
                data.push(get_f64(&mut r).ok_or_else(|| bad("truncated data"))?);
            }
            let t = Tensor::new(shape, data).map_err(|e| bad(&format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes"));
        }
        Ok(Checkpoint {
            magic,
            config_hash,
            header,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, expected_magic: &[u8; 4]) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::StageOrder {
                path: path.to_path_buf(),
            },
            _ => Error::Io(e),
        })?;
        Checkpoint::from_bytes(&bytes, expected_magic, path)
    }

    pub fn header_at(&self, i: usize, what: &str) -> Result<u64> {
        self.header
            .get(i)
            .copied()
            .ok_or_else(|| Error::input(format!("checkpoint header lacks {what}")))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_u32(r: &mut &[u8]) -> Option<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).ok()?;
    Some(u32::from_le_bytes(b))
}

fn get_u64(r: &mut &[u8]) -> Option<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).ok()?;
    Some(u64::from_le_bytes(b))
}

fn get_f64(r: &mut &[u8]) -> Option<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).ok()?;
    Some(f64::from_le_bytes(b))
}

fn get_str(r: &mut &[u8]) -> Option<String> {
    let n = get_u32(r)? as usize;
    if n > r.len() {
        return None;
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    String::from_utf8(head.to_vec()).ok()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let mut c = Checkpoint::new(b"DPV1", "abc123");
        c.header = vec![1, 2, u64::MAX];
        c.push("a", &Tensor::matrix(2, 2, vec![1.0, -2.5, 3e-300, 4.0]).unwrap());
        c.push("b.c", &Tensor::vector(vec![0.1]).unwrap());
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes, b"DPV1", Path::new("x")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let c = Checkpoint::new(b"DPL1", "");
        let bytes = c.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, b"DPG1", Path::new("x")),
            Err(Error::Format { .. })
        ));
        assert!(Checkpoint::from_bytes(&bytes[..6], b"DPL1", Path::new("x")).is_err());
        let missing = Checkpoint::load(Path::new("/nonexistent/file.dpl1"), b"DPL1");
        assert!(matches!(missing, Err(Error::StageOrder { .. })));
    }
}
