//! Flat binary tensor format and the named-tensor checkpoint container.
//!
//! Tensor layout: rank as little-endian u64, then each extent as a
//! little-endian u64, then the row-major values as little-endian f64 bits.
//!
//! Checkpoint layout: a text manifest (name, shape, offset, length per
//! tensor) followed by the concatenated tensor serializations. Offsets are
//! relative to the first byte after the `end` line.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_RANK: u64 = 32;
const CKPT_MAGIC: &str = "WKVCKPT1";

impl Tensor {
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.rank() as u64).to_le_bytes())?;
        for &e in self.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        for &v in self.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Tensor> {
        let mut u64buf = [0u8; 8];
        r.read_exact(&mut u64buf)?;
        let rank = u64::from_le_bytes(u64buf);
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            r.read_exact(&mut u64buf)?;
            shape.push(u64::from_le_bytes(u64buf) as usize);
        }
        let n: usize = shape.iter().try_fold(1usize, |acc, &e| {
            acc.checked_mul(e)
        }).ok_or_else(|| Error::Checkpoint("element count overflow".into()))?;
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            r.read_exact(&mut u64buf)?;
            data.push(f64::from_le_bytes(u64buf));
        }
        Tensor::new(shape, data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (1 + self.rank() + self.len()));
        self.write_to(&mut out).expect("vec write cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Tensor> {
        let mut cursor = bytes;
        Tensor::read_from(&mut cursor)
    }

    pub fn serialized_len(&self) -> usize {
        8 * (1 + self.rank() + self.len())
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

/// Ordered collection of named tensors with a byte-stable on-disk form.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Checkpoint::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        if !valid_name(name) {
            return Err(Error::Checkpoint(format!("invalid tensor name {name:?}")));
        }
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::Checkpoint(format!("duplicate tensor name {name:?}")));
        }
        self.entries.push((name.to_string(), tensor));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut header = String::new();
        header.push_str(CKPT_MAGIC);
        header.push('\n');
        header.push_str(&format!("tensors {}\n", self.entries.len()));
        let mut offset = 0usize;
        for (name, t) in &self.entries {
            let shape = if t.rank() == 0 {
                "scalar".to_string()
            } else {
                t.shape()
                    .iter()
                    .map(|e| e.to_string())
                    .collect::<Vec<_>>()
                    .join("x")
            };
            let len = t.serialized_len();
            header.push_str(&format!("{name} {shape} {offset} {len}\n"));
            offset += len;
        }
        header.push_str("end\n");
        w.write_all(header.as_bytes())?;
        for (_, t) in &self.entries {
            t.write_to(w)?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Checkpoint> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        // The header is ASCII lines up to and including "end\n".
        let mut pos = 0usize;
        let mut lines = Vec::new();
        loop {
            let rest = &bytes[pos..];
            let nl = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("unterminated header"))?;
            let line = std::str::from_utf8(&rest[..nl])
                .map_err(|_| bad("non-utf8 header line"))?
                .to_string();
            pos += nl + 1;
            if line == "end" {
                break;
            }
            lines.push(line);
            if lines.len() > 100_000 {
                return Err(bad("header too large"));
            }
        }
        if lines.first().map(String::as_str) != Some(CKPT_MAGIC) {
            return Err(bad("bad magic"));
        }
        let count: usize = lines
            .get(1)
            .and_then(|l| l.strip_prefix("tensors "))
            .and_then(|n| n.parse().ok())
            .ok_or_else(|| bad("missing tensor count"))?;
        if lines.len() != count + 2 {
            return Err(bad("manifest length does not match tensor count"));
        }
        let data = &bytes[pos..];
        let mut ckpt = Checkpoint::new();
        for line in &lines[2..] {
            let fields: Vec<&str> = line.split(' ').collect();
            if fields.len() != 4 {
                return Err(bad("malformed manifest line"));
            }
            let name = fields[0];
            let offset: usize = fields[2].parse().map_err(|_| bad("bad offset"))?;
            let len: usize = fields[3].parse().map_err(|_| bad("bad length"))?;
            let end = offset
                .checked_add(len)
                .ok_or_else(|| bad("offset overflow"))?;
            if end > data.len() {
                return Err(bad("tensor data out of range"));
            }
            let tensor = Tensor::from_bytes(&data[offset..end])?;
            ckpt.insert(name, tensor)?;
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = BufReader::new(File::open(path)?);
        Checkpoint::read_from(&mut r)
    }

    pub fn to_map(&self) -> HashMap<String, Tensor> {
        self.entries.iter().cloned().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_roundtrip_is_bit_exact() {
        let t = Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, 1e-300, 3.0, -0.5]).unwrap();
        let bytes = t.to_bytes();
        // rank + 2 extents + 6 values, 8 bytes each
        assert_eq!(bytes.len(), 8 * (1 + 2 + 6));
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        assert_eq!(Tensor::from_bytes(&bytes).unwrap(), t);
    }

    #[test]
    fn scalar_roundtrip() {
        let t = Tensor::scalar(4.25).unwrap();
        assert_eq!(Tensor::from_bytes(&t.to_bytes()).unwrap(), t);
    }

    #[test]
    fn checkpoint_roundtrip_and_lookup() {
        let mut ckpt = Checkpoint::new();
        ckpt.insert("w_r", Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap())
            .unwrap();
        ckpt.insert("mu.r", Tensor::new(vec![3], vec![0.5, 0.5, 0.5]).unwrap())
            .unwrap();
        let mut bytes = Vec::new();
        ckpt.write_to(&mut bytes).unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert!(back.get("w_r").is_some());
        assert!(matches!(back.require("nope"), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn checkpoint_bytes_are_stable() {
        let mut a = Checkpoint::new();
        a.insert("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let mut b = Checkpoint::new();
        b.insert("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())
            .unwrap();
        let (mut ba, mut bb) = (Vec::new(), Vec::new());
        a.write_to(&mut ba).unwrap();
        b.write_to(&mut bb).unwrap();
        assert_eq!(ba, bb);
    }

    #[test]
    fn rejects_invalid_names() {
        let mut ckpt = Checkpoint::new();
        let t = Tensor::scalar(1.0).unwrap();
        assert!(ckpt.insert("has space", t.clone()).is_err());
        ckpt.insert("ok_name", t.clone()).unwrap();
        assert!(ckpt.insert("ok_name", t).is_err());
    }
}
