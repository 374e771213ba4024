//! Binary checkpoint format.
//!
//! Layout, all integers little-endian, no padding, no checksum:
//!
//! ```text
//! "FTZ1"                       magic
//! u32                          tensor count
//! per tensor (manifest):
//!   u16 name length, UTF-8 name
//!   u8 dtype (0 = f32), u8 frozen flag, u8 rank, rank × u64 extents
//! raw tensor data in manifest order, row-major IEEE-754
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FTZ1";
pub const DTYPE_F32: u8 = 0;

/// One manifest record.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub dtype: u8,
    pub frozen: bool,
    pub shape: Vec<usize>,
}

pub fn encode(store: &ParameterStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name:?}")))?;
        let rank = u8::try_from(p.tensor.rank())
            .map_err(|_| Error::Checkpoint(format!("rank too large for {name:?}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        out.push(p.frozen as u8);
        out.push(rank);
        for &e in p.tensor.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
    }
    for (_, p) in store.iter() {
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

fn read_manifest(reader: &mut Reader<'_>) -> Result<Vec<ManifestEntry>> {
    let magic = reader.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}, expected \"FTZ1\"")));
    }
    let count = reader.u32("tensor count")?;
    let mut entries = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = reader.u16("name length")? as usize;
        let name = std::str::from_utf8(reader.take(len, "name")?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let dtype = reader.u8("dtype")?;
        if dtype != DTYPE_F32 {
            return Err(Error::Checkpoint(format!("unsupported dtype code {dtype} for {name:?}")));
        }
        let frozen = match reader.u8("frozen flag")? {
            0 => false,
            1 => true,
            f => return Err(Error::Checkpoint(format!("invalid frozen flag {f} for {name:?}"))),
        };
        let rank = reader.u8("rank")? as usize;
        let shape = (0..rank)
            .map(|_| reader.u64("extent").map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        entries.push(ManifestEntry {
            name,
            dtype,
            frozen,
            shape,
        });
    }
    Ok(entries)
}

pub fn decode(bytes: &[u8]) -> Result<ParameterStore> {
    let mut reader = Reader { buf: bytes, pos: 0 };
    let entries = read_manifest(&mut reader)?;
    let mut store = ParameterStore::new();
    for e in entries {
        let numel = e
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Checkpoint(format!("extent overflow for {:?}", e.name)))?;
        let raw = reader.take(numel, "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        store.insert(e.name, Tensor::new(e.shape, data)?, e.frozen)?;
    }
    if reader.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after tensor data",
            bytes.len() - reader.pos
        )));
    }
    Ok(store)
}

/// Parses only the header and manifest.
pub fn manifest(bytes: &[u8]) -> Result<Vec<ManifestEntry>> {
    read_manifest(&mut Reader { buf: bytes, pos: 0 })
}

pub fn save_checkpoint(store: &ParameterStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(store)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ParameterStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParameterStore {
        let mut s = ParameterStore::new();
        s.insert("anchor.w", Tensor::new([2, 3], vec![1., -2., 3.5, 0., 1e-7, -0.0]).unwrap(), true)
            .unwrap();
        s.insert("fusion.b", Tensor::new([1], vec![0.25]).unwrap(), false).unwrap();
        s.insert("lm.scale", Tensor::scalar(7.0), false).unwrap();
        s
    }

    #[test]
    fn exact_layout() {
        let mut s = ParameterStore::new();
        s.insert("ab", Tensor::new([2], vec![1.0, -1.0]).unwrap(), true).unwrap();
        let bytes = encode(&s).unwrap();
        let mut want = b"FTZ1".to_vec();
        want.extend([1, 0, 0, 0]);
        want.extend([2, 0, b'a', b'b', 0, 1, 1]);
        want.extend(2u64.to_le_bytes());
        want.extend(1f32.to_le_bytes());
        want.extend((-1f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let s = sample();
        let bytes = encode(&s).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back).unwrap(), bytes);
        assert!(back.is_frozen("anchor.w"));
        assert!(!back.is_frozen("fusion.b"));
    }

    #[test]
    fn empty_store() {
        let bytes = encode(&ParameterStore::new()).unwrap();
        assert_eq!(bytes, b"FTZ1\0\0\0\0");
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn corruption_cases() {
        let bytes = encode(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).unwrap_err().to_string().contains("bad magic"));
        for cut in [3, 7, 20, bytes.len() - 1] {
            assert!(decode(&bytes[..cut]).unwrap_err().to_string().contains("truncated"));
        }
        // A flipped data byte still loads: there is no checksum.
        let mut flipped = bytes.clone();
        *flipped.last_mut().unwrap() ^= 0x01;
        let s = decode(&flipped).unwrap();
        assert_ne!(s, sample());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut bytes = b"FTZ1".to_vec();
        bytes.extend(2u32.to_le_bytes());
        for _ in 0..2 {
            bytes.extend([1, 0, b'x', 0, 0, 0]);
        }
        bytes.extend(1f32.to_le_bytes());
        bytes.extend(2f32.to_le_bytes());
        assert!(decode(&bytes).unwrap_err().to_string().contains("duplicate"));
    }
}
