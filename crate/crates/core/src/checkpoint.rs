//! Little-endian checkpoint files: `LAWN`, version, tensor count, then per
//! tensor its name, rank, `u64` extents and `f32` payload.

use std::path::Path;

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LAWN";
pub const VERSION: u32 = 1;

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format("checkpoint", format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint into `(name, tensor)` pairs in file order.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::format("checkpoint", "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?).map_err(|_| Error::format("checkpoint", "extent overflows"))?;
            shape.push(d);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| Error::format("checkpoint", format!("{name}: extent product overflows")))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::format("checkpoint", "payload overflows"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::format("checkpoint", format!("{name}: {e}")))?;
        out.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    Ok(out)
}

pub fn save(path: &Path, store: &ParamStore) -> Result<()> {
    write_atomic(path, &encode(store))
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    decode(&std::fs::read(path)?)
}

/// Overwrites every parameter of `store` from `tensors`, which must hold the
/// same names and shapes.
pub fn restore(store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{} tensors, model has {}", tensors.len(), store.len()),
        ));
    }
    let mut seen = std::collections::HashSet::new();
    for (name, t) in tensors {
        if !seen.insert(name.clone()) {
            return Err(Error::format("checkpoint", format!("tensor `{name}` appears twice")));
        }
        store.set(&name, t)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::new(&[2, 3], vec![0.5, -1.0, 2.0, 0.25, 3.0, -0.125]).unwrap())
            .unwrap();
        s.insert("b", Tensor::scalar(7.0)).unwrap();
        s
    }

    #[test]
    fn layout_is_little_endian() {
        let bytes = encode(&store());
        assert_eq!(&bytes[..4], b"LAWN");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(&bytes[8..12], &[2, 0, 0, 0]);
        assert_eq!(&bytes[12..16], &[8, 0, 0, 0]);
        assert_eq!(&bytes[16..24], b"a.weight");
        assert_eq!(&bytes[24..28], &[2, 0, 0, 0]);
        assert_eq!(&bytes[28..36], &2u64.to_le_bytes());
        assert_eq!(&bytes[44..48], &0.5f32.to_le_bytes());
        assert_eq!(bytes.len(), 16 + 8 + 4 + 16 + 24 + 4 + 1 + 4 + 4);
    }

    #[test]
    fn roundtrip_through_file() {
        let s = store();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.lawn");
        save(&p, &s).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "a.weight");
        assert!(back[0].1.bit_eq(s.get(s.id("a.weight").unwrap())));
        assert_eq!(back[1].1.shape(), &[] as &[usize]);
        let mut other = store();
        other.set("b", Tensor::scalar(0.0)).unwrap();
        restore(&mut other, back).unwrap();
        assert_eq!(other.get(other.id("b").unwrap()).item().unwrap(), 7.0);
        assert!(!dir.path().join(".m.lawn.tmp").exists());
    }

    #[test]
    fn rejects_corrupt_files() {
        let bytes = encode(&store());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }

    #[test]
    fn restore_checks_names_and_shapes() {
        let mut s = store();
        assert!(restore(&mut s, vec![("b".into(), Tensor::scalar(1.0))]).is_err());
        let wrong = vec![
            ("a.weight".into(), Tensor::zeros(&[3, 2])),
            ("b".into(), Tensor::scalar(1.0)),
        ];
        assert!(restore(&mut s, wrong).is_err());
        let twice = vec![("b".into(), Tensor::scalar(1.0)), ("b".into(), Tensor::scalar(2.0))];
        assert!(restore(&mut s, twice).is_err());
    }
}
