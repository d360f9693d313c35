//! Binary checkpoint format.
//!
//! ```text
//! "MEIGM1\n"
//! repeated until EOF:
//!   u32 LE   name length in bytes
//!   [u8]     UTF-8 name
//!   u32 LE   rank
//!   u32 LE   each dim
//!   f64 LE   prod(dims) values
//! ```

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::params::ParamStore;
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"MEIGM1\n";

pub fn write_checkpoint<W: Write>(store: &ParamStore, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    for (name, p) in store.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(p.shape().len() as u32).to_le_bytes())?;
        for d in p.shape() {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in &p.values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamStore> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    if buf.len() < CHECKPOINT_MAGIC.len() || &buf[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("unknown magic".into()));
    }
    let mut cur = Cursor {
        buf: &buf,
        pos: CHECKPOINT_MAGIC.len(),
    };
    let mut store = ParamStore::new();
    while cur.pos < buf.len() {
        let len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(len)?)
            .map_err(|e| Error::Checkpoint(format!("name is not UTF-8: {e}")))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        store
            .insert(&name, &shape, values)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(store, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    read_checkpoint(fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_bit_exact() {
        let mut s = ParamStore::new();
        s.insert("ab", &[2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        let mut expect = b"MEIGM1\n".to_vec();
        expect.extend(2u32.to_le_bytes());
        expect.extend(b"ab");
        expect.extend(1u32.to_le_bytes());
        expect.extend(2u32.to_le_bytes());
        expect.extend(1.0f64.to_le_bytes());
        expect.extend((-0.5f64).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn unknown_magic_rejected() {
        let err = read_checkpoint(&b"MEIGM2\n"[..]).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", &[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&s, &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&buf[..]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(entries in proptest::collection::vec(
            (proptest::collection::vec(1usize..4, 0..3), any::<u64>()), 0..5)) {
            let mut s = ParamStore::new();
            for (i, (shape, seed)) in entries.iter().enumerate() {
                let n: usize = shape.iter().product();
                let vals = (0..n).map(|k| f64::from_bits(seed.wrapping_add(k as u64) >> 2)).collect();
                s.insert(&format!("p{i}.ü"), shape, vals).unwrap();
            }
            let mut buf = Vec::new();
            write_checkpoint(&s, &mut buf).unwrap();
            let back = read_checkpoint(&buf[..]).unwrap();
            prop_assert!(s.same_layout(&back));
            for ((_, a), (_, b)) in s.iter().zip(back.iter()) {
                let abits: Vec<u64> = a.values.iter().map(|v| v.to_bits()).collect();
                let bbits: Vec<u64> = b.values.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(abits, bbits);
            }
        }
    }
}
