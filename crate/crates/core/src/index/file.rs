//! Index file, little-endian:
//! `"GRIX" | version u32 | mode u8 | dim u32 | count u64 | ids u64… | vectors f64…`
//! and for IVF: `partitions u32 | nprobe u32 | centroids f64… | per list: len u64, rows u32…`.

use std::fs;
use std::path::Path;

use super::{ItemIndex, Ivf};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const INDEX_MAGIC: &[u8; 4] = b"GRIX";
const VERSION: u32 = 1;

pub fn write_index(index: &ItemIndex) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(INDEX_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(index.ivf().is_some() as u8);
    out.extend_from_slice(&(index.dim() as u32).to_le_bytes());
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    for id in index.ids() {
        out.extend_from_slice(&id.to_le_bytes());
    }
    for v in index.vectors().data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(ivf) = index.ivf() {
        out.extend_from_slice(&(ivf.lists.len() as u32).to_le_bytes());
        out.extend_from_slice(&(ivf.nprobe as u32).to_le_bytes());
        for v in ivf.centroids.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for list in &ivf.lists {
            out.extend_from_slice(&(list.len() as u64).to_le_bytes());
            for r in list {
                out.extend_from_slice(&r.to_le_bytes());
            }
        }
    }
    out
}

struct Cursor<'a>(&'a [u8]);

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.0.len() {
            return Err(Error::format("index file truncated"));
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::format("index too large"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}

pub fn read_index(bytes: &[u8]) -> Result<ItemIndex> {
    let mut c = Cursor(bytes);
    if c.take(4)? != INDEX_MAGIC {
        return Err(Error::format("not an index file (bad magic)"));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported index version {version}")));
    }
    let mode = c.take(1)?[0];
    let dim = c.u32()? as usize;
    let count = c.u64()? as usize;
    let ids = (0..count).map(|_| c.u64()).collect::<Result<Vec<_>>>()?;
    let vectors = Tensor::from_vec(count, dim, c.f64s(count * dim)?);
    let ivf = match mode {
        0 => None,
        1 => {
            let p = c.u32()? as usize;
            let nprobe = c.u32()? as usize;
            let centroids = Tensor::from_vec(p, dim, c.f64s(p * dim)?);
            let mut lists = Vec::with_capacity(p);
            for _ in 0..p {
                let n = c.u64()? as usize;
                let list = (0..n).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
                if list.iter().any(|&r| r as usize >= count) {
                    return Err(Error::format("posting list refers to a missing row"));
                }
                lists.push(list);
            }
            Some(Ivf { centroids, lists, nprobe })
        }
        m => return Err(Error::format(format!("unknown index mode {m}"))),
    };
    if !c.0.is_empty() {
        return Err(Error::format("trailing bytes after index"));
    }
    Ok(ItemIndex::from_parts(ids, vectors, ivf))
}

pub fn save_index(path: impl AsRef<Path>, index: &ItemIndex) -> Result<()> {
    fs::write(path, write_index(index))?;
    Ok(())
}

pub fn load_index(path: impl AsRef<Path>) -> Result<ItemIndex> {
    read_index(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::super::tests::random_unit;
    use super::*;

    #[test]
    fn round_trips_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = random_unit(&mut rng, 50, 4);
        let exact = ItemIndex::build((100..150).collect(), v.clone()).unwrap();
        let ivf = ItemIndex::build_ivf((100..150).collect(), v, 4, 3, 2, 1).unwrap();
        for idx in [exact, ivf] {
            let bytes = write_index(&idx);
            let back = read_index(&bytes).unwrap();
            assert_eq!(back, idx);
            assert_eq!(write_index(&back), bytes);
            assert!(matches!(read_index(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        }
    }
}
