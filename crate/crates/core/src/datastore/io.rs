//! Binary persistence for datastores ("UDKD") and IVF indexes ("UDKI").

use std::io::{Read, Write};
use std::path::Path;

use crate::corpus::TokenId;
use crate::error::{Error, Result};

use super::{Datastore, IvfIndex};

pub const DATASTORE_MAGIC: &[u8; 4] = b"UDKD";
pub const INDEX_MAGIC: &[u8; 4] = b"UDKI";
const FORMAT_VERSION: u32 = 1;

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!("truncated: wanted {n} more bytes"),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: "trailing bytes".into(),
            });
        }
        Ok(())
    }
}

fn check_magic(cur: &mut Cursor, magic: &[u8; 4]) -> Result<()> {
    let got = cur.take(4)?;
    if got != magic {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {got:?}"),
        });
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    Ok(())
}

pub fn save_datastore(ds: &Datastore, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let mut run = || -> std::io::Result<()> {
        w.write_all(DATASTORE_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(ds.dim() as u32).to_le_bytes())?;
        w.write_all(&(ds.len() as u64).to_le_bytes())?;
        for &k in &ds.keys {
            w.write_all(&k.to_le_bytes())?;
        }
        for &v in &ds.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    };
    run().map_err(|e| Error::io(path, e))
}

pub fn load_datastore(path: &Path) -> Result<Datastore> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    check_magic(&mut cur, DATASTORE_MAGIC)?;
    let dim = cur.u32()? as usize;
    let count = cur.u64()? as usize;
    let keys = cur.f32_vec(count * dim)?;
    let values: Vec<TokenId> = cur
        .take(count * 4)?
        .chunks_exact(4)
        .map(|c| TokenId::from_le_bytes(c.try_into().unwrap()))
        .collect();
    cur.finish()?;
    Ok(Datastore::from_parts(dim, keys, values))
}

pub fn save_index(index: &IvfIndex, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let mut run = || -> std::io::Result<()> {
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(index.nlist as u32).to_le_bytes())?;
        w.write_all(&(index.dim as u32).to_le_bytes())?;
        for &c in &index.centroids {
            w.write_all(&c.to_le_bytes())?;
        }
        for list in &index.lists {
            w.write_all(&(list.len() as u64).to_le_bytes())?;
            for &id in list {
                w.write_all(&id.to_le_bytes())?;
            }
        }
        w.flush()
    };
    run().map_err(|e| Error::io(path, e))
}

pub fn load_index(path: &Path) -> Result<IvfIndex> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    check_magic(&mut cur, INDEX_MAGIC)?;
    let nlist = cur.u32()? as usize;
    let dim = cur.u32()? as usize;
    let centroids = cur.f32_vec(nlist * dim)?;
    let mut lists = Vec::with_capacity(nlist);
    for _ in 0..nlist {
        let len = cur.u64()? as usize;
        let ids: Vec<u64> = cur
            .take(len * 8)?
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        lists.push(ids);
    }
    cur.finish()?;
    Ok(IvfIndex {
        dim,
        nlist,
        centroids,
        lists,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datastore::build_ivf;

    fn sample_store() -> Datastore {
        let mut ds = Datastore::new(3);
        for i in 0..9u32 {
            let f = i as f32;
            ds.push(&[f, f * 0.5, -f], i % 4).unwrap();
        }
        ds
    }

    #[test]
    fn datastore_round_trip_is_bit_exact() {
        let ds = sample_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.udkd");
        save_datastore(&ds, &path).unwrap();
        assert_eq!(load_datastore(&path).unwrap(), ds);
        // byte-level stability of a re-save
        let path2 = dir.path().join("ds2.udkd");
        save_datastore(&load_datastore(&path).unwrap(), &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn empty_store_round_trips() {
        let ds = Datastore::new(5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.udkd");
        save_datastore(&ds, &path).unwrap();
        let loaded = load_datastore(&path).unwrap();
        assert_eq!(loaded, ds);
        assert_eq!(loaded.dim(), 5);
    }

    #[test]
    fn truncated_datastore_is_an_error_not_a_partial_store() {
        let ds = sample_store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.udkd");
        save_datastore(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(
            load_datastore(&path),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn index_round_trip() {
        let ds = sample_store();
        let idx = build_ivf(&ds, 3, 5, 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("idx.udki");
        save_index(&idx, &path).unwrap();
        assert_eq!(load_index(&path).unwrap(), idx);
    }

    #[test]
    fn wrong_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.udkd");
        std::fs::write(&path, b"UDAK\x01\x00\x00\x00").unwrap();
        assert!(load_datastore(&path).is_err());
    }
}
