//! Binary checkpoint container: magic "UDAK", format version, then named
//! tensors (name, rank, dims as u32, row-major little-endian f32 payload).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::nn::Params;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"UDAK";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
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

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

fn write_tensor<W: Write>(
    w: &mut W,
    name: &str,
    rank: u8,
    dims: &[u32],
    data: impl Iterator<Item = f32>,
) -> std::io::Result<()> {
    w.write_all(&(name.len() as u16).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&[rank])?;
    for &d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Saves a parameter set plus extra metadata tensors (written first, in the
/// given order) to `path`. Values are stored as f32.
pub fn save_params_file(params: &Params, extras: &[(&str, &[f32])], path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(
        std::fs::File::create(path).map_err(|e| Error::io(path, e))?,
    );
    let mut run = || -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let count = (extras.len() + params.len()) as u32;
        w.write_all(&count.to_le_bytes())?;
        for (name, data) in extras {
            write_tensor(&mut w, name, 1, &[data.len() as u32], data.iter().copied())?;
        }
        for (name, value, rank) in params.iter() {
            let dims: Vec<u32> = if rank == 1 {
                vec![value.ncols() as u32]
            } else {
                vec![value.nrows() as u32, value.ncols() as u32]
            };
            write_tensor(&mut w, name, rank, &dims, value.iter().map(|&v| v as f32))?;
        }
        w.flush()
    };
    run().map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint. Tensors whose names start with "__" are returned as
/// metadata; the rest become parameters in file order.
pub fn load_params_file(path: &Path) -> Result<(Params, HashMap<String, Vec<f32>>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, pos: 0 };
    let magic = r.take(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            msg: format!("bad magic {magic:?}, expected UDAK"),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            offset: 4,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let count = r.u32()?;
    let mut params = Params::new();
    let mut meta = HashMap::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name_off = r.pos as u64;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format {
                offset: name_off,
                msg: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u8()?;
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let n: usize = dims.iter().product();
        let data = r.take(n * 4)?;
        let values: Vec<f32> = data
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if name.starts_with("__") {
            meta.insert(name, values);
        } else {
            let f64s: Vec<f64> = values.iter().map(|&v| v as f64).collect();
            match rank {
                1 => {
                    params.add_vector(&name, f64s);
                }
                2 => {
                    let arr = Array2::from_shape_vec((dims[0], dims[1]), f64s).map_err(|_| {
                        Error::Format {
                            offset: name_off,
                            msg: format!("bad tensor shape for {name}"),
                        }
                    })?;
                    params.add_matrix(&name, arr);
                }
                other => {
                    return Err(Error::Format {
                        offset: name_off,
                        msg: format!("unsupported tensor rank {other}"),
                    })
                }
            }
        }
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            msg: "trailing bytes after last tensor".into(),
        });
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trip_params_and_meta() {
        let mut p = Params::new();
        p.add_matrix("w", array![[1.5, -2.25], [0.0, 3.0]]);
        p.add_vector("b", vec![0.5, 0.25]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.udak");
        save_params_file(&p, &[("__meta", &[7.0, 8.0])], &path).unwrap();
        let (loaded, meta) = load_params_file(&path).unwrap();
        assert_eq!(meta["__meta"], vec![7.0, 8.0]);
        assert_eq!(loaded.by_name("w"), p.by_name("w"));
        assert_eq!(loaded.by_name("b"), p.by_name("b"));
        assert_eq!(loaded.rank(loaded.id("b")), 1);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let mut p = Params::new();
        p.add_vector("b", vec![1.0, 2.0, 3.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.udak");
        save_params_file(&p, &[], &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        match load_params_file(&path) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.udak");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            load_params_file(&path),
            Err(Error::Format { offset: 0, .. })
        ));
    }
}
