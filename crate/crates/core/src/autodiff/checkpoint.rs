//! Self-describing binary checkpoint: a versioned header with string
//! metadata (query init mode, query count, config hash, ...) followed by
//! named parameter tensors as little-endian f64. Round-trips bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SEG3DCKP";
const VERSION: u16 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub params: ParamStore,
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_exact_buf(r: &mut impl Read, n: usize) -> std::io::Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let b = read_exact_buf(r, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_str(r: &mut impl Read) -> std::io::Result<String> {
    let n = read_u32(r)? as usize;
    let b = read_exact_buf(r, n)?;
    Ok(String::from_utf8_lossy(&b).into_owned())
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            write_str(w, v)?;
        }
        w.write_all(&(self.params.map.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params.map {
            write_str(w, name)?;
            w.write_all(&[t.shape.len() as u8])?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| Error::Format(format!("truncated checkpoint: {}", e));
        let magic = read_exact_buf(r, 8).map_err(fmt)?;
        if magic != MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let vb = read_exact_buf(r, 2).map_err(fmt)?;
        let version = u16::from_le_bytes([vb[0], vb[1]]);
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version mismatch: found {}, expected {}",
                version, VERSION
            )));
        }
        let mut meta = BTreeMap::new();
        let n_meta = read_u32(r).map_err(fmt)?;
        for _ in 0..n_meta {
            let k = read_str(r).map_err(fmt)?;
            let v = read_str(r).map_err(fmt)?;
            meta.insert(k, v);
        }
        let mut params = ParamStore::new();
        let n_params = read_u32(r).map_err(fmt)?;
        for _ in 0..n_params {
            let name = read_str(r).map_err(fmt)?;
            let ndim = read_exact_buf(r, 1).map_err(fmt)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(r).map_err(fmt)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let b = read_exact_buf(r, 8).map_err(fmt)?;
                data.push(f64::from_le_bytes([
                    b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
                ]));
            }
            params.insert(name, Tensor { shape, data });
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::read_from(&mut BufReader::new(f))
    }
}
