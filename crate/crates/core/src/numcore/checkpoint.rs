//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes  "TRIFUSE\0"
//! version      u32      CHECKPOINT_VERSION
//! header_len   u32      followed by a UTF-8 JSON metadata blob
//! count        u32      number of tensors
//! per tensor:  u32 name_len, name bytes, u32 rows, u32 cols, rows*cols f64 (row-major)
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::matrix::Matrix;
use super::params::ParamStore;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TRIFUSE\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: Vec<(String, Matrix)>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, header: serde_json::Value) -> Self {
        let tensors = store
            .ids()
            .map(|id| (store.name(id).to_string(), store.value(id).clone()))
            .collect();
        Checkpoint { header, tensors }
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header)?;
        write_u32(w, header.len())?;
        w.write_all(&header)?;
        write_u32(w, self.tensors.len())?;
        for (name, m) in &self.tensors {
            write_u32(w, name.len())?;
            w.write_all(name.as_bytes())?;
            write_u32(w, m.rows())?;
            write_u32(w, m.cols())?;
            for v in m.as_slice() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = read_u32(r).map_err(bad)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {CHECKPOINT_VERSION}"
            )));
        }
        let hlen = read_u32(r).map_err(bad)? as usize;
        let mut header = vec![0u8; hlen];
        r.read_exact(&mut header).map_err(bad)?;
        let header = serde_json::from_slice(&header)?;
        let count = read_u32(r).map_err(bad)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let nlen = read_u32(r).map_err(bad)? as usize;
            let mut name = vec![0u8; nlen];
            r.read_exact(&mut name).map_err(bad)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
            let rows = read_u32(r).map_err(bad)? as usize;
            let cols = read_u32(r).map_err(bad)? as usize;
            let mut buf = vec![0u8; rows * cols * 8];
            r.read_exact(&mut buf).map_err(bad)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    /// Copies tensors into `store`. Every store parameter must be present
    /// with its exact shape, and no unknown names are accepted.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                store.len(),
                self.tensors.len()
            )));
        }
        for (name, m) in &self.tensors {
            let id = store
                .id(name)
                .map_err(|_| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            let want = store.value(id).shape();
            if want != m.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {want:?}",
                    m.shape()
                )));
            }
            *store.value_mut(id) = m.clone();
        }
        Ok(())
    }
}

fn write_u32(w: &mut impl Write, v: usize) -> std::io::Result<()> {
    let v = u32::try_from(v).map_err(|_| std::io::Error::other("value exceeds u32"))?;
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
