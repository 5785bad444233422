//! Binary checkpoint format.
//!
//! Layout (little endian): magic `RSEGCKPT`, `u32` version, `u32` epoch, `u32` length
//! and UTF-8 metadata text, `u32` record count, then per record: `u32` name length,
//! name, `u32` ndim, `u64` dims, `f32` payload. Parameters and buffers share the
//! record list and are matched by name on load.

use std::io::{Read, Write};
use std::path::Path;

use crate::array::Array;
use crate::error::{Result, TensorError};
use crate::params::ParamStore;
use crate::real::Real;

const MAGIC: &[u8; 8] = b"RSEGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: u32,
    /// Free-form text, typically the serialized model configuration.
    pub metadata: String,
    pub records: Vec<(String, Array<f32>)>,
}

fn format_err(msg: impl Into<String>) -> TensorError {
    TensorError::Format(msg.into())
}

impl Checkpoint {
    pub fn from_store<T: Real>(store: &ParamStore<T>, epoch: u32, metadata: impl Into<String>) -> Self {
        let records = store
            .params()
            .iter()
            .map(|p| (p.name.clone(), p.value.cast::<f32>()))
            .chain(store.buffers().iter().map(|b| (b.name.clone(), b.value.cast::<f32>())))
            .collect();
        Self {
            epoch,
            metadata: metadata.into(),
            records,
        }
    }

    /// Copies every record into the matching parameter or buffer. The store must
    /// contain exactly the same names and shapes.
    pub fn restore_into<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        let expected = store.params().len() + store.buffers().len();
        if expected != self.records.len() {
            return Err(format_err(format!(
                "checkpoint has {} tensors, model expects {expected}",
                self.records.len()
            )));
        }
        for (name, arr) in &self.records {
            let target = if let Some(id) = store.find_param(name) {
                &mut store.param_mut(id).value
            } else if let Some(id) = store.find_buffer(name) {
                store.buffer_mut(id)
            } else {
                return Err(format_err(format!("unknown tensor {name:?}")));
            };
            if target.shape() != arr.shape() {
                return Err(format_err(format!(
                    "tensor {name:?} has shape {:?}, model expects {:?}",
                    arr.shape(),
                    target.shape()
                )));
            }
            for (d, &s) in target.data_mut().iter_mut().zip(arr.data()) {
                *d = T::lit(s as f64);
            }
        }
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&self.epoch.to_le_bytes())?;
        write_bytes(w, self.metadata.as_bytes())?;
        w.write_all(&(self.records.len() as u32).to_le_bytes())?;
        for (name, arr) in &self.records {
            write_bytes(w, name.as_bytes())?;
            w.write_all(&(arr.ndim() as u32).to_le_bytes())?;
            for &d in arr.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(arr.len() * 4);
            for v in arr.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        read_exact(r, &mut magic)?;
        if &magic != MAGIC {
            return Err(format_err("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported checkpoint version {version}")));
        }
        let epoch = read_u32(r)?;
        let metadata = String::from_utf8(read_bytes(r)?)
            .map_err(|_| format_err("metadata is not UTF-8"))?;
        let n = read_u32(r)? as usize;
        let mut records = Vec::with_capacity(n.min(4096));
        for _ in 0..n {
            let name = String::from_utf8(read_bytes(r)?)
                .map_err(|_| format_err("tensor name is not UTF-8"))?;
            let ndim = read_u32(r)? as usize;
            if ndim > 8 {
                return Err(format_err(format!("tensor {name:?} has {ndim} dims")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(r, &mut b)?;
                shape.push(usize::try_from(u64::from_le_bytes(b)).map_err(|_| format_err("dimension overflow"))?);
            }
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&l| l <= 1 << 31)
                .ok_or_else(|| format_err(format!("tensor {name:?} is too large")))?;
            let mut raw = vec![0u8; len * 4];
            read_exact(r, &mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            records.push((name, Array::from_vec(&shape, data)?));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(format_err("trailing bytes after last tensor"));
        }
        Ok(Self {
            epoch,
            metadata,
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }
}

fn write_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    w.write_all(&(b.len() as u32).to_le_bytes())?;
    w.write_all(b)?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => format_err("truncated checkpoint"),
        _ => TensorError::Io(e),
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let n = read_u32(r)? as usize;
    if n > 1 << 24 {
        return Err(format_err("string field too long"));
    }
    let mut v = vec![0u8; n];
    read_exact(r, &mut v)?;
    Ok(v)
}
