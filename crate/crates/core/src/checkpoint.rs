//! `YATK` checkpoint container: named fp32 tensors behind a versioned header.
//!
//! ```text
//! "YATK"  u32 version  u32 count
//! count × { u32 name_len, name (UTF-8), u32 ndim, ndim × u64 dim, u64 offset }
//! f32 data, tensors back to back; offset is in bytes from the start of data
//! ```
//!
//! All integers and floats are little-endian. Parameters are f64 in memory
//! and are rounded to f32 on save.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Module, Param};

pub const MAGIC: &[u8; 4] = b"YATK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for t in tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.data.len() {
            return Err(Error::shape(
                "checkpoint",
                format!("{expected} values for {}", t.name),
                t.data.len(),
            ));
        }
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.data.len() as u64;
    }
    for t in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()) {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::parse(None, format!("checkpoint truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::parse(None, "not a YATK checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::parse(None, format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut table = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::parse(None, "tensor name is not UTF-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let offset = r.u64()? as usize;
        table.push((name, shape, offset));
    }
    let data = &bytes[r.pos..];
    let mut expected_offset = 0;
    let mut out = Vec::with_capacity(table.len());
    for (name, shape, offset) in table {
        let n: usize = shape.iter().product();
        if offset != expected_offset {
            return Err(Error::parse(
                None,
                format!("tensor {name}: offset {offset}, expected {expected_offset}"),
            ));
        }
        let raw = data
            .get(offset..offset + 4 * n)
            .ok_or_else(|| Error::parse(None, format!("tensor {name}: data truncated")))?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        expected_offset += 4 * n;
        out.push(Tensor {
            name,
            shape,
            data: values,
        });
    }
    if expected_offset != data.len() {
        return Err(Error::parse(
            None,
            format!("{} trailing bytes", data.len() - expected_offset),
        ));
    }
    Ok(out)
}

/// Snapshot of every parameter of `module`, in registry order.
pub fn tensors_of<M: Module + ?Sized>(module: &M) -> Vec<Tensor> {
    let mut out = Vec::new();
    module.visit_params(&mut |p: &Param| {
        out.push(Tensor {
            name: p.name.clone(),
            shape: vec![p.value.rows(), p.value.cols()],
            data: p.value.as_slice().iter().map(|&v| v as f32).collect(),
        })
    });
    out
}

/// Overwrites the parameters of `module` from `tensors`. Names and shapes
/// must match the registry exactly.
pub fn load_into<M: Module + ?Sized>(module: &mut M, tensors: &[Tensor]) -> Result<()> {
    let names = module.param_names();
    if names.len() != tensors.len() {
        return Err(Error::Input(format!(
            "checkpoint has {} tensors, model has {}",
            tensors.len(),
            names.len()
        )));
    }
    let mut i = 0;
    let mut err = None;
    module.visit_params_mut(&mut |p: &mut Param| {
        let t = &tensors[i];
        i += 1;
        if err.is_some() {
            return;
        }
        if t.name != p.name || t.shape != [p.value.rows(), p.value.cols()] {
            err = Some(Error::Input(format!(
                "checkpoint tensor {} {:?} does not match parameter {} {:?}",
                t.name,
                t.shape,
                p.name,
                p.value.shape()
            )));
            return;
        }
        for (dst, &src) in p.value.as_mut_slice().iter_mut().zip(&t.data) {
            *dst = src as f64;
        }
    });
    err.map_or(Ok(()), Err)
}

pub fn save<M: Module + ?Sized>(module: &M, path: &Path) -> Result<()> {
    std::fs::write(path, encode(&tensors_of(module))?)?;
    Ok(())
}

pub fn load<M: Module + ?Sized>(module: &mut M, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path)?;
    load_into(
        module,
        &decode(&bytes).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::parse(Some(path), msg),
            other => other,
        })?,
    )
}
