//! FQT named-tensor container.
//!
//! Each record is `"FQT1"`, u8 dtype (0 = f32 LE), u8 reserved, u16 name
//! length, UTF-8 name, u32 ndim, ndim x u32 dims, then raw data. Records sit
//! back to back. An optional trailer `"FQJ1"`, u32 length, UTF-8 JSON closes
//! the container. All integers are little-endian.

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"FQT1";
pub const JSON_MAGIC: &[u8; 4] = b"FQJ1";
pub const DTYPE_F32: u8 = 0;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub json: Option<Value>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor<f32>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn take(&mut self, name: &str) -> Result<Tensor<f32>> {
        let i = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Format(format!("container has no tensor `{name}`")))?;
        Ok(self.tensors.remove(i).1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (name, t) in &self.tensors {
            write_tensor(&mut out, name, t)?;
        }
        if let Some(json) = &self.json {
            let body = serde_json::to_vec(json)?;
            out.extend_from_slice(JSON_MAGIC);
            out.extend_from_slice(
                &u32::try_from(body.len())
                    .map_err(|_| too_big("JSON trailer"))?
                    .to_le_bytes(),
            );
            out.extend_from_slice(&body);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let mut c = Container::new();
        while r.pos < bytes.len() {
            let magic = r.take(4)?;
            if magic == TENSOR_MAGIC {
                let (name, t) = read_tensor_body(&mut r)?;
                c.tensors.push((name, t));
            } else if magic == JSON_MAGIC {
                let len = r.u32()? as usize;
                c.json = Some(serde_json::from_slice(r.take(len)?)?);
                if r.pos != bytes.len() {
                    return Err(Error::Format("data after the JSON trailer".into()));
                }
            } else {
                return Err(Error::Format(format!("bad magic {:?} at byte {}", magic, r.pos - 4)));
            }
        }
        Ok(c)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn too_big(what: &str) -> Error {
    Error::Format(format!("{what} exceeds the format's size fields"))
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) -> Result<()> {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(DTYPE_F32);
    out.push(0);
    let name_len = u16::try_from(name.len()).map_err(|_| too_big("tensor name"))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &d in t.dims() {
        out.extend_from_slice(&u32::try_from(d).map_err(|_| too_big("dimension"))?.to_le_bytes());
    }
    out.reserve(4 * t.len());
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated: need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn read_tensor_body(r: &mut Reader<'_>) -> Result<(String, Tensor<f32>)> {
    let head = r.take(2)?;
    if head[0] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", head[0])));
    }
    let name_len = r.u16()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|e| Error::Format(format!("tensor name: {e}")))?
        .to_string();
    let ndim = r.u32()? as usize;
    if ndim == 0 || ndim > 4 {
        return Err(Error::Format(format!("tensor `{name}` has rank {ndim}")));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        dims.push(r.u32()? as usize);
    }
    let len = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|l| l.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("tensor `{name}` size overflows")))?;
    let raw = r.take(len)?;
    let data = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((name, Tensor::new(&dims, data)?))
}
