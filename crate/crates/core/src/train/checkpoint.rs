//! Binary checkpoints.
//!
//! ```text
//! "DRNCKPT" 0x01
//! u32 count, then per tensor: u16 name length, UTF-8 name, u8 rank, rank × u32 dims, f32 values
//! u32 count, the same table for optimizer moments ("m/<name>", "v/<name>" per trainable tensor)
//! u32 epoch
//! u32 length, UTF-8 config echo
//! ```
//!
//! Everything is little-endian.

use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Shape, Tensor};

use super::adam::AdamState;

pub const MAGIC: &[u8; 7] = b"DRNCKPT";
pub const VERSION: u8 = 0x01;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<NamedTensor>,
    pub moments: Vec<NamedTensor>,
    /// Completed epochs.
    pub epoch: u32,
    pub config: String,
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::format("checkpoint", detail)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(corrupt(format!("truncated while reading {what} at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        let raw = self.take(len, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| corrupt(format!("{what} is not UTF-8")))
    }

    fn table(&mut self, what: &str) -> Result<Vec<NamedTensor>> {
        let count = self.u32(what)? as usize;
        let mut out = Vec::new();
        for _ in 0..count {
            let len = self.u16("tensor name length")? as usize;
            let name = self.string(len, "tensor name")?;
            let rank = self.u8("tensor rank")? as usize;
            let dims = (0..rank).map(|_| self.u32("tensor dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt(format!("{name}: dims overflow")))?;
            let raw = self.take(n.checked_mul(4).ok_or_else(|| corrupt("tensor too large"))?, "tensor values")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            out.push(NamedTensor { name, dims, data });
        }
        Ok(out)
    }
}

fn write_table(out: &mut Vec<u8>, table: &[NamedTensor]) -> Result<()> {
    out.extend((table.len() as u32).to_le_bytes());
    for t in table {
        let name_len = u16::try_from(t.name.len()).map_err(|_| Error::InvalidArgument(format!("name too long: {}", t.name)))?;
        let rank = u8::try_from(t.dims.len()).map_err(|_| Error::InvalidArgument(format!("rank too large: {}", t.name)))?;
        out.extend(name_len.to_le_bytes());
        out.extend(t.name.as_bytes());
        out.push(rank);
        for &d in &t.dims {
            out.extend(u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dim too large: {}", t.name)))?.to_le_bytes());
        }
        for v in &t.data {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(())
}

impl Checkpoint {
    /// Capture parameters and optimizer moments. Only trainable tensors carry moments.
    pub fn capture(params: &ParamStore, adam: &AdamState, epoch: u32, config: String) -> Self {
        let mut tensors = Vec::new();
        let mut moments = Vec::new();
        for (id, name, p) in params.iter() {
            tensors.push(NamedTensor { name: name.to_string(), dims: p.dims.clone(), data: p.value.data().to_vec() });
            if p.trainable {
                for (prefix, src) in [("m/", &adam.m), ("v/", &adam.v)] {
                    let data = src[id.index()].data().to_vec();
                    moments.push(NamedTensor { name: format!("{prefix}{name}"), dims: p.dims.clone(), data });
                }
            }
        }
        Self { params: tensors, moments, epoch, config }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.push(VERSION);
        write_table(&mut out, &self.params)?;
        write_table(&mut out, &self.moments)?;
        out.extend(self.epoch.to_le_bytes());
        out.extend((self.config.len() as u32).to_le_bytes());
        out.extend(self.config.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic").ok() != Some(&MAGIC[..]) {
            return Err(corrupt("bad magic; not a checkpoint"));
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let params = r.table("parameter table")?;
        let moments = r.table("moment table")?;
        let epoch = r.u32("epoch")?;
        let len = r.u32("config length")? as usize;
        let config = r.string(len, "config echo")?;
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { params, moments, epoch, config })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(std::fs::write(path, self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Check the tensor table against an architecture: same names, order and dims.
    pub fn verify(&self, params: &ParamStore) -> Result<()> {
        let want = params.shape_table();
        let got: Vec<(String, Vec<usize>)> = self.params.iter().map(|t| (t.name.clone(), t.dims.clone())).collect();
        if want.len() != got.len() {
            return Err(Error::Architecture(format!(
                "checkpoint has {} tensors, architecture expects {}",
                got.len(),
                want.len()
            )));
        }
        for ((wn, wd), (gn, gd)) in want.iter().zip(&got) {
            if wn != gn || wd != gd {
                return Err(Error::Architecture(format!("checkpoint tensor {gn} {gd:?} where architecture has {wn} {wd:?}")));
            }
        }
        Ok(())
    }

    /// Copy parameters into a store with a matching architecture.
    pub fn restore_params(&self, params: &mut ParamStore) -> Result<()> {
        self.verify(params)?;
        for ((_, p), t) in params.iter_mut().zip(&self.params) {
            let shape = p.value.shape();
            p.value = Tensor::from_vec(shape, t.data.clone())?;
        }
        Ok(())
    }

    /// Rebuild optimizer moments; `step` is supplied by the caller.
    pub fn restore_adam(&self, params: &ParamStore, step: u64) -> Result<AdamState> {
        let mut state = AdamState::new(params);
        state.step = step;
        let mut it = self.moments.iter();
        for (id, name, p) in params.iter() {
            if !p.trainable {
                continue;
            }
            for (prefix, dst) in [("m/", &mut state.m), ("v/", &mut state.v)] {
                let t = it.next().ok_or_else(|| Error::Architecture(format!("missing moment {prefix}{name}")))?;
                if t.name != format!("{prefix}{name}") || t.dims != p.dims {
                    return Err(Error::Architecture(format!("moment {} {:?} where {prefix}{name} expected", t.name, t.dims)));
                }
                let shape: Shape = p.value.shape();
                dst[id.index()] = Tensor::from_vec(shape, t.data.clone())?;
            }
        }
        if let Some(extra) = it.next() {
            return Err(Error::Architecture(format!("unexpected moment {}", extra.name)));
        }
        Ok(state)
    }
}
