//! Checkpoint files: a little-endian binary map from names to tensors.
//!
//! Layout:
//!
//! ```text
//! magic    b"RPQC"
//! version  u32 (= 1)
//! dtype    u8  (4 = f32, 8 = f64)
//! n_meta   u32, then n_meta x (key: str, value: str)
//! n_params u32, then n_params x (name: str, kind: u8, rank: u32,
//!          dims: rank x u64, values: prod(dims) x dtype)
//! str      u32 byte length followed by UTF-8 bytes
//! kind     0 weight, 1 affine, 2 step, 3 buffer
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use repq::{ParamKind, ParamStore, Scalar, Tensor};

use crate::error::{Result, TrainError};

pub const MAGIC: &[u8; 4] = b"RPQC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub meta: BTreeMap<String, String>,
    pub params: BTreeMap<String, Entry<T>>,
}

fn kind_code(k: ParamKind) -> u8 {
    match k {
        ParamKind::Weight => 0,
        ParamKind::Affine => 1,
        ParamKind::Step => 2,
        ParamKind::Buffer => 3,
    }
}

fn kind_from(c: u8) -> Option<ParamKind> {
    Some(match c {
        0 => ParamKind::Weight,
        1 => ParamKind::Affine,
        2 => ParamKind::Step,
        3 => ParamKind::Buffer,
        _ => return None,
    })
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend((s.len() as u32).to_le_bytes());
    out.extend(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| TrainError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| TrainError::Checkpoint("invalid UTF-8 string".into()))
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn from_store(store: &ParamStore<T>, meta: BTreeMap<String, String>) -> Self {
        let params = store
            .ids()
            .map(|id| {
                let e = Entry {
                    kind: store.kind(id),
                    value: store.get(id).clone(),
                };
                (store.name(id).to_string(), e)
            })
            .collect();
        Checkpoint { meta, params }
    }

    pub fn tensors(&self) -> BTreeMap<String, Tensor<T>> {
        self.params.iter().map(|(k, e)| (k.clone(), e.value.clone())).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.push(T::DTYPE);
        out.extend((self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend((self.params.len() as u32).to_le_bytes());
        for (name, e) in &self.params {
            put_str(&mut out, name);
            out.push(kind_code(e.kind));
            out.extend((e.value.rank() as u32).to_le_bytes());
            for &d in e.value.shape() {
                out.extend((d as u64).to_le_bytes());
            }
            for &v in e.value.data() {
                v.to_le(&mut out);
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(TrainError::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported version {version}")));
        }
        let dtype = r.u8()?;
        if dtype != T::DTYPE {
            return Err(TrainError::Checkpoint(format!("dtype {dtype}, expected {}", T::DTYPE)));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            meta.insert(k, r.str()?);
        }
        let mut params = BTreeMap::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let kind = kind_from(r.u8()?).ok_or_else(|| TrainError::Checkpoint(format!("{name}: bad kind")))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let width = T::DTYPE as usize;
            let bytes = r.take(n.checked_mul(width).ok_or_else(|| TrainError::Checkpoint("overflow".into()))?)?;
            let data = bytes.chunks_exact(width).map(T::from_le).collect();
            let value = Tensor::new(shape, data)?;
            params.insert(name, Entry { kind, value });
        }
        if r.pos != buf.len() {
            return Err(TrainError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
        }
        Ok(Checkpoint { meta, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| TrainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| TrainError::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
