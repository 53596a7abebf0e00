//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "JFCK" | u32 version | u32 len | model config JSON
//! u32 count | count × (u32 len | name | u8 dtype | u32 ndim | ndim × u64 | f64 data)
//! u8 has_moments | [u64 step | count × f64 m | count × f64 v]
//! ```
//!
//! dtype 0 is f64, the only one written.

use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ModelParams;
use crate::tensor::Tensor;

use super::optim::AdamState;

pub const MAGIC: &[u8; 4] = b"JFCK";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 0;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub opt: Option<AdamState>,
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let json = serde_json::to_vec(&ck.model.cfg)
        .map_err(|e| Error::Contract(format!("cannot serialize config: {e}")))?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let named = ck.model.params.named_tensors();
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in &named {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        t.data().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    }
    match &ck.opt {
        None => out.push(0),
        Some(opt) => {
            out.push(1);
            out.extend_from_slice(&opt.step.to_le_bytes());
            for moments in [&opt.m, &opt.v] {
                for (mom, (name, t)) in moments.iter().zip(&named) {
                    if mom.len() != t.len() {
                        return Err(Error::Contract(format!("moment size of `{name}` differs")));
                    }
                    mom.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("unexpected end of file, wanted {n} more bytes")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| self.err("length overflow"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

pub fn decode(buf: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "not a checkpoint (bad magic)".into(),
        });
    }
    let at = r.pos;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: at,
            msg: format!("unsupported checkpoint version {version}"),
        });
    }
    let len = r.u32()? as usize;
    let at = r.pos;
    let cfg: ModelConfig = serde_json::from_slice(r.take(len)?).map_err(|e| Error::Parse {
        offset: at,
        msg: format!("bad model config: {e}"),
    })?;
    let reference = Model::init(cfg.clone(), 0)?;
    let expected = reference.params.named_tensors();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(r.err(format!("{count} tensors, the config implies {}", expected.len())));
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, t) in &expected {
        let n = r.u32()? as usize;
        let at = r.pos;
        let got = r.take(n)?;
        if got != name.as_bytes() {
            return Err(Error::Parse {
                offset: at,
                msg: format!("expected tensor `{name}`"),
            });
        }
        if r.u8()? != DTYPE_F64 {
            return Err(r.err(format!("tensor `{name}` is not f64")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != t.shape() {
            return Err(r.err(format!("tensor `{name}` has shape {shape:?}, expected {:?}", t.shape())));
        }
        let at = r.pos;
        let data = r.f64s(t.len())?;
        tensors.push(Tensor::new(shape, data).map_err(|e| Error::Parse {
            offset: at,
            msg: format!("tensor `{name}`: {e}"),
        })?);
    }
    let mut it = tensors.into_iter();
    let params: ModelParams = reference.params.map(&mut |_, _| it.next().expect("counted above"));
    let opt = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let mut read = || {
                expected
                    .iter()
                    .map(|(_, t)| r.f64s(t.len()))
                    .collect::<Result<Vec<_>>>()
            };
            let m = read()?;
            let v = read()?;
            Some(AdamState { m, v, step })
        }
        flag => return Err(r.err(format!("bad moments flag {flag}"))),
    };
    if r.pos != buf.len() {
        return Err(r.err("trailing bytes"));
    }
    Ok(Checkpoint {
        model: Model::from_parts(cfg, params)?,
        opt,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
