//! Versioned checkpoint container.
//!
//! Layout (little-endian):
//!   magic   "MGCK", version u32
//!   config  u32 len + JSON bytes (the ModelConfig)
//!   stats   135 f64 means, 135 f64 stds
//!   base    named arrays
//!   u32 branch count, then per branch:
//!     name        u32 len + bytes
//!     encoder     u32 dim count + u32 dims
//!     arrays      named arrays
//!
//! Named arrays: u32 count, then per array u32 name len + bytes,
//! u32 value count, f64 values. Array order follows the parameter
//! visitors, so identical parameters serialize to identical bytes.
//! Loading validates every name and length against the config.

use super::{BranchParams, DenoiserParams, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::pose::{NormStats, FRAME_DIM};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MGCK";
const VERSION: u32 = 1;

/// A trained model: config, normalization stats, base parameters, and
/// any attached branches.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub stats: NormStats,
    pub mdm: DenoiserParams,
    pub branches: Vec<BranchParams>,
}

impl Checkpoint {
    pub fn branch(&self, name: &str) -> Option<&BranchParams> {
        self.branches.iter().find(|b| b.name == name)
    }

    pub fn stats_id(&self) -> String {
        self.stats.id()
    }
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

fn push_arrays(buf: &mut Vec<u8>, visit: &dyn Fn(&mut dyn FnMut(&str, &[f64]))) {
    let mut count = 0u32;
    visit(&mut |_, _| count += 1);
    buf.extend_from_slice(&count.to_le_bytes());
    visit(&mut |name, vals| {
        push_str(buf, name);
        buf.extend_from_slice(&(vals.len() as u32).to_le_bytes());
        for v in vals {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    });
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let cfg_json = serde_json::to_string(&ckpt.config).expect("config serializes");
    push_str(&mut buf, &cfg_json);
    for v in ckpt.stats.mean.iter().chain(ckpt.stats.std.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    push_arrays(&mut buf, &|f| ckpt.mdm.visit(f));
    buf.extend_from_slice(&(ckpt.branches.len() as u32).to_le_bytes());
    for b in &ckpt.branches {
        push_str(&mut buf, &b.name);
        let dims = b.encoder.dims();
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        push_arrays(&mut buf, &|f| b.visit(f));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Format("checkpoint string is not UTF-8".into()))
    }

    fn arrays_into(&mut self, visit_mut: &mut dyn FnMut(&mut dyn FnMut(&str, &mut Vec<f64>))) -> Result<()> {
        let count = self.u32()? as usize;
        let mut expected = 0usize;
        visit_mut(&mut |_, _| expected += 1);
        if count != expected {
            return Err(Error::Format(format!(
                "checkpoint has {count} arrays, model expects {expected}"
            )));
        }
        // read all arrays first, then fill in visitor order
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name = self.string()?;
            let len = self.u32()? as usize;
            let mut vals = vec![0.0; len];
            for v in &mut vals {
                *v = self.f64()?;
            }
            arrays.push((name, vals));
        }
        let mut idx = 0usize;
        let mut err: Option<Error> = None;
        visit_mut(&mut |name, slot| {
            if err.is_some() {
                return;
            }
            let (got_name, vals) = &arrays[idx];
            if got_name != name {
                err = Some(Error::Format(format!(
                    "checkpoint array '{got_name}' where '{name}' expected"
                )));
            } else if vals.len() != slot.len() {
                err = Some(Error::Format(format!(
                    "array '{name}' has {} values, expected {}",
                    vals.len(),
                    slot.len()
                )));
            } else {
                slot.copy_from_slice(vals);
            }
            idx += 1;
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let config: ModelConfig = serde_json::from_str(&r.string()?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    config.validate()?;
    let mut mean = vec![0.0; FRAME_DIM];
    let mut std = vec![0.0; FRAME_DIM];
    for v in mean.iter_mut().chain(std.iter_mut()) {
        *v = r.f64()?;
    }
    let stats = NormStats { mean, std };

    let mut mdm = DenoiserParams::zeros(&config);
    r.arrays_into(&mut |f| mdm.visit_mut(f))?;

    let branch_count = r.u32()? as usize;
    let mut branches = Vec::with_capacity(branch_count);
    for _ in 0..branch_count {
        let name = r.string()?;
        let dim_count = r.u32()? as usize;
        let mut dims = Vec::with_capacity(dim_count);
        for _ in 0..dim_count {
            dims.push(r.u32()? as usize);
        }
        if dims.len() < 2 || *dims.last().unwrap() != config.d_model {
            return Err(Error::Format(format!(
                "branch '{name}' encoder dims {dims:?} incompatible with d_model {}",
                config.d_model
            )));
        }
        let mut bp = BranchParams {
            name: name.clone(),
            encoder: Mlp::zeros(&dims),
            blocks: (0..super::N_BLOCKS).map(|_| super::Block::zeros(&config)).collect(),
            gates: vec![0.0; super::N_BLOCKS],
        };
        r.arrays_into(&mut |f| bp.visit_mut(f))?;
        branches.push(bp);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes in checkpoint".into()));
    }
    Ok(Checkpoint { config, stats, mdm, branches })
}
