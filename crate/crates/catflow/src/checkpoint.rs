//! Framed binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CATG"  u32 version
//! repeated: [u8; 4] tag, u64 length, payload
//!   CONF  canonical config text (UTF-8)
//!   SCHD  u64 T, f64 s, then 4 arrays of T + 1 f64   (diffusion only)
//!   PARM  u64 count, then per tensor: u32 name length, name, u64 rows, u64 cols, f64 values
//!   RNGS  [u8; 32] seed, u64 stream, u128 word position
//! ```
//!
//! Unknown versions and unknown section tags are refused.

use std::fs;
use std::path::Path;

use catflow_core::autodiff::Tensor;
use catflow_core::schedule::NoiseSchedule;
use catflow_core::train::{Model, TrainConfig};
use catflow_core::Rng;
use rand::SeedableRng;

use crate::error::{format_err, io_err, Result};

pub const MAGIC: &[u8; 4] = b"CATG";
pub const VERSION: u32 = 1;

/// A trained model with its config and generator state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    pub rng: Rng,
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn put_f64s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        section(&mut out, b"CONF", self.config.to_text().as_bytes());
        if let Some(s) = self.model.schedule() {
            let mut p = Vec::new();
            p.extend_from_slice(&(s.steps() as u64).to_le_bytes());
            p.extend_from_slice(&s.offset().to_le_bytes());
            for arr in s.arrays() {
                put_f64s(&mut p, arr);
            }
            section(&mut out, b"SCHD", &p);
        }
        let mut p = Vec::new();
        let params = self.model.params();
        p.extend_from_slice(&(params.len() as u64).to_le_bytes());
        for (name, t) in params.named() {
            p.extend_from_slice(&(name.len() as u32).to_le_bytes());
            p.extend_from_slice(name.as_bytes());
            p.extend_from_slice(&(t.rows() as u64).to_le_bytes());
            p.extend_from_slice(&(t.cols() as u64).to_le_bytes());
            put_f64s(&mut p, t.as_slice());
        }
        section(&mut out, b"PARM", &p);
        let mut p = Vec::new();
        p.extend_from_slice(&self.rng.get_seed());
        p.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        p.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        section(&mut out, b"RNGS", &p);
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(format_err(path, "not a checkpoint (bad magic bytes)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(format_err(path, format!("unsupported checkpoint version {version} (expected {VERSION})")));
        }
        let (mut config, mut schedule, mut params, mut rng) = (None, None, None, None);
        while r.pos < bytes.len() {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
            let len = r.u64()? as usize;
            let mut s = Reader { bytes: r.take(len)?, pos: 0, path };
            match &tag {
                b"CONF" => {
                    let text = std::str::from_utf8(s.bytes).map_err(|_| format_err(path, "config is not UTF-8"))?;
                    config = Some(TrainConfig::from_text(text)?);
                    s.pos = s.bytes.len();
                }
                b"SCHD" => {
                    let steps = s.u64()? as usize;
                    let offset = s.f64()?;
                    let arrays = [s.f64s(steps + 1)?, s.f64s(steps + 1)?, s.f64s(steps + 1)?, s.f64s(steps + 1)?];
                    schedule = Some(NoiseSchedule::from_arrays(steps, offset, arrays)?);
                }
                b"PARM" => {
                    let count = s.u64()? as usize;
                    let mut list = Vec::with_capacity(count);
                    for _ in 0..count {
                        let n = s.u32()? as usize;
                        let name = String::from_utf8(s.take(n)?.to_vec())
                            .map_err(|_| format_err(path, "parameter name is not UTF-8"))?;
                        let (rows, cols) = (s.u64()? as usize, s.u64()? as usize);
                        let values = s.f64s(rows * cols)?;
                        list.push((name, Tensor::new(rows, cols, values)?));
                    }
                    params = Some(list);
                }
                b"RNGS" => {
                    let seed: [u8; 32] = s.take(32)?.try_into().expect("32 bytes");
                    let stream = s.u64()?;
                    let word_pos = u128::from_le_bytes(s.take(16)?.try_into().expect("16 bytes"));
                    let mut g = Rng::from_seed(seed);
                    g.set_stream(stream);
                    g.set_word_pos(word_pos);
                    rng = Some(g);
                }
                _ => {
                    return Err(format_err(path, format!("unknown section {:?}", String::from_utf8_lossy(&tag))));
                }
            }
            if s.pos != s.bytes.len() {
                return Err(format_err(path, format!("trailing bytes in section {}", String::from_utf8_lossy(&tag))));
            }
        }
        let config = config.ok_or_else(|| format_err(path, "missing config section"))?;
        let params = params.ok_or_else(|| format_err(path, "missing parameter section"))?;
        let rng = rng.ok_or_else(|| format_err(path, "missing generator section"))?;
        let mut model = Model::build(&config, &mut catflow_core::rng_from_seed(config.seed))?;
        model.params_mut().load_named(params.iter().map(|(n, t)| (n.as_str(), t.clone())))?;
        match (model.schedule_mut(), schedule) {
            (Some(slot), Some(s)) => *slot = s,
            (None, None) => {}
            (Some(_), None) => return Err(format_err(path, "diffusion checkpoint without a schedule section")),
            (None, Some(_)) => return Err(format_err(path, "schedule section in a non-diffusion checkpoint")),
        }
        Ok(Self { config, model, rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| format_err(self.path, "truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| format_err(self.path, "length overflow"))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }
}
