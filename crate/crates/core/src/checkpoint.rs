//! Versioned binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! magic `PSRCKPT\0`, u32 format version, u64 config hash, the
//! length-prefixed canonical config text, training counters, the RNG
//! seed and stream position, then four named-tensor sections
//! (generator, discriminator, both Adam states). Serialization is
//! fully deterministic, so saving the same state twice produces
//! byte-identical files. Writes go to a temp file and are renamed into
//! place.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PSRCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamSnapshot {
    pub t: u64,
    pub m: Vec<(String, Tensor)>,
    pub v: Vec<(String, Tensor)>,
}

impl AdamSnapshot {
    pub fn from_state(state: &AdamState) -> Self {
        AdamSnapshot {
            t: state.t,
            m: state.slots.iter().map(|(n, m, _)| (n.clone(), m.clone())).collect(),
            v: state.slots.iter().map(|(n, _, v)| (n.clone(), v.clone())).collect(),
        }
    }

    pub fn into_state(self) -> Result<AdamState> {
        if self.m.len() != self.v.len() {
            return Err(Error::Checkpoint("optimizer moment count mismatch".into()));
        }
        let slots = self
            .m
            .into_iter()
            .zip(self.v)
            .map(|((nm, m), (nv, v))| {
                if nm != nv {
                    return Err(Error::Checkpoint(format!(
                        "optimizer moment name mismatch: {} vs {}",
                        nm, nv
                    )));
                }
                Ok((nm, m, v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdamState { t: self.t, slots })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    pub best: Option<f64>,
    pub since_improve: u32,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub gen: Vec<(String, Tensor)>,
    pub disc: Vec<(String, Tensor)>,
    pub opt_g: AdamSnapshot,
    pub opt_d: AdamSnapshot,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u64(out, s.len() as u64);
    out.extend_from_slice(s.as_bytes());
}

fn put_tensors(out: &mut Vec<u8>, tensors: &[(String, Tensor)]) {
    put_u64(out, tensors.len() as u64);
    for (name, t) in tensors {
        put_str(out, name);
        put_u64(out, t.shape().len() as u64);
        for &d in t.shape() {
            put_u64(out, d as u64);
        }
        for &v in t.data() {
            put_f64(out, v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u64()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid utf-8 in checkpoint".into()))
    }

    fn tensors(&mut self) -> Result<Vec<(String, Tensor)>> {
        let count = self.u64()? as usize;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let name = self.string()?;
            let ndim = self.u64()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(self.u64()? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                data.push(self.f64()?);
            }
            out.push((name, Tensor::new(shape, data)));
        }
        Ok(out)
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, FORMAT_VERSION);
        let hash = TrainConfig::parse(&self.config_text)
            .map(|c| c.hash())
            .unwrap_or(0);
        put_u64(&mut out, hash);
        put_str(&mut out, &self.config_text);
        put_u64(&mut out, self.epoch);
        put_u64(&mut out, self.step);
        put_f64(&mut out, self.lr);
        out.push(self.best.is_some() as u8);
        put_f64(&mut out, self.best.unwrap_or(0.0));
        put_u32(&mut out, self.since_improve);
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        put_tensors(&mut out, &self.gen);
        put_tensors(&mut out, &self.disc);
        put_u64(&mut out, self.opt_g.t);
        put_tensors(&mut out, &self.opt_g.m);
        put_tensors(&mut out, &self.opt_g.v);
        put_u64(&mut out, self.opt_d.t);
        put_tensors(&mut out, &self.opt_d.m);
        put_tensors(&mut out, &self.opt_d.v);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(8)?;
        if magic != MAGIC {
            return Err(Error::Checkpoint(format!(
                "bad magic {:?} (not a checkpoint file)",
                &magic[..magic.len().min(8)]
            )));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "format version {} unsupported (expected {})",
                version, FORMAT_VERSION
            )));
        }
        let stored_hash = r.u64()?;
        let config_text = r.string()?;
        let cfg = TrainConfig::parse(&config_text)?;
        if cfg.hash() != stored_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch: stored {:016x}, recomputed {:016x}",
                stored_hash,
                cfg.hash()
            )));
        }
        let epoch = r.u64()?;
        let step = r.u64()?;
        let lr = r.f64()?;
        let has_best = r.take(1)?[0] != 0;
        let best_val = r.f64()?;
        let since_improve = r.u32()?;
        let rng_seed: [u8; 32] = r.take(32)?.try_into().unwrap();
        let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
        let gen = r.tensors()?;
        let disc = r.tensors()?;
        let opt_g = AdamSnapshot { t: r.u64()?, m: r.tensors()?, v: r.tensors()? };
        let opt_d = AdamSnapshot { t: r.u64()?, m: r.tensors()?, v: r.tensors()? };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after checkpoint payload",
                buf.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            config_text,
            epoch,
            step,
            lr,
            best: has_best.then_some(best_val),
            since_improve,
            rng_seed,
            rng_word_pos,
            gen,
            disc,
            opt_g,
            opt_d,
        })
    }

    /// Atomic save: write to a sibling temp file, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("cannot open {}: {}", path.display(), e)))?
            .read_to_end(&mut buf)?;
        Checkpoint::from_bytes(&buf)
    }

    pub fn config(&self) -> Result<TrainConfig> {
        TrainConfig::parse(&self.config_text)
    }
}
