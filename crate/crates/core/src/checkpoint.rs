//! Versioned binary checkpoints: student, teacher, both MTN copies,
//! optimizer momentum, iteration counter and RNG stream position. Tensor
//! payloads are little-endian `f64`, so save/load round-trips are bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::models::{Mtn, MtnConfig, SegNet, SegNetConfig};
use crate::nn::{ParamSet, SgdMomentum};
use crate::self_training::TrainState;

const MAGIC: &[u8; 8] = b"DCALCKPT";
const VERSION: u32 = 1;

#[derive(serde::Serialize, serde::Deserialize)]
struct Meta {
    seg: SegNetConfig,
    mtn: MtnConfig,
    lr: f64,
    momentum: f64,
    total_iterations: u64,
}

fn write_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn write_bytes(out: &mut Vec<u8>, b: &[u8]) {
    write_u32(out, b.len() as u32);
    out.extend_from_slice(b);
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &ArrayD<f64>) {
    write_bytes(out, name.as_bytes());
    write_u32(out, t.ndim() as u32);
    for &d in t.shape() {
        write_u64(out, d as u64);
    }
    for &v in t.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn write_model<M: ParamSet>(out: &mut Vec<u8>, name: &str, m: &M) {
    write_bytes(out, name.as_bytes());
    let tensors = m.tensors();
    write_u32(out, tensors.len() as u32);
    for (n, t, _) in tensors {
        write_tensor(out, &n, t);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
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

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    fn tensor(&mut self) -> Result<(String, ArrayD<f64>)> {
        let name = String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Format("bad tensor name".into()))?;
        let ndim = self.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(self.u64()? as usize);
        }
        let len: usize = dims.iter().product();
        let raw = self.take(len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok((name, ArrayD::from_shape_vec(IxDyn(&dims), data).unwrap()))
    }

    fn model_into<M: ParamSet>(&mut self, expect_name: &str, m: &mut M) -> Result<()> {
        let name = String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| Error::Format("bad section name".into()))?;
        if name != expect_name {
            return Err(Error::Format(format!("expected section {expect_name}, found {name}")));
        }
        let count = self.u32()? as usize;
        let mut stored = std::collections::HashMap::new();
        for _ in 0..count {
            let (n, t) = self.tensor()?;
            stored.insert(n, t);
        }
        for (n, t, _) in m.tensors_mut() {
            let s = stored
                .remove(&n)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {n}")))?;
            if s.shape() != t.shape() {
                return Err(Error::Format(format!("tensor {n} has mismatched shape")));
            }
            *t = s;
        }
        if !stored.is_empty() {
            return Err(Error::Format("checkpoint carries unknown tensors".into()));
        }
        Ok(())
    }
}

/// Serialize the complete training state.
pub fn save_checkpoint(path: &Path, state: &TrainState, config_hash: &[u8; 32]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    write_u32(&mut out, VERSION);
    out.extend_from_slice(config_hash);
    write_u64(&mut out, state.iteration);
    write_u64(&mut out, state.total_iterations);

    out.extend_from_slice(&state.rng.get_seed());
    write_u64(&mut out, state.rng.get_stream());
    out.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());

    let meta = Meta {
        seg: state.student.cfg.clone(),
        mtn: state.mtn.cfg.clone(),
        lr: state.optimizer.lr,
        momentum: state.optimizer.momentum,
        total_iterations: state.total_iterations,
    };
    let meta_text =
        toml::to_string(&meta).map_err(|e| Error::Format(format!("meta serialization: {e}")))?;
    write_bytes(&mut out, meta_text.as_bytes());

    write_model(&mut out, "student", &state.student);
    write_model(&mut out, "teacher", &state.teacher);
    write_model(&mut out, "mtn", &state.mtn);
    write_model(&mut out, "mtn_ema", &state.mtn_ema);

    let velocity = state.optimizer.velocity();
    write_u32(&mut out, velocity.len() as u32);
    for (i, v) in velocity.iter().enumerate() {
        write_tensor(&mut out, &format!("v{i}"), v);
    }

    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

/// Restore a checkpoint; returns the state and the recorded config hash.
pub fn load_checkpoint(path: &Path) -> Result<(TrainState, [u8; 32])> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    let mut r = Reader { buf: &buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let mut config_hash = [0u8; 32];
    config_hash.copy_from_slice(r.take(32)?);
    let iteration = r.u64()?;
    let total_iterations = r.u64()?;

    let mut seed = [0u8; 32];
    seed.copy_from_slice(r.take(32)?);
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().unwrap());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let meta_text = String::from_utf8(r.bytes()?.to_vec())
        .map_err(|_| Error::Format("bad meta section".into()))?;
    let meta: Meta =
        toml::from_str(&meta_text).map_err(|e| Error::Format(format!("meta parse: {e}")))?;

    let mut student = SegNet::new(meta.seg.clone(), 0);
    let mut teacher = SegNet::new(meta.seg, 0);
    let mut mtn = Mtn::new(meta.mtn.clone(), 0);
    let mut mtn_ema = Mtn::new(meta.mtn, 0);
    r.model_into("student", &mut student)?;
    r.model_into("teacher", &mut teacher)?;
    r.model_into("mtn", &mut mtn)?;
    r.model_into("mtn_ema", &mut mtn_ema)?;

    let mut optimizer = SgdMomentum::new(meta.lr, meta.momentum);
    let vcount = r.u32()? as usize;
    let mut velocity = Vec::with_capacity(vcount);
    for _ in 0..vcount {
        velocity.push(r.tensor()?.1);
    }
    optimizer.set_velocity(velocity);

    Ok((
        TrainState {
            student,
            teacher,
            mtn,
            mtn_ema,
            iteration,
            total_iterations,
            rng,
            optimizer,
        },
        config_hash,
    ))
}
