//! Binary checkpoint plus JSON sidecar.
//!
//! `checkpoint.bin` (little endian): magic, format version, config hash,
//! epoch, generator state, Adam step, then per parameter its name,
//! trainability, shape, values and both Adam moments as raw `f32`.
//! `checkpoint.json` repeats the scalars and carries the SHA-256 of the
//! binary.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tab_core::optim::{Adam, AdamMoments};
use tab_core::synth::Normalizer;
use tab_core::train::{RngState, Trainer};
use tab_core::Tensor;

use crate::config::RunConfig;
use crate::error::{read, read_json, write_atomic, write_json, CliError, Result};

const MAGIC: &[u8; 8] = b"TABCKPT\0";
const FORMAT: u32 = 1;
/// Largest tensor rank accepted when reading.
const MAX_RANK: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format: u32,
    pub config_hash: String,
    pub model_hash: String,
    pub epoch: usize,
    pub params: usize,
    pub trainable_scalars: usize,
    pub sha256: String,
    pub normalizer: Normalizer,
}

pub fn bin_path(run: &Path) -> PathBuf {
    run.join("checkpoint.bin")
}

pub fn sidecar_path(run: &Path) -> PathBuf {
    run.join("checkpoint.json")
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.u64(b.len() as u64);
        self.0.extend_from_slice(b);
    }
    fn tensor(&mut self, t: &Tensor<f32>) {
        for v in t.data() {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(CliError::format(self.path, "checkpoint is truncated"));
        }
        let (head, tail) = self.buf.split_at(n);
        self.buf = tail;
        Ok(head)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u64()? as usize;
        self.take(n)
    }
    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let raw = self.take(n.checked_mul(4).ok_or_else(|| CliError::format(self.path, "tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(shape, data).map_err(Into::into)
    }
}

fn encode(t: &Trainer<f32>, config_hash: &str) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(FORMAT);
    w.bytes(config_hash.as_bytes());
    w.u64(t.epoch as u64);
    let rng = RngState::capture(&t.rng);
    w.0.extend_from_slice(&rng.seed);
    w.u64(rng.stream);
    w.0.extend_from_slice(&rng.word_pos.to_le_bytes());
    w.u64(t.optim.step);
    w.u64(t.params.len() as u64);
    for ((_, p), m) in t.params.iter().zip(&t.optim.moments) {
        w.bytes(p.name.as_bytes());
        w.0.push(p.trainable as u8);
        w.u32(p.value.shape().len() as u32);
        for &d in p.value.shape() {
            w.u64(d as u64);
        }
        w.tensor(&p.value);
        w.tensor(&m.m);
        w.tensor(&m.v);
    }
    w.0
}

/// Atomically writes `checkpoint.bin` then `checkpoint.json` into `run`.
pub fn save(run: &Path, t: &Trainer<f32>, cfg: &RunConfig, normalizer: &Normalizer) -> Result<Sidecar> {
    let hash = cfg.hash();
    let bytes = encode(t, &hash);
    let sidecar = Sidecar {
        format: FORMAT,
        config_hash: hash,
        model_hash: cfg.model_hash(),
        epoch: t.epoch,
        params: t.params.len(),
        trainable_scalars: t.params.num_trainable(),
        sha256: hex::encode(Sha256::digest(&bytes)),
        normalizer: *normalizer,
    };
    write_atomic(&bin_path(run), &bytes)?;
    write_json(&sidecar_path(run), &sidecar)?;
    Ok(sidecar)
}

/// Loads the checkpoint in `run` into a trainer built from `cfg`. The
/// config must hash to the value recorded at save time, unless
/// `model_only`, in which case only the model section has to match.
pub fn load(run: &Path, cfg: &RunConfig, model_only: bool) -> Result<(Trainer<f32>, Sidecar)> {
    let side_path = sidecar_path(run);
    let sidecar: Sidecar = read_json(&side_path)?;
    let path = bin_path(run);
    let bytes = read(&path)?;
    if hex::encode(Sha256::digest(&bytes)) != sidecar.sha256 {
        return Err(CliError::format(&path, "checksum does not match checkpoint.json"));
    }
    if model_only {
        if sidecar.model_hash != cfg.model_hash() {
            return Err(CliError::Config(format!(
                "{}: model section differs from the one the checkpoint was trained with",
                side_path.display()
            )));
        }
    } else if sidecar.config_hash != cfg.hash() {
        return Err(CliError::Config(format!(
            "{}: config hash {} does not match {}",
            side_path.display(),
            sidecar.config_hash,
            cfg.hash()
        )));
    }

    let mut r = Reader { buf: &bytes, path: &path };
    if r.take(8)? != MAGIC {
        return Err(CliError::format(&path, "not a checkpoint file"));
    }
    let format = r.u32()?;
    if format != FORMAT {
        return Err(CliError::format(&path, format!("checkpoint format {format} is not supported")));
    }
    if r.bytes()? != sidecar.config_hash.as_bytes() {
        return Err(CliError::format(&path, "embedded config hash differs from checkpoint.json"));
    }
    let epoch = r.u64()? as usize;
    let rng = RngState {
        seed: r.take(32)?.try_into().unwrap(),
        stream: r.u64()?,
        word_pos: u128::from_le_bytes(r.take(16)?.try_into().unwrap()),
    };
    let step = r.u64()?;

    let fresh = Trainer::<f32>::new(&cfg.model, &cfg.train)?;
    let mut params = fresh.params.clone();
    let mut optim = Adam::new(&params, fresh.optim.config);
    optim.step = step;
    let count = r.u64()? as usize;
    if count != params.len() {
        return Err(CliError::Config(format!(
            "checkpoint holds {count} parameters but the model has {}",
            params.len()
        )));
    }
    let ids: Vec<_> = params.iter().map(|(id, _)| id).collect();
    for (k, id) in ids.into_iter().enumerate() {
        let name = String::from_utf8_lossy(r.bytes()?).into_owned();
        let trainable = r.take(1)?[0] != 0;
        let rank = r.u32()? as usize;
        if rank > MAX_RANK {
            return Err(CliError::format(&path, format!("parameter `{name}` has rank {rank}")));
        }
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let p = params.get(id);
        if p.name != name || p.value.shape() != shape.as_slice() || p.trainable != trainable {
            return Err(CliError::Config(format!(
                "checkpoint parameter {k} is `{name}` {shape:?}, the model expects `{}` {:?}",
                p.name,
                p.value.shape()
            )));
        }
        params.set_value(id, r.tensor(&shape)?)?;
        optim.moments[k] = AdamMoments {
            m: r.tensor(&shape)?,
            v: r.tensor(&shape)?,
        };
    }
    if !r.buf.is_empty() {
        return Err(CliError::format(&path, "trailing bytes after the last parameter"));
    }
    if epoch != sidecar.epoch {
        return Err(CliError::format(&path, "epoch differs from checkpoint.json"));
    }
    let t = Trainer::restore(&cfg.model, &cfg.train, params, optim, epoch, &rng)?;
    Ok((t, sidecar))
}
