//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "DQNT" | u32 version | u32 n + n bytes config JSON | u64 step
//! | u32 count + count × (u32 len + len × f32)   parameters, store order
//! | u32 count + count × (u32 len + len × f32)   Adam first moments
//! | u32 count + count × (u32 len + len × f32)   Adam second moments
//! | u32 n + n bytes metrics JSON | u32 CRC32 of everything before it
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{StepMetrics, TrainConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"DQNT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfigEcho {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngState {
    seed: Vec<u8>,
    stream: u64,
    word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MetricsBlock {
    trace: Vec<StepMetrics>,
    rng: RngState,
}

/// Parsed contents of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfigEcho,
    pub step: u64,
    pub params: Vec<Vec<f32>>,
    pub adam_m: Vec<Vec<f32>>,
    pub adam_v: Vec<Vec<f32>>,
    pub trace: Vec<StepMetrics>,
    rng: RngState,
}

fn put_blobs(out: &mut Vec<u8>, blobs: impl ExactSizeIterator<Item = impl AsRef<[f32]>>) {
    out.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for b in blobs {
        let b = b.as_ref();
        out.extend_from_slice(&(b.len() as u32).to_le_bytes());
        for v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(bytes);
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Integrity {
                offset: self.pos,
                detail: format!("file ends inside {what} ({n} bytes needed)"),
            }
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn block(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }

    fn blobs(&mut self, what: &str) -> Result<Vec<Vec<f32>>> {
        let count = self.u32(what)? as usize;
        let mut out = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = self.u32(what)? as usize;
            let bytes = self.take(len.checked_mul(4).unwrap_or(usize::MAX), what)?;
            out.push(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
            );
        }
        Ok(out)
    }

    fn json<T: for<'de> Deserialize<'de>>(&mut self, what: &str) -> Result<T> {
        let start = self.pos;
        let bytes = self.block(what)?;
        serde_json::from_slice(bytes).map_err(|e| Error::Integrity {
            offset: start,
            detail: format!("{what}: {e}"),
        })
    }
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Self {
        Self {
            config: RunConfigEcho {
                model: t.model.config.clone(),
                train: t.config.clone(),
            },
            step: t.step,
            params: t.model.store.iter().map(|p| p.value.data().to_vec()).collect(),
            adam_m: t.adam.m.clone(),
            adam_v: t.adam.v.clone(),
            trace: t.trace.clone(),
            rng: RngState {
                seed: t.rng.get_seed().to_vec(),
                stream: t.rng.get_stream(),
                word_pos: t.rng.get_word_pos().to_string(),
            },
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_block(&mut out, serde_json::to_string(&self.config)?.as_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_blobs(&mut out, self.params.iter());
        put_blobs(&mut out, self.adam_m.iter());
        put_blobs(&mut out, self.adam_v.iter());
        let metrics = MetricsBlock {
            trace: self.trace.clone(),
            rng: self.rng.clone(),
        };
        put_block(&mut out, serde_json::to_string(&metrics)?.as_bytes());
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        if c.take(4, "magic")? != MAGIC {
            return Err(Error::Integrity {
                offset: 0,
                detail: "missing DQNT magic".into(),
            });
        }
        let version = c.u32("version")?;
        if version != VERSION {
            return Err(Error::Version {
                found: version,
                expected: VERSION,
            });
        }
        let config: RunConfigEcho = c.json("config")?;
        let step = c.u64("step")?;
        let params = c.blobs("parameters")?;
        let adam_m = c.blobs("first moments")?;
        let adam_v = c.blobs("second moments")?;
        let metrics: MetricsBlock = c.json("metrics")?;
        let body_end = c.pos;
        let stored = c.u32("checksum")?;
        if c.pos != buf.len() {
            return Err(Error::Integrity {
                offset: c.pos,
                detail: format!("{} trailing bytes", buf.len() - c.pos),
            });
        }
        let actual = crc32fast::hash(&buf[..body_end]);
        if stored != actual {
            return Err(Error::Integrity {
                offset: body_end,
                detail: format!("checksum {stored:08x} does not match contents {actual:08x}"),
            });
        }
        Ok(Self {
            config,
            step,
            params,
            adam_m,
            adam_v,
            trace: metrics.trace,
            rng: metrics.rng,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    fn restore_rng(&self) -> Result<ChaCha8Rng> {
        let seed: [u8; 32] = self
            .rng
            .seed
            .as_slice()
            .try_into()
            .map_err(|_| Error::Integrity {
                offset: 0,
                detail: "generator seed is not 32 bytes".into(),
            })?;
        let word_pos: u128 = self.rng.word_pos.parse().map_err(|_| Error::Integrity {
            offset: 0,
            detail: "generator position is not an integer".into(),
        })?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.rng.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }

    /// Rebuilds the trainer this checkpoint was written from.
    pub fn into_trainer(self) -> Result<Trainer> {
        let mut init = ChaCha8Rng::seed_from_u64(self.config.train.seed);
        let model = Model::new(self.config.model.clone(), &mut init)?;
        let rng = self.restore_rng()?;
        let mut t = Trainer::assemble(model, self.config.train.clone(), rng);
        t.apply_trainable();
        self.apply(&mut t)?;
        Ok(t)
    }

    /// Loads parameters and optimiser state into `t`, which must have been
    /// built with the same model configuration. Nothing is changed on error.
    pub fn apply(self, t: &mut Trainer) -> Result<()> {
        if self.config.model != t.model.config {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint model {} vs current {}",
                serde_json::to_string(&self.config.model)?,
                serde_json::to_string(&t.model.config)?
            )));
        }
        let shapes: Vec<Vec<usize>> = t.model.store.iter().map(|p| p.value.shape().to_vec()).collect();
        let fits = |blobs: &[Vec<f32>]| {
            blobs.len() == shapes.len()
                && blobs.iter().zip(&shapes).all(|(b, s)| b.len() == s.iter().product::<usize>())
        };
        if !fits(&self.params) || !fits(&self.adam_m) || !fits(&self.adam_v) {
            return Err(Error::ConfigMismatch(
                "parameter blobs do not match the model inventory".into(),
            ));
        }
        let rng = self.restore_rng()?;
        for (slot, (blob, shape)) in t.model.store.values_mut().zip(self.params.into_iter().zip(&shapes)) {
            *slot = Tensor::new(shape, blob)?;
        }
        t.config = self.config.train;
        t.adam = crate::autodiff::AdamState::new(t.config.lr, shapes.iter().map(|s| s.iter().product()));
        t.adam.m = self.adam_m;
        t.adam.v = self.adam_v;
        t.adam.step = self.step;
        t.step = self.step;
        t.trace = self.trace;
        t.rng = rng;
        t.apply_trainable();
        Ok(())
    }
}

impl Trainer {
    pub fn save(&self, path: &Path) -> Result<()> {
        Checkpoint::from_trainer(self).write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::read(path)?.into_trainer()
    }
}
