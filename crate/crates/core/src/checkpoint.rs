//! Trained model container and its file format: one JSON header line
//! followed by the parameter tensors as little-endian f64.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::nn::ParamStore;
use crate::pipeline::TrainConfig;
use crate::preprocess::{normalize, NormStats};
use crate::types::{PredictionSet, TrajectorySample};

pub const FORMAT: &str = "gsgformer-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub stats: NormStats,
    pub store: ParamStore,
    pub model: Model,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    stats: NormStats,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(config: TrainConfig, stats: NormStats, store: ParamStore, model: Model) -> Self {
        Checkpoint { config, stats, store, model }
    }

    /// Untrained model with the given configuration; handy for tests.
    pub fn initialized(config: TrainConfig, stats: NormStats) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let model = Model::new(&mut store, config.model, &mut rng);
        Checkpoint { config, stats, store, model }
    }

    /// `k` futures for `sample`, normalizing it first when needed.
    pub fn predict(&self, sample: &TrajectorySample, k: usize, rng: &mut impl Rng) -> Result<PredictionSet> {
        if sample.normalized {
            self.model.predict(&self.store, sample, k, &self.stats, rng)
        } else {
            self.model.predict(&self.store, &normalize(sample, &self.stats), k, &self.stats, rng)
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            stats: self.stats,
            config: self.config,
            tensors: self
                .store
                .iter()
                .map(|(name, t)| TensorEntry { name: name.to_string(), rows: t.rows(), cols: t.cols() })
                .collect(),
        };
        let mut buf = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        buf.push(b'\n');
        for (_, t) in self.store.iter() {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(f);
        let mut line = String::new();
        reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        let header: Header =
            serde_json::from_str(line.trim_end()).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Checkpoint(format!("not a checkpoint (format '{}')", header.format)));
        }
        if header.version > VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", header.version)));
        }
        let mut blob = Vec::new();
        reader.read_to_end(&mut blob).map_err(|e| Error::io(path, e))?;
        let mut ckpt = Checkpoint::initialized(header.config, header.stats);
        if header.tensors.len() != ckpt.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                header.tensors.len(),
                ckpt.store.len()
            )));
        }
        let mut offset = 0;
        for entry in &header.tensors {
            let id = ckpt.store.id(&entry.name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor '{}'", entry.name)))?;
            let t = ckpt.store.get_mut(id);
            if t.shape() != (entry.rows, entry.cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor '{}' is {}x{}, model expects {:?}",
                    entry.name, entry.rows, entry.cols, t.shape()
                )));
            }
            let bytes = entry.rows * entry.cols * 8;
            let chunk = blob.get(offset..offset + bytes).ok_or_else(|| Error::Checkpoint("truncated tensor data".into()))?;
            for (dst, src) in t.data_mut().iter_mut().zip(chunk.chunks_exact(8)) {
                *dst = f64::from_le_bytes(src.try_into().expect("8 bytes"));
            }
            offset += bytes;
        }
        if offset != blob.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", blob.len() - offset)));
        }
        Ok(ckpt)
    }
}
