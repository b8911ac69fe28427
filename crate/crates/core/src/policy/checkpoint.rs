use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{AdapterFlags, LowRankDelta, PolicyDims, PolicyError, PolicyParams, TrainableFlags};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatDelta {
    a: Vec<f64>,
    b: Vec<f64>,
}

/// On-disk form of [`PolicyParams`]: row-major number arrays plus flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub version: u32,
    pub dims: PolicyDims,
    pub vocab_hash: String,
    base: Vec<f64>,
    acc: FlatDelta,
    tone: FlatDelta,
    pub active: AdapterFlags,
    pub trainable: TrainableFlags,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<Provenance>,
}

fn flat(m: &Array2<f64>) -> Vec<f64> {
    m.iter().copied().collect()
}

fn shaped(data: Vec<f64>, rows: usize, cols: usize, what: &str) -> Result<Array2<f64>, PolicyError> {
    let len = data.len();
    Array2::from_shape_vec((rows, cols), data)
        .map_err(|_| PolicyError::Checkpoint(format!("{what}: expected {rows}x{cols} values, found {len}")))
}

impl Checkpoint {
    pub fn from_params(params: &PolicyParams, provenance: Option<Provenance>) -> Self {
        let delta = |d: &LowRankDelta| FlatDelta { a: flat(&d.a), b: flat(&d.b) };
        Checkpoint {
            version: CHECKPOINT_VERSION,
            dims: params.dims,
            vocab_hash: params.vocab_hash.clone(),
            base: flat(&params.base),
            acc: delta(&params.acc),
            tone: delta(&params.tone),
            active: params.active,
            trainable: params.trainable,
            provenance,
        }
    }

    pub fn into_params(self) -> Result<PolicyParams, PolicyError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(PolicyError::Checkpoint(format!(
                "unsupported version {} (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let d = self.dims;
        let delta = |f: FlatDelta, name: &str| -> Result<LowRankDelta, PolicyError> {
            Ok(LowRankDelta {
                a: shaped(f.a, d.vocab_size, d.rank, &format!("{name}.a"))?,
                b: shaped(f.b, d.rank, d.ctx_dim, &format!("{name}.b"))?,
            })
        };
        Ok(PolicyParams {
            dims: d,
            vocab_hash: self.vocab_hash,
            base: shaped(self.base, d.vocab_size, d.ctx_dim, "base")?,
            acc: delta(self.acc, "acc")?,
            tone: delta(self.tone, "tone")?,
            active: self.active,
            trainable: self.trainable,
        })
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &PolicyParams,
    provenance: Option<Provenance>,
) -> Result<(), PolicyError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &Checkpoint::from_params(params, provenance))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(PolicyParams, Option<Provenance>), PolicyError> {
    let ckpt: Checkpoint = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    let provenance = ckpt.provenance.clone();
    Ok((ckpt.into_params()?, provenance))
}
