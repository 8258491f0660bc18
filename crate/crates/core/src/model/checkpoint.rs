//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "SQIMCKPT"
//! offset 8   u32       format version (1)
//! offset 12  u64       header length H in bytes
//! offset 20  H bytes   UTF-8 JSON header: version, stage, vocab_digest,
//!                      dims, manifest [{name, shape}], train_meta
//! offset 20+H          N little-endian f64 parameters, N = Σ Π shape
//! ```
//!
//! Tensors are stored row-major, back to back, in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::rnn::{ModelDims, RnnModel, RnnState, TensorSpec};
use super::{Seq2Seq, Stage};
use crate::corpus::{TokenId, Vocab};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SQIMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    /// Optimizer steps taken.
    pub steps: usize,
    /// Learning rate actually used.
    pub learning_rate: f64,
    pub seed: u64,
    pub epochs_run: usize,
    /// Epoch whose parameters were kept; 0 means the starting parameters.
    pub best_epoch: usize,
    pub best_dev_bleu: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub model: RnnModel,
    pub vocab_digest: String,
    pub train_meta: Option<TrainMeta>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    stage: Stage,
    vocab_digest: String,
    dims: ModelDims,
    manifest: Vec<TensorSpec>,
    train_meta: Option<TrainMeta>,
}

impl Checkpoint {
    /// Seeded random parameters sized for `vocab`, at stage `pretrained`.
    pub fn init(vocab: &Vocab, hidden: usize, seed: u64) -> Result<Self> {
        let dims = ModelDims {
            vocab: vocab.len(),
            hidden,
        };
        Ok(Checkpoint {
            stage: Stage::Pretrained,
            model: RnnModel::init(dims, seed)?,
            vocab_digest: vocab.digest(),
            train_meta: None,
        })
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        let digest = vocab.digest();
        if digest != self.vocab_digest {
            return Err(Error::VocabMismatch(format!(
                "checkpoint was built for vocabulary {}, got {}",
                self.vocab_digest, digest
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.model.dims();
        let header = Header {
            version: CHECKPOINT_VERSION,
            stage: self.stage,
            vocab_digest: self.vocab_digest.clone(),
            dims,
            manifest: RnnModel::manifest(dims),
            train_meta: self.train_meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let params = self.model.params();
        let mut out = Vec::with_capacity(20 + json.len() + 8 * params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Data(format!("checkpoint: {msg}"));
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes
            .get(20..20usize.saturating_add(header_len))
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
        if header.manifest != RnnModel::manifest(header.dims) {
            return Err(bad("manifest does not match dims"));
        }
        let expected: usize = header
            .manifest
            .iter()
            .map(|t| t.shape.iter().product::<usize>())
            .sum();
        let raw = &bytes[20 + header_len..];
        if raw.len() != expected * 8 {
            return Err(bad(&format!(
                "expected {} parameter bytes, found {}",
                expected * 8,
                raw.len()
            )));
        }
        let params = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Checkpoint {
            stage: header.stage,
            model: RnnModel::from_params(header.dims, params)?,
            vocab_digest: header.vocab_digest,
            train_meta: header.train_meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

impl Seq2Seq for Checkpoint {
    type State = RnnState;

    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn start(&self, source: &[TokenId]) -> Result<(RnnState, Vec<f64>)> {
        self.model.start(source)
    }

    fn advance(&self, state: &RnnState, token: TokenId) -> (RnnState, Vec<f64>) {
        self.model.advance(state, token)
    }
}
