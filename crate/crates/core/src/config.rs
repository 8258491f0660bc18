//! Flat `key = value` run configuration.
//!
//! Lines starting with `#` are comments. Unknown and repeated keys are
//! errors. [`RunConfig::to_text`] prints every key, defaults included, and
//! parses back to the same value.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::corpus::synth::{synth_generate, SynthConfig};
use crate::corpus::{build_vocab, encode_pairs, Dataset, Split, Task, Vocab};
use crate::decode::DEFAULT_MAX_LEN;
use crate::error::{Error, Result};
use crate::metrics::CodeBleuConfig;
use crate::model::TrainConfig;
use crate::selfimprove::{PipelineConfig, PseudoGenConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub task: Task,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub synth_max_stmts: usize,
    pub synth_max_expr_depth: usize,
    pub synth_identifier_pool: usize,
    pub vocab_max_size: usize,
    pub hidden: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_clip: f64,
    pub early_stop_patience: usize,
    pub max_len: usize,
    pub improve_lr: Option<f64>,
    pub unsafe_lr: bool,
    pub pseudo_beam: usize,
    pub eval_beams: Vec<usize>,
    pub workers: usize,
    pub codebleu_weights: [f64; 4],
    pub kw_weight: f64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let train = TrainConfig::default();
        let cb = CodeBleuConfig::default();
        RunConfig {
            seed: 0,
            task: Task::Summarization,
            train_size: 500,
            dev_size: 50,
            test_size: 100,
            synth_max_stmts: synth.max_stmts,
            synth_max_expr_depth: synth.max_expr_depth,
            synth_identifier_pool: synth.identifier_pool_size,
            vocab_max_size: 200,
            hidden: 32,
            learning_rate: train.learning_rate,
            epochs: train.epochs,
            batch_size: train.batch_size,
            grad_clip: train.grad_clip,
            early_stop_patience: train.early_stop_patience,
            max_len: DEFAULT_MAX_LEN,
            improve_lr: None,
            unsafe_lr: false,
            pseudo_beam: 10,
            eval_beams: vec![1, 5, 10],
            workers: 1,
            codebleu_weights: cb.weights,
            kw_weight: cb.kw_weight,
            out_dir: PathBuf::from("runs/toy"),
        }
    }
}

/// Seed for a named component, derived from the run seed.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|v| parse_value(key, v.trim()))
        .collect()
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: [&'static str; 24] = [
        "seed",
        "task",
        "train_size",
        "dev_size",
        "test_size",
        "synth_max_stmts",
        "synth_max_expr_depth",
        "synth_identifier_pool",
        "vocab_max_size",
        "hidden",
        "learning_rate",
        "epochs",
        "batch_size",
        "grad_clip",
        "early_stop_patience",
        "max_len",
        "improve_lr",
        "unsafe_lr",
        "pseudo_beam",
        "eval_beams",
        "workers",
        "codebleu_weights",
        "kw_weight",
        "out_dir",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "task" => self.task = value.parse()?,
            "train_size" => self.train_size = parse_value(key, value)?,
            "dev_size" => self.dev_size = parse_value(key, value)?,
            "test_size" => self.test_size = parse_value(key, value)?,
            "synth_max_stmts" => self.synth_max_stmts = parse_value(key, value)?,
            "synth_max_expr_depth" => self.synth_max_expr_depth = parse_value(key, value)?,
            "synth_identifier_pool" => self.synth_identifier_pool = parse_value(key, value)?,
            "vocab_max_size" => self.vocab_max_size = parse_value(key, value)?,
            "hidden" => self.hidden = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "grad_clip" => self.grad_clip = parse_value(key, value)?,
            "early_stop_patience" => self.early_stop_patience = parse_value(key, value)?,
            "max_len" => self.max_len = parse_value(key, value)?,
            "improve_lr" => {
                self.improve_lr = match value {
                    "none" => None,
                    v => Some(parse_value(key, v)?),
                }
            }
            "unsafe_lr" => self.unsafe_lr = parse_value(key, value)?,
            "pseudo_beam" => self.pseudo_beam = parse_value(key, value)?,
            "eval_beams" => self.eval_beams = parse_list(key, value)?,
            "workers" => self.workers = parse_value(key, value)?,
            "codebleu_weights" => {
                let w: Vec<f64> = parse_list(key, value)?;
                self.codebleu_weights = w
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected 4 weights")))?;
            }
            "kw_weight" => self.kw_weight = parse_value(key, value)?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: {key} set twice", n + 1)));
            }
            cfg.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("seed", self.seed.to_string());
        put("task", self.task.to_string());
        put("train_size", self.train_size.to_string());
        put("dev_size", self.dev_size.to_string());
        put("test_size", self.test_size.to_string());
        put("synth_max_stmts", self.synth_max_stmts.to_string());
        put("synth_max_expr_depth", self.synth_max_expr_depth.to_string());
        put("synth_identifier_pool", self.synth_identifier_pool.to_string());
        put("vocab_max_size", self.vocab_max_size.to_string());
        put("hidden", self.hidden.to_string());
        put("learning_rate", self.learning_rate.to_string());
        put("epochs", self.epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("grad_clip", self.grad_clip.to_string());
        put("early_stop_patience", self.early_stop_patience.to_string());
        put("max_len", self.max_len.to_string());
        put(
            "improve_lr",
            self.improve_lr.map_or("none".into(), |v| v.to_string()),
        );
        put("unsafe_lr", self.unsafe_lr.to_string());
        put("pseudo_beam", self.pseudo_beam.to_string());
        put("eval_beams", join(&self.eval_beams));
        put("workers", self.workers.to_string());
        put("codebleu_weights", join(&self.codebleu_weights));
        put("kw_weight", self.kw_weight.to_string());
        put("out_dir", self.out_dir.display().to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_config(Split::Train).validate()?;
        self.train_config().validate()?;
        self.pseudo_config().validate()?;
        if self.train_size == 0 || self.dev_size == 0 || self.test_size == 0 {
            return Err(Error::Config("split sizes must be >= 1".into()));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden must be >= 1".into()));
        }
        if self.eval_beams.is_empty() || self.eval_beams.contains(&0) {
            return Err(Error::Config("eval_beams must be beam sizes >= 1".into()));
        }
        Ok(())
    }

    /// Each split has its own corpus seed so the splits never share a stream.
    pub fn synth_config(&self, split: Split) -> SynthConfig {
        let count = match split {
            Split::Train => self.train_size,
            Split::Dev => self.dev_size,
            Split::Test => self.test_size,
        };
        SynthConfig {
            seed: sub_seed(self.seed, &format!("corpus.{split}")),
            count,
            max_stmts: self.synth_max_stmts,
            max_expr_depth: self.synth_max_expr_depth,
            identifier_pool_size: self.synth_identifier_pool,
        }
    }

    pub fn init_seed(&self) -> u64 {
        sub_seed(self.seed, "init")
    }

    pub fn shuffle_seed(&self) -> u64 {
        sub_seed(self.seed, "shuffle")
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.shuffle_seed(),
            grad_clip: self.grad_clip,
            early_stop_patience: self.early_stop_patience,
            max_decode_len: self.max_len,
            improve_lr: self.improve_lr,
            unsafe_lr: self.unsafe_lr,
        }
    }

    pub fn codebleu_config(&self) -> CodeBleuConfig {
        CodeBleuConfig {
            weights: self.codebleu_weights,
            kw_weight: self.kw_weight,
        }
    }

    pub fn pseudo_config(&self) -> PseudoGenConfig {
        PseudoGenConfig {
            beam_size: self.pseudo_beam,
            max_len: self.max_len,
            task: self.task,
            workers: self.workers,
            codebleu: self.codebleu_config(),
        }
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            hidden: self.hidden,
            init_seed: self.init_seed(),
            train: self.train_config(),
            pseudo: self.pseudo_config(),
            eval_beams: self.eval_beams.clone(),
            config_text: self.to_text(),
        }
    }

    /// Synthetic train/dev/test sets and a vocabulary built from train.
    pub fn synthetic_data(&self) -> Result<SyntheticData> {
        let raw = |split| synth_generate(&self.synth_config(split), self.task);
        let (train, dev, test) = (raw(Split::Train)?, raw(Split::Dev)?, raw(Split::Test)?);
        let tokens: Vec<Vec<String>> = train.iter().map(|p| p.tokens()).collect();
        let vocab = build_vocab(tokens.iter().map(Vec::as_slice), self.vocab_max_size)?;
        Ok(SyntheticData {
            train: encode_pairs(&train, &vocab, Split::Train, self.task),
            dev: encode_pairs(&dev, &vocab, Split::Dev, self.task),
            test: encode_pairs(&test, &vocab, Split::Test, self.task),
            vocab,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub vocab: Vocab,
    pub train: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
}
