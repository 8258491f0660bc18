//! Autoregressive sequence-to-sequence models and their MLE trainer.

mod checkpoint;
mod optim;
mod rnn;
mod tabular;
mod train;

use serde::{Deserialize, Serialize};

use crate::corpus::{ExamplePair, TokenId, BOS, EOS};
use crate::error::{Error, Result};

pub use checkpoint::{Checkpoint, TrainMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::Adam;
pub use rnn::{ModelDims, RnnModel, RnnState, TensorSpec};
pub use tabular::{TabularModel, TabularState};
pub use train::{
    dev_bleu, gradient_check, gradient_check_objective, mle_loss, train, Objective, TrainConfig,
};

/// Parameter stage; only `Pretrained -> FineTuned -> Improved` is allowed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrained,
    FineTuned,
    Improved,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrained => "pretrained",
            Stage::FineTuned => "fine_tuned",
            Stage::Improved => "improved",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Incremental decoding interface shared by every model.
///
/// `start` consumes the source and the BOS token; each `advance` feeds one
/// more target token. Both return log-probabilities for the next token over
/// the whole vocabulary.
pub trait Seq2Seq: Sync {
    type State: Clone + Send;

    fn vocab_size(&self) -> usize;

    fn start(&self, source: &[TokenId]) -> Result<(Self::State, Vec<f64>)>;

    fn advance(&self, state: &Self::State, token: TokenId) -> (Self::State, Vec<f64>);
}

fn check_ids(vocab_size: usize, ids: &[TokenId], what: &str) -> Result<()> {
    match ids.iter().find(|&&id| id as usize >= vocab_size) {
        Some(id) => Err(Error::VocabMismatch(format!(
            "{what} token id {id} outside a vocabulary of {vocab_size}"
        ))),
        None => Ok(()),
    }
}

/// Log-probabilities of the token following `prefix` (which must start with BOS).
pub fn next_token_logprobs<M: Seq2Seq>(
    model: &M,
    source: &[TokenId],
    prefix: &[TokenId],
) -> Result<Vec<f64>> {
    if prefix.first() != Some(&BOS) {
        return Err(Error::Contract("prefix must begin with BOS".into()));
    }
    check_ids(model.vocab_size(), source, "source")?;
    check_ids(model.vocab_size(), prefix, "prefix")?;
    let (mut state, mut logprobs) = model.start(source)?;
    for &tok in &prefix[1..] {
        (state, logprobs) = model.advance(&state, tok);
    }
    Ok(logprobs)
}

/// Mean teacher-forced negative log-likelihood per target token (EOS
/// included), for any model. Gradients come from [`mle_loss`] for trainable
/// checkpoints.
pub fn mean_nll<M: Seq2Seq>(model: &M, batch: &[ExamplePair]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in batch {
        if ex.target.is_empty() {
            return Err(Error::Contract(format!("example {}: empty target", ex.index)));
        }
        check_ids(model.vocab_size(), ex.source.ids(), "source")?;
        check_ids(model.vocab_size(), ex.target.ids(), "target")?;
        let (mut state, mut logprobs) = model.start(ex.source.ids())?;
        for (j, &tok) in ex.target.ids().iter().chain([&EOS]).enumerate() {
            if j > 0 {
                let prev = ex.target.ids()[j - 1];
                (state, logprobs) = model.advance(&state, prev);
            }
            total -= logprobs[tok as usize];
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub(crate) fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    logits.iter().map(|&l| l - log_z).collect()
}
