use std::collections::HashMap;
use std::sync::Arc;

use super::Seq2Seq;
use crate::corpus::{TokenId, BOS};
use crate::error::{Error, Result};

/// Explicit next-token distributions keyed by `(source, prefix)`, where the
/// prefix starts with BOS. Lookups that miss fall back to `default`.
#[derive(Debug, Clone)]
pub struct TabularModel {
    vocab_size: usize,
    table: HashMap<(Vec<TokenId>, Vec<TokenId>), Vec<f64>>,
    default: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TabularState {
    source: Arc<Vec<TokenId>>,
    prefix: Vec<TokenId>,
}

fn check_distribution(probs: &[f64], vocab_size: usize) -> Result<()> {
    if probs.len() != vocab_size {
        return Err(Error::Contract(format!(
            "distribution has {} entries for a vocabulary of {vocab_size}",
            probs.len()
        )));
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Contract(format!(
            "not a probability distribution (sum {sum})"
        )));
    }
    Ok(())
}

impl TabularModel {
    pub fn new(default: Vec<f64>) -> Result<Self> {
        let vocab_size = default.len();
        check_distribution(&default, vocab_size)?;
        Ok(TabularModel {
            vocab_size,
            table: HashMap::new(),
            default,
        })
    }

    pub fn uniform(vocab_size: usize) -> Self {
        TabularModel {
            vocab_size,
            table: HashMap::new(),
            default: vec![1.0 / vocab_size as f64; vocab_size],
        }
    }

    pub fn insert(&mut self, source: &[TokenId], prefix: &[TokenId], probs: Vec<f64>) -> Result<()> {
        check_distribution(&probs, self.vocab_size)?;
        if prefix.first() != Some(&BOS) {
            return Err(Error::Contract("prefix must begin with BOS".into()));
        }
        self.table.insert((source.to_vec(), prefix.to_vec()), probs);
        Ok(())
    }

    pub fn probs(&self, source: &[TokenId], prefix: &[TokenId]) -> &[f64] {
        self.table
            .get(&(source.to_vec(), prefix.to_vec()))
            .unwrap_or(&self.default)
    }

    fn logprobs(&self, source: &[TokenId], prefix: &[TokenId]) -> Vec<f64> {
        self.probs(source, prefix).iter().map(|p| p.ln()).collect()
    }
}

impl Seq2Seq for TabularModel {
    type State = TabularState;

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn start(&self, source: &[TokenId]) -> Result<(TabularState, Vec<f64>)> {
        let state = TabularState {
            source: Arc::new(source.to_vec()),
            prefix: vec![BOS],
        };
        let lp = self.logprobs(&state.source, &state.prefix);
        Ok((state, lp))
    }

    fn advance(&self, state: &TabularState, token: TokenId) -> (TabularState, Vec<f64>) {
        let mut prefix = state.prefix.clone();
        prefix.push(token);
        let next = TabularState {
            source: Arc::clone(&state.source),
            prefix,
        };
        let lp = self.logprobs(&next.source, &next.prefix);
        (next, lp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ExamplePair, TokenSequence};
    use crate::model::{mean_nll, next_token_logprobs};

    #[test]
    fn lookup_returns_stored_logs() {
        let mut m = TabularModel::uniform(5);
        let probs = vec![0.0, 0.0, 0.25, 0.0, 0.75];
        m.insert(&[4], &[BOS], probs.clone()).unwrap();
        let lp = next_token_logprobs(&m, &[4], &[BOS]).unwrap();
        let expected: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        assert_eq!(lp, expected);
        // different source falls back to the default
        let lp = next_token_logprobs(&m, &[3], &[BOS]).unwrap();
        assert_eq!(lp, vec![(0.2f64).ln(); 5]);
    }

    #[test]
    fn rejects_bad_distributions() {
        let mut m = TabularModel::uniform(3);
        assert!(m.insert(&[], &[BOS], vec![0.5, 0.6, 0.0]).is_err());
        assert!(m.insert(&[], &[BOS], vec![0.5, 0.5]).is_err());
        assert!(m.insert(&[], &[2], vec![1.0, 0.0, 0.0]).is_err());
        assert!(TabularModel::new(vec![-0.5, 1.5]).is_err());
    }

    #[test]
    fn prefix_must_start_with_bos() {
        let m = TabularModel::uniform(5);
        assert!(next_token_logprobs(&m, &[], &[4]).is_err());
        assert!(matches!(
            next_token_logprobs(&m, &[9], &[BOS]),
            Err(Error::VocabMismatch(_))
        ));
    }

    #[test]
    fn certain_target_has_zero_loss() {
        let mut m = TabularModel::uniform(5);
        m.insert(&[4], &[BOS], vec![0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        m.insert(&[4], &[BOS, 4], vec![0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
        let pair = ExamplePair {
            index: 0,
            source: TokenSequence(vec![4]),
            target: TokenSequence(vec![4]),
        };
        assert_eq!(mean_nll(&m, &[pair]).unwrap(), 0.0);
    }

    #[test]
    fn uniform_loss_is_log_vocab() {
        let m = TabularModel::uniform(8);
        let pair = ExamplePair {
            index: 0,
            source: TokenSequence(vec![5, 6]),
            target: TokenSequence(vec![4, 7, 5]),
        };
        let loss = mean_nll(&m, &[pair]).unwrap();
        assert!((loss - 8f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_target_names_example() {
        let m = TabularModel::uniform(8);
        let pair = ExamplePair {
            index: 3,
            source: TokenSequence(vec![5]),
            target: TokenSequence(vec![]),
        };
        let err = mean_nll(&m, &[pair]).unwrap_err();
        assert!(err.to_string().contains("example 3"), "{err}");
    }
}
