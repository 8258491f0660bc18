//! Smoothed sentence BLEU-4, exact match, CodeBLEU, and corpus evaluation.
//!
//! Smoothing follows the CodeXGLUE evaluation scripts: unigram precision is
//! unsmoothed, orders 2..=4 add one to both matches and candidate counts.
//! Corpus BLEU is the mean of sentence scores, not a pooled-count BLEU.

use std::collections::HashMap;
use std::hash::Hash;

use serde::Serialize;

use crate::corpus::{Dataset, Task, TokenId, TokenSequence, Vocab};
use crate::error::{Error, Result};
use crate::minilang::{self, DataflowEdge, Token, KEYWORDS};

const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BleuScore {
    pub value: f64,
    pub precisions: [f64; MAX_ORDER],
    /// `min(1, exp(1 - r/c))`; 0 for an empty candidate.
    pub brevity_penalty: f64,
}

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for gram in seq.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// BLEU-4 where every n-gram's counts are scaled by `weight(ngram)`.
///
/// Reference n-grams with weight above 1 that the candidate fails to match add
/// `(weight - 1)` per missing occurrence to the precision denominator, so a
/// dropped keyword costs more than a dropped ordinary token.
fn weighted_bleu<T, W>(candidate: &[T], reference: &[T], weight: W) -> Result<BleuScore>
where
    T: Eq + Hash,
    W: Fn(&[T]) -> f64,
{
    if reference.is_empty() {
        return Err(Error::Contract("BLEU is undefined for an empty reference".into()));
    }
    if candidate.is_empty() {
        return Ok(BleuScore {
            value: 0.0,
            precisions: [0.0; MAX_ORDER],
            brevity_penalty: 0.0,
        });
    }
    let mut precisions = [0.0; MAX_ORDER];
    for (i, p) in precisions.iter_mut().enumerate() {
        let n = i + 1;
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let mut matched = 0.0;
        let mut total = 0.0;
        // sort so the float sums do not depend on hash order
        let mut grams: Vec<_> = cand.into_iter().collect();
        grams.sort_by_key(|(g, _)| candidate_position(candidate, g));
        for &(gram, count) in &grams {
            let w = weight(gram);
            total += w * count as f64;
            matched += w * count.min(refc.get(gram).copied().unwrap_or(0)) as f64;
        }
        // Up-weighted reference n-grams the candidate misses are charged their
        // extra weight; with unit weights this term vanishes.
        let cand_counts: HashMap<&[T], usize> = grams.into_iter().collect();
        let mut missing: Vec<_> = refc.into_iter().collect();
        missing.sort_by_key(|(g, _)| candidate_position(reference, g));
        for (gram, count) in missing {
            let extra = weight(gram) - 1.0;
            let have = cand_counts.get(gram).copied().unwrap_or(0);
            if extra > 0.0 && count > have {
                total += extra * (count - have) as f64;
            }
        }
        *p = if n == 1 {
            matched / total
        } else {
            (matched + 1.0) / (total + 1.0)
        };
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let brevity_penalty = (1.0 - r / c).exp().min(1.0);
    let value = if precisions[0] == 0.0 {
        0.0
    } else {
        let log_mean: f64 = precisions.iter().map(|p| 0.25 * p.ln()).sum();
        brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        value,
        precisions,
        brevity_penalty,
    })
}

fn candidate_position<T: Eq>(seq: &[T], gram: &[T]) -> usize {
    seq.windows(gram.len())
        .position(|w| w == gram)
        .unwrap_or(usize::MAX)
}

pub fn smoothed_sentence_bleu<T: Eq + Hash>(candidate: &[T], reference: &[T]) -> Result<BleuScore> {
    weighted_bleu(candidate, reference, |_| 1.0)
}

/// Smoothed BLEU-4 value where n-grams containing a keyword count `kw_weight` times.
pub fn weighted_ngram_match<T, K>(
    candidate: &[T],
    reference: &[T],
    is_keyword: K,
    kw_weight: f64,
) -> Result<f64>
where
    T: Eq + Hash,
    K: Fn(&T) -> bool,
{
    if !(kw_weight >= 1.0) {
        return Err(Error::Config(format!("kw_weight must be >= 1, got {kw_weight}")));
    }
    let score = weighted_bleu(candidate, reference, |gram| {
        if gram.iter().any(&is_keyword) {
            kw_weight
        } else {
            1.0
        }
    })?;
    Ok(score.value)
}

pub fn exact_match<T: PartialEq>(candidate: &[T], reference: &[T]) -> bool {
    candidate == reference
}

/// AST subtree match; `None` when the reference does not parse (component
/// excluded), `Some(0.0)` when only the candidate fails.
pub fn ast_match(candidate_src: &str, reference_src: &str) -> Option<f64> {
    let (_, reference) = minilang::parse_source(reference_src).ok()?;
    let Ok((_, candidate)) = minilang::parse_source(candidate_src) else {
        return Some(0.0);
    };
    let ref_bag = minilang::subtrees(&reference);
    let cand_bag = minilang::subtrees(&candidate);
    let total: usize = ref_bag.values().sum();
    let common: usize = ref_bag
        .iter()
        .map(|(k, &n)| n.min(cand_bag.get(k).copied().unwrap_or(0)))
        .sum();
    Some(common as f64 / total as f64)
}

/// `(variable, def ordinal, use ordinal)`, ordinals counting prior
/// occurrences of the same variable in the token stream.
fn normalized_edges(edges: &[DataflowEdge], tokens: &[Token]) -> HashMap<(String, usize, usize), usize> {
    let ordinal = |pos: usize, var: &str| tokens[..pos].iter().filter(|t| t.text == var).count();
    let mut out = HashMap::new();
    for e in edges {
        let key = (
            e.variable.clone(),
            ordinal(e.def_position, &e.variable),
            ordinal(e.use_position, &e.variable),
        );
        *out.entry(key).or_insert(0) += 1;
    }
    out
}

/// Dataflow match; `None` when the reference does not parse or has no
/// def-use edges, `Some(0.0)` when only the candidate fails to parse.
pub fn dataflow_match(candidate_src: &str, reference_src: &str) -> Option<f64> {
    let (ref_tokens, reference) = minilang::parse_source(reference_src).ok()?;
    let ref_edges = minilang::dataflow_edges(&reference, &ref_tokens);
    if ref_edges.is_empty() {
        return None;
    }
    let Ok((cand_tokens, candidate)) = minilang::parse_source(candidate_src) else {
        return Some(0.0);
    };
    let cand_edges = minilang::dataflow_edges(&candidate, &cand_tokens);
    let ref_norm = normalized_edges(&ref_edges, &ref_tokens);
    let cand_norm = normalized_edges(&cand_edges, &cand_tokens);
    let matched: usize = ref_norm
        .iter()
        .map(|(k, &n)| n.min(cand_norm.get(k).copied().unwrap_or(0)))
        .sum();
    Some(matched as f64 / ref_edges.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CodeBleuConfig {
    /// Weights of (ngram, weighted ngram, AST match, dataflow match).
    pub weights: [f64; 4],
    pub kw_weight: f64,
}

impl Default for CodeBleuConfig {
    fn default() -> Self {
        CodeBleuConfig {
            weights: [0.25; 4],
            kw_weight: 4.0,
        }
    }
}

impl CodeBleuConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "CodeBLEU weights must be non-negative and sum to 1, got {:?}",
                self.weights
            )));
        }
        if !(self.kw_weight >= 1.0) {
            return Err(Error::Config(format!(
                "kw_weight must be >= 1, got {}",
                self.kw_weight
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CodeBleuScore {
    pub value: f64,
    pub ngram: f64,
    pub weighted_ngram: f64,
    pub ast_match: Option<f64>,
    pub dataflow_match: Option<f64>,
    /// Effective weights after excluded components were dropped and the rest
    /// renormalized; `value` is exactly their dot product with the components.
    pub weights: [f64; 4],
}

pub fn codebleu(candidate_src: &str, reference_src: &str, cfg: &CodeBleuConfig) -> Result<CodeBleuScore> {
    cfg.validate()?;
    let cand: Vec<&str> = candidate_src.split_whitespace().collect();
    let refr: Vec<&str> = reference_src.split_whitespace().collect();
    let ngram = smoothed_sentence_bleu(&cand, &refr)?.value;
    let weighted_ngram = weighted_ngram_match(&cand, &refr, |t| KEYWORDS.contains(t), cfg.kw_weight)?;
    let ast = ast_match(candidate_src, reference_src);
    let dataflow = dataflow_match(candidate_src, reference_src);

    let components = [Some(ngram), Some(weighted_ngram), ast, dataflow];
    let kept: f64 = cfg
        .weights
        .iter()
        .zip(&components)
        .filter(|(_, c)| c.is_some())
        .map(|(w, _)| w)
        .sum();
    let mut weights = [0.0; 4];
    let mut value = 0.0;
    if kept > 0.0 {
        for (i, c) in components.iter().enumerate() {
            if let Some(c) = c {
                weights[i] = cfg.weights[i] / kept;
                value += weights[i] * c;
            }
        }
    }
    Ok(CodeBleuScore {
        value,
        ngram,
        weighted_ngram,
        ast_match: ast,
        dataflow_match: dataflow,
        weights,
    })
}

/// The closeness function used to pick pseudo targets: smoothed BLEU for
/// summarization, CodeBLEU for generation.
#[derive(Debug, Clone)]
pub struct Similarity {
    task: Task,
    vocab: Vocab,
    codebleu: CodeBleuConfig,
}

impl Similarity {
    pub fn task(&self) -> Task {
        self.task
    }

    pub fn score(&self, candidate: &[TokenId], reference: &[TokenId]) -> Result<f64> {
        match self.task {
            Task::Summarization => Ok(smoothed_sentence_bleu(candidate, reference)?.value),
            Task::Generation => {
                let cand = self.vocab.decode_text(candidate);
                let refr = self.vocab.decode_text(reference);
                Ok(codebleu(&cand, &refr, &self.codebleu)?.value)
            }
        }
    }
}

pub fn similarity(task: Task, vocab: &Vocab, codebleu: CodeBleuConfig) -> Result<Similarity> {
    codebleu.validate()?;
    Ok(Similarity {
        task,
        vocab: vocab.clone(),
        codebleu,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SentenceScore {
    pub index: usize,
    pub bleu: f64,
    pub exact_match: bool,
    pub codebleu: Option<CodeBleuScore>,
}

/// Means of the CodeBLEU parts; `value` on the ×100 scale like BLEU.
/// AST and dataflow means run over the sentences where they were not excluded.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CodeBleuAggregate {
    pub value: f64,
    pub ngram: f64,
    pub weighted_ngram: f64,
    pub ast_match: Option<f64>,
    pub dataflow_match: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    /// Mean sentence BLEU ×100.
    pub corpus_bleu: f64,
    pub exact_match_rate: f64,
    pub corpus_codebleu: Option<CodeBleuAggregate>,
    pub per_sentence: Vec<SentenceScore>,
}

impl MetricReport {
    pub fn to_json(&self) -> serde_json::Value {
        let components = match &self.corpus_codebleu {
            Some(c) => serde_json::json!({
                "ngram": c.ngram,
                "weighted_ngram": c.weighted_ngram,
                "ast_match": c.ast_match,
                "dataflow_match": c.dataflow_match,
            }),
            None => serde_json::json!({}),
        };
        serde_json::json!({
            "bleu": self.corpus_bleu,
            "em": self.exact_match_rate,
            "codebleu": self.corpus_codebleu.map(|c| c.value),
            "components": components,
        })
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Scores predictions against a dataset's targets. A trailing EOS on a
/// prediction is ignored.
pub fn evaluate(
    predictions: &[TokenSequence],
    dataset: &Dataset,
    vocab: &Vocab,
    cfg: &CodeBleuConfig,
) -> Result<MetricReport> {
    if predictions.len() != dataset.len() {
        return Err(Error::Contract(format!(
            "{} predictions for {} references",
            predictions.len(),
            dataset.len()
        )));
    }
    let mut per_sentence = Vec::with_capacity(predictions.len());
    for (pred, ex) in predictions.iter().zip(&dataset.examples) {
        let cand = pred.without_eos();
        let reference = ex.target.ids();
        let bleu = smoothed_sentence_bleu(cand, reference)
            .map_err(|e| Error::Data(format!("example {}: {e}", ex.index)))?
            .value;
        let codebleu = match dataset.task {
            Task::Generation => Some(codebleu(
                &vocab.decode_text(cand),
                &vocab.decode_text(reference),
                cfg,
            )?),
            Task::Summarization => None,
        };
        per_sentence.push(SentenceScore {
            index: ex.index,
            bleu,
            exact_match: exact_match(cand, reference),
            codebleu,
        });
    }
    let n = per_sentence.len().max(1) as f64;
    let corpus_bleu = 100.0 * per_sentence.iter().map(|s| s.bleu).sum::<f64>() / n;
    let exact_match_rate = per_sentence.iter().filter(|s| s.exact_match).count() as f64 / n;
    let corpus_codebleu = (dataset.task == Task::Generation).then(|| {
        let scores: Vec<&CodeBleuScore> = per_sentence.iter().filter_map(|s| s.codebleu.as_ref()).collect();
        CodeBleuAggregate {
            value: 100.0 * mean(scores.iter().map(|c| c.value)).unwrap_or(0.0),
            ngram: mean(scores.iter().map(|c| c.ngram)).unwrap_or(0.0),
            weighted_ngram: mean(scores.iter().map(|c| c.weighted_ngram)).unwrap_or(0.0),
            ast_match: mean(scores.iter().filter_map(|c| c.ast_match)),
            dataflow_match: mean(scores.iter().filter_map(|c| c.dataflow_match)),
        }
    });
    Ok(MetricReport {
        corpus_bleu,
        exact_match_rate,
        corpus_codebleu,
        per_sentence,
    })
}
