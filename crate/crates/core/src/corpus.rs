//! Paired datasets, vocabulary, and JSONL persistence.

pub mod synth;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use synth::{summarize, synth_generate, synth_program, SynthConfig};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

pub const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token ids of one side of a pair (or of a decoded hypothesis).
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>) -> Self {
        TokenSequence(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The sequence without a trailing EOS, if it has one.
    pub fn without_eos(&self) -> &[TokenId] {
        match self.0.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.0,
        }
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(ids: Vec<TokenId>) -> Self {
        TokenSequence(ids)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExamplePair {
    pub index: usize,
    pub source: TokenSequence,
    pub target: TokenSequence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Summarization,
    Generation,
}

/// Whether targets are the original references or model-selected pseudo
/// targets. Not persisted in JSONL; the loader is told which one it reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Pseudo,
}

macro_rules! tag_enum {
    ($ty:ident { $($variant:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " {:?}"),
                        other
                    ))),
                }
            }
        }
    };
}

tag_enum!(Split { Train => "train", Dev => "dev", Test => "test" });
tag_enum!(Task { Summarization => "summarization", Generation => "generation" });

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub examples: Vec<ExamplePair>,
    pub split: Split,
    pub task: Task,
    pub provenance: Provenance,
}

impl Dataset {
    /// Builds a dataset from `(source, target)` pairs, numbering them from 0.
    pub fn from_pairs(
        split: Split,
        task: Task,
        pairs: impl IntoIterator<Item = (TokenSequence, TokenSequence)>,
    ) -> Self {
        let examples = pairs
            .into_iter()
            .enumerate()
            .map(|(index, (source, target))| ExamplePair {
                index,
                source,
                target,
            })
            .collect();
        Dataset {
            examples,
            split,
            task,
            provenance: Provenance::Original,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    pub fn sources(&self) -> impl Iterator<Item = &TokenSequence> {
        self.examples.iter().map(|e| &e.source)
    }

    pub fn targets(&self) -> impl Iterator<Item = &TokenSequence> {
        self.examples.iter().map(|e| &e.target)
    }

    /// Largest token id used anywhere in the dataset.
    pub fn max_token_id(&self) -> Option<TokenId> {
        self.examples
            .iter()
            .flat_map(|e| e.source.ids().iter().chain(e.target.ids()))
            .copied()
            .max()
    }

    /// Sources are identical position-wise and the sizes agree.
    pub fn is_aligned_with(&self, other: &Dataset) -> bool {
        self.len() == other.len()
            && self
                .examples
                .iter()
                .zip(&other.examples)
                .all(|(a, b)| a.index == b.index && a.source == b.source)
    }
}

/// Token-to-id mapping with the four reserved tokens at ids 0..=3.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocab {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len()
            || tokens.iter().zip(RESERVED_TOKENS).any(|(t, r)| t != r)
        {
            return Err(Error::Data(format!(
                "vocabulary must start with {RESERVED_TOKENS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id as TokenId).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .unwrap_or(RESERVED_TOKENS[UNK as usize])
    }

    pub fn encode<'a>(&self, tokens: impl IntoIterator<Item = &'a str>) -> TokenSequence {
        TokenSequence(tokens.into_iter().map(|t| self.id(t)).collect())
    }

    /// Whitespace-tokenizes then encodes.
    pub fn encode_text(&self, text: &str) -> TokenSequence {
        self.encode(text.split_whitespace())
    }

    pub fn decode(&self, seq: &[TokenId]) -> Vec<&str> {
        seq.iter().map(|&id| self.token(id)).collect()
    }

    pub fn decode_text(&self, seq: &[TokenId]) -> String {
        self.decode(seq).join(" ")
    }

    /// SHA-256 over the ordered token list; binds checkpoints to a vocabulary.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for tok in &self.tokens {
            hasher.update(tok.as_bytes());
            hasher.update([0u8]);
        }
        hex::encode(hasher.finalize())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&VocabFile {
            tokens: self.tokens.clone(),
        })
        .expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("vocab: {e}")))?;
        Vocab::from_tokens(file.tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocab::from_json(&text)
    }
}

/// Reserved tokens first, then the most frequent corpus tokens (ties broken
/// lexicographically) until `max_size` entries.
pub fn build_vocab<'a, I>(corpora: I, max_size: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = &'a [String]>,
{
    if max_size < RESERVED_TOKENS.len() + 1 {
        return Err(Error::Config(format!(
            "vocabulary max_size must be at least {}, got {max_size}",
            RESERVED_TOKENS.len() + 1
        )));
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for corpus in corpora {
        for tok in corpus {
            if !RESERVED_TOKENS.contains(&tok.as_str()) {
                *counts.entry(tok.as_str()).or_insert(0) += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    let tokens = RESERVED_TOKENS
        .iter()
        .copied()
        .chain(ranked.into_iter().map(|(t, _)| t))
        .take(max_size)
        .map(str::to_string)
        .collect();
    Vocab::from_tokens(tokens)
}

/// Raw text pairs as read from a JSONL file, before encoding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawPair {
    pub src: String,
    pub tgt: String,
}

impl RawPair {
    pub fn tokens(&self) -> Vec<String> {
        self.src
            .split_whitespace()
            .chain(self.tgt.split_whitespace())
            .map(str::to_string)
            .collect()
    }
}

pub fn read_jsonl_pairs(path: &Path) -> Result<Vec<RawPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl_pairs(&text)
}

pub fn parse_jsonl_pairs(text: &str) -> Result<Vec<RawPair>> {
    text.lines()
        .enumerate()
        .map(|(i, line)| parse_pair_line(i + 1, line))
        .collect()
}

fn parse_pair_line(lineno: usize, line: &str) -> Result<RawPair> {
    let value: serde_json::Value = serde_json::from_str(line)
        .map_err(|e| Error::Data(format!("line {lineno}: malformed JSON: {e}")))?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Data(format!("line {lineno}: expected a JSON object")))?;
    let field = |name: &str| -> Result<String> {
        match obj.get(name) {
            None => Err(Error::Data(format!("line {lineno}: missing field '{name}'"))),
            Some(serde_json::Value::String(s)) => Ok(s.clone()),
            Some(_) => Err(Error::Data(format!(
                "line {lineno}: field '{name}' must be a string"
            ))),
        }
    };
    Ok(RawPair {
        src: field("src")?,
        tgt: field("tgt")?,
    })
}

pub fn encode_pairs(pairs: &[RawPair], vocab: &Vocab, split: Split, task: Task) -> Dataset {
    Dataset::from_pairs(
        split,
        task,
        pairs
            .iter()
            .map(|p| (vocab.encode_text(&p.src), vocab.encode_text(&p.tgt))),
    )
}

/// One pair per line, whitespace-tokenized and encoded with `vocab`.
pub fn load_jsonl(path: &Path, vocab: &Vocab, task: Task, split: Split) -> Result<Dataset> {
    let pairs = read_jsonl_pairs(path)?;
    Ok(encode_pairs(&pairs, vocab, split, task))
}

#[derive(Serialize)]
struct PairLine<'a> {
    src: &'a str,
    tgt: &'a str,
}

pub fn dataset_to_jsonl(d: &Dataset, vocab: &Vocab) -> String {
    let mut out = String::new();
    for ex in &d.examples {
        let src = vocab.decode_text(ex.source.ids());
        let tgt = vocab.decode_text(ex.target.ids());
        out.push_str(&serde_json::to_string(&PairLine { src: &src, tgt: &tgt }).expect("pair"));
        out.push('\n');
    }
    out
}

pub fn save_jsonl(d: &Dataset, vocab: &Vocab, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(dataset_to_jsonl(d, vocab).as_bytes())
        .map_err(|e| Error::io(path, e))
}

pub fn write_raw_jsonl(pairs: &[RawPair], path: &Path) -> Result<()> {
    let mut out = String::new();
    for p in pairs {
        out.push_str(&serde_json::to_string(&PairLine { src: &p.src, tgt: &p.tgt }).expect("pair"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn frequency_order_then_reserved() {
        let v = build_vocab([toks("a a b").as_slice()], 6).unwrap();
        assert_eq!(v.tokens(), ["<pad>", "<bos>", "<eos>", "<unk>", "a", "b"]);
    }

    #[test]
    fn ties_break_lexicographically() {
        let v = build_vocab([toks("b a").as_slice()], 10).unwrap();
        assert_eq!(&v.tokens()[4..], ["a", "b"]);
    }

    #[test]
    fn truncation_maps_rest_to_unk() {
        // token tK appears K+1 times for K in 0..100, so t99..t94 are the six most frequent
        let mut corpus = Vec::new();
        for k in 0..100 {
            for _ in 0..=k {
                corpus.push(format!("t{k}"));
            }
        }
        let v = build_vocab([corpus.as_slice()], 10).unwrap();
        assert_eq!(&v.tokens()[4..], ["t99", "t98", "t97", "t96", "t95", "t94"]);
        assert_eq!(v.encode(["t93", "t94"]).ids(), [UNK, 9]);
    }

    #[test]
    fn max_size_too_small() {
        assert!(matches!(
            build_vocab([toks("a").as_slice()], 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn reserved_strings_in_corpus_are_not_duplicated() {
        let v = build_vocab([toks("<unk> x <eos>").as_slice()], 10).unwrap();
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn vocab_json_round_trip() {
        let v = build_vocab([toks("x y y z").as_slice()], 10).unwrap();
        let json = v.to_json();
        assert!(json.starts_with(r#"{"tokens":["<pad>","<bos>","<eos>","<unk>""#));
        assert_eq!(Vocab::from_json(&json).unwrap(), v);
        assert_eq!(Vocab::from_json(&json).unwrap().digest(), v.digest());
    }

    #[test]
    fn vocab_rejects_misplaced_reserved() {
        assert!(Vocab::from_tokens(toks("<bos> <pad> <eos> <unk>")).is_err());
        assert!(Vocab::from_tokens(toks("<pad> <bos> <eos> <unk> a a")).is_err());
    }

    #[test]
    fn parses_pair_lines() {
        let text = "{\"src\":\"a = 1 ;\",\"tgt\":\"set a\"}\n{\"src\":\"return a ;\",\"tgt\":\"give a\"}\n";
        let pairs = parse_jsonl_pairs(text).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[1].tgt, "give a");
        assert!(parse_jsonl_pairs("").unwrap().is_empty());
    }

    #[test]
    fn non_string_field_is_reported_with_line() {
        let err = parse_jsonl_pairs("{\"src\": 5}").unwrap_err();
        assert_eq!(err.to_string(), "line 1: field 'src' must be a string");
    }

    #[test]
    fn missing_field_is_named() {
        let err = parse_jsonl_pairs("{\"src\":\"a\",\"tgt\":\"b\"}\n{\"src\":\"a\"}").unwrap_err();
        assert_eq!(err.to_string(), "line 2: missing field 'tgt'");
    }

    #[test]
    fn malformed_line_is_reported_with_line() {
        let err = parse_jsonl_pairs("{\"src\":\"a\",\"tgt\":\"b\"}\nnot json").unwrap_err();
        assert!(err.to_string().starts_with("line 2: malformed JSON"), "{err}");
    }

    #[test]
    fn without_eos_strips_only_trailing() {
        assert_eq!(TokenSequence(vec![5, 6, EOS]).without_eos(), [5, 6]);
        assert_eq!(TokenSequence(vec![EOS, 5]).without_eos(), [EOS, 5]);
        assert!(TokenSequence::default().without_eos().is_empty());
    }
}
