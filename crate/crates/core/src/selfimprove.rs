//! Pseudo-dataset generation and the fine-tune → pseudo → improve pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::corpus::{save_jsonl, Dataset, ExamplePair, Provenance, Split, Task, TokenId, TokenSequence, Vocab};
use crate::decode::{avg_greedy_mass_probability, beam_search, decode_dataset, parallel_map, BeamList, Hypothesis};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, similarity, CodeBleuConfig, MetricReport, Similarity};
use crate::model::{train, Checkpoint, Seq2Seq, Stage, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PseudoGenConfig {
    pub beam_size: usize,
    pub max_len: usize,
    pub task: Task,
    pub workers: usize,
    pub codebleu: CodeBleuConfig,
}

impl PseudoGenConfig {
    pub fn new(task: Task) -> Self {
        PseudoGenConfig {
            beam_size: 10,
            max_len: crate::decode::DEFAULT_MAX_LEN,
            task,
            workers: 1,
            codebleu: CodeBleuConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.max_len == 0 || self.workers == 0 {
            return Err(Error::Config(
                "pseudo generation needs beam_size, max_len and workers >= 1".into(),
            ));
        }
        self.codebleu.validate()
    }
}

/// The list member most similar to `reference`; ties go to the higher
/// log-probability, then to the earlier list position. Hypotheses that are
/// only EOS are passed over while a non-empty one exists.
pub fn select_pseudo_target<'b>(
    beam: &'b BeamList,
    reference: &[TokenId],
    sim: &Similarity,
) -> Result<Option<(&'b Hypothesis, f64)>> {
    let mut best: Option<(&Hypothesis, f64)> = None;
    for h in beam.hypotheses.iter().filter(|h| !h.content().is_empty()) {
        let s = sim.score(h.content(), reference)?;
        let better = match best {
            None => true,
            Some((b, bs)) => s > bs || (s == bs && h.logprob > b.logprob),
        };
        if better {
            best = Some((h, s));
        }
    }
    Ok(best)
}

/// Replaces every target of `train` by the selected member of its K-best
/// list. Works for any model; [`generate_pseudo_dataset`] adds the stage and
/// vocabulary checks for checkpoints.
pub fn pseudo_dataset_with<M: Seq2Seq>(
    model: &M,
    train: &Dataset,
    sim: &Similarity,
    cfg: &PseudoGenConfig,
) -> Result<Dataset> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("empty train set".into()));
    }
    if train.split != Split::Train {
        return Err(Error::Contract(format!(
            "only the train split is turned into pseudo data, got {}",
            train.split
        )));
    }
    if let Some(id) = train.max_token_id().filter(|&id| id as usize >= model.vocab_size()) {
        return Err(Error::VocabMismatch(format!(
            "train set uses token id {id}, the model has {} tokens",
            model.vocab_size()
        )));
    }
    let examples = parallel_map(&train.examples, cfg.workers, |ex| {
        let beam = beam_search(model, ex.source.ids(), cfg.beam_size, cfg.max_len)?;
        let (chosen, _) = select_pseudo_target(&beam, ex.target.ids(), sim)?.ok_or_else(|| {
            Error::Data(format!(
                "example {}: every beam hypothesis is empty",
                ex.index
            ))
        })?;
        Ok(ExamplePair {
            index: ex.index,
            source: ex.source.clone(),
            target: TokenSequence(chosen.content().to_vec()),
        })
    })?;
    Ok(Dataset {
        examples,
        split: Split::Train,
        task: train.task,
        provenance: Provenance::Pseudo,
    })
}

pub fn generate_pseudo_dataset(
    ckpt: &Checkpoint,
    train: &Dataset,
    vocab: &Vocab,
    cfg: &PseudoGenConfig,
) -> Result<Dataset> {
    if ckpt.stage != Stage::FineTuned {
        return Err(Error::Contract(format!(
            "pseudo data comes from a fine_tuned checkpoint, got {}",
            ckpt.stage
        )));
    }
    ckpt.check_vocab(vocab)?;
    let sim = similarity(cfg.task, vocab, cfg.codebleu)?;
    pseudo_dataset_with(ckpt, train, &sim, cfg)
}

/// Continues training a fine_tuned checkpoint on pseudo data at a tenth of
/// the fine-tuning learning rate.
pub fn improve(fine_tuned: &Checkpoint, pseudo: &Dataset, dev: &Dataset, base_cfg: &TrainConfig) -> Result<Checkpoint> {
    if fine_tuned.stage != Stage::FineTuned {
        return Err(Error::Contract(format!(
            "improve needs a fine_tuned checkpoint, got {}",
            fine_tuned.stage
        )));
    }
    if pseudo.provenance != Provenance::Pseudo {
        return Err(Error::Contract("improve needs a pseudo dataset".into()));
    }
    let cfg = TrainConfig {
        learning_rate: base_cfg.improvement_learning_rate()?,
        improve_lr: None,
        ..base_cfg.clone()
    };
    train(fine_tuned, pseudo, dev, &cfg)
}

/// Everything `run_pipeline` needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub hidden: usize,
    pub init_seed: u64,
    pub train: TrainConfig,
    pub pseudo: PseudoGenConfig,
    pub eval_beams: Vec<usize>,
    /// Printed run configuration stored verbatim in the manifest.
    pub config_text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreRow {
    pub stage: Stage,
    pub beam_size: usize,
    pub bleu: f64,
    pub em: f64,
    pub codebleu: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct PipelineRun {
    pub dir: PathBuf,
    pub fine_tuned: Checkpoint,
    pub improved: Checkpoint,
    pub pseudo: Dataset,
    pub scores: Vec<ScoreRow>,
    /// Mean probability of greedy decodes on the test set, per stage.
    pub mass_probability: [f64; 2],
}

impl PipelineRun {
    pub fn score(&self, stage: Stage, beam_size: usize) -> Option<&ScoreRow> {
        self.scores
            .iter()
            .find(|r| r.stage == stage && r.beam_size == beam_size)
    }
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FINE_TUNED_FILE: &str = "ckpt.fine_tuned";
pub const IMPROVED_FILE: &str = "ckpt.improved";
pub const PSEUDO_FILE: &str = "pseudo.jsonl";
pub const SCORES_FILE: &str = "scores.csv";
pub const VOCAB_FILE: &str = "vocab.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

struct Manifest {
    path: PathBuf,
    value: serde_json::Value,
}

impl Manifest {
    fn write(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.value).expect("manifest serializes");
        fs::write(&self.path, text + "\n").map_err(|e| Error::io(&self.path, e))
    }

    fn add_file(&mut self, dir: &Path, name: &str) -> Result<()> {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.value["files"][name] = serde_json::json!({
            "sha256": sha256_hex(&bytes),
            "bytes": bytes.len(),
        });
        self.write()
    }

    fn stage_done(&mut self, stage: &str) -> Result<()> {
        self.value["completed_stages"]
            .as_array_mut()
            .expect("array")
            .push(stage.into());
        self.write()
    }
}

/// Checks every digest recorded in a run directory's manifest.
pub fn verify_manifest(dir: &Path) -> Result<()> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("manifest: {e}")))?;
    let files = value["files"]
        .as_object()
        .ok_or_else(|| Error::Data("manifest has no files".into()))?;
    for (name, entry) in files {
        let p = dir.join(name);
        let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if entry["sha256"].as_str() != Some(sha256_hex(&bytes).as_str()) {
            return Err(Error::Data(format!("{name}: digest does not match manifest")));
        }
    }
    Ok(())
}

fn evaluate_stage(
    ckpt: &Checkpoint,
    test: &Dataset,
    vocab: &Vocab,
    cfg: &PipelineConfig,
) -> Result<Vec<ScoreRow>> {
    let mut rows = Vec::new();
    for &k in &cfg.eval_beams {
        let beams = decode_dataset(ckpt, test, k, cfg.pseudo.max_len, cfg.pseudo.workers)?;
        let preds: Vec<TokenSequence> = beams
            .iter()
            .map(|b| b.best().map(|h| h.tokens.clone()).unwrap_or_default())
            .collect();
        let report: MetricReport = evaluate(&preds, test, vocab, &cfg.pseudo.codebleu)?;
        rows.push(ScoreRow {
            stage: ckpt.stage,
            beam_size: k,
            bleu: report.corpus_bleu,
            em: report.exact_match_rate,
            codebleu: report.corpus_codebleu.map(|c| c.value),
        });
    }
    Ok(rows)
}

pub fn scores_csv(rows: &[ScoreRow]) -> String {
    let mut out = String::from("stage,beam_size,bleu,em,codebleu\n");
    for r in rows {
        let cb = r.codebleu.map(|c| format!("{c:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.6},{:.6},{}\n",
            r.stage, r.beam_size, r.bleu, r.em, cb
        ));
    }
    out
}

/// Fine-tunes a fresh checkpoint, builds the pseudo dataset, runs the
/// improvement stage and scores both stages on `test`, writing every
/// artifact into `dir`. The manifest is rewritten after each stage, so a
/// failed run leaves a record of what finished.
pub fn run_pipeline(
    train_set: &Dataset,
    dev: &Dataset,
    test: &Dataset,
    vocab: &Vocab,
    cfg: &PipelineConfig,
    dir: &Path,
) -> Result<PipelineRun> {
    for (d, split) in [(train_set, Split::Train), (dev, Split::Dev), (test, Split::Test)] {
        if d.split != split {
            return Err(Error::Contract(format!("expected a {split} set, got {}", d.split)));
        }
        if d.task != cfg.pseudo.task {
            return Err(Error::Contract(format!(
                "{split} set is for {}, the run is for {}",
                d.task, cfg.pseudo.task
            )));
        }
    }
    if cfg.eval_beams.is_empty() || cfg.eval_beams.contains(&0) {
        return Err(Error::Config("eval_beams must be non-empty beam sizes >= 1".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest {
        path: dir.join(MANIFEST_FILE),
        value: serde_json::json!({
            "config": cfg.config_text,
            "seeds": {"init": cfg.init_seed, "shuffle": cfg.train.seed},
            "pseudo_beam_size": cfg.pseudo.beam_size,
            "eval_beams": cfg.eval_beams,
            "assumption": "one pseudo dataset, generated once, serves every evaluation beam size",
            "started_at": unix_now(),
            "completed_stages": [],
            "files": {},
        }),
    };
    manifest.write()?;

    vocab.save(&dir.join(VOCAB_FILE))?;
    manifest.add_file(dir, VOCAB_FILE)?;

    let pretrained = Checkpoint::init(vocab, cfg.hidden, cfg.init_seed)?;
    let fine_tuned = train(&pretrained, train_set, dev, &cfg.train)?;
    fine_tuned.save(&dir.join(FINE_TUNED_FILE))?;
    manifest.add_file(dir, FINE_TUNED_FILE)?;
    manifest.stage_done("fine_tune")?;

    let pseudo = generate_pseudo_dataset(&fine_tuned, train_set, vocab, &cfg.pseudo)?;
    save_jsonl(&pseudo, vocab, &dir.join(PSEUDO_FILE))?;
    manifest.add_file(dir, PSEUDO_FILE)?;
    manifest.stage_done("pseudo")?;

    let improved = improve(&fine_tuned, &pseudo, dev, &cfg.train)?;
    improved.save(&dir.join(IMPROVED_FILE))?;
    manifest.add_file(dir, IMPROVED_FILE)?;
    manifest.stage_done("improve")?;

    let mut scores = evaluate_stage(&fine_tuned, test, vocab, cfg)?;
    scores.extend(evaluate_stage(&improved, test, vocab, cfg)?);
    let scores_path = dir.join(SCORES_FILE);
    fs::write(&scores_path, scores_csv(&scores)).map_err(|e| Error::io(&scores_path, e))?;
    manifest.add_file(dir, SCORES_FILE)?;

    let mass_probability = [
        avg_greedy_mass_probability(&fine_tuned, test, cfg.pseudo.max_len)?,
        avg_greedy_mass_probability(&improved, test, cfg.pseudo.max_len)?,
    ];
    manifest.value["mass_probability"] = serde_json::json!({
        "fine_tuned": mass_probability[0],
        "improved": mass_probability[1],
    });
    manifest.value["learning_rates"] = serde_json::json!({
        "fine_tune": fine_tuned.train_meta.as_ref().map(|m| m.learning_rate),
        "improve": improved.train_meta.as_ref().map(|m| m.learning_rate),
    });
    manifest.value["finished_at"] = unix_now().into();
    manifest.stage_done("evaluate")?;

    Ok(PipelineRun {
        dir: dir.to_path_buf(),
        fine_tuned,
        improved,
        pseudo,
        scores,
        mass_probability,
    })
}
