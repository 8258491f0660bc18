use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seqimprove::analysis::{analyze, emit_scatter, ScoreTable};
use seqimprove::config::RunConfig;
use seqimprove::corpus::synth::synth_generate;
use seqimprove::corpus::{
    load_jsonl, save_jsonl, write_raw_jsonl, Dataset, Provenance, Split, TokenSequence, Vocab,
};
use seqimprove::decode::decode_dataset;
use seqimprove::metrics::evaluate;
use seqimprove::model::{train, Checkpoint};
use seqimprove::selfimprove::{generate_pseudo_dataset, improve, run_pipeline, verify_manifest};
use seqimprove::Error;

#[derive(Parser)]
#[command(name = "seqimprove", about = "Self-improvement fine-tuning for sequence generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Run configuration (`key = value` lines); defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn resolve(&self) -> seqimprove::Result<RunConfig> {
        let cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        eprintln!("# resolved config (seed {})", cfg.seed);
        eprint!("{}", cfg.to_text());
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus: train/dev/test JSONL and a vocabulary.
    Synth {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune a freshly initialized model on the train split.
    Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Directory written by `synth`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the pseudo dataset from a fine_tuned checkpoint.
    Pseudo {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Continue training a fine_tuned checkpoint on pseudo data at lr / 10.
    Improve {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Beam-decode the sources of a JSONL file; one JSON object per line.
    Decode {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 1)]
        beam: usize,
        /// Output file; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score predictions (output of `decode`, or one text per line) against references.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Fine-tune, generate pseudo data, improve and evaluate in one run directory.
    Pipeline {
        #[command(flatten)]
        config: ConfigArg,
        /// Use the corpus in this `synth` directory instead of generating one.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory; overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Correlate score gaps in a result table.
    Analyze {
        #[arg(long)]
        fixture: PathBuf,
        /// Beam sizes to report; all of 1, 5 and 10 when absent.
        #[arg(long)]
        beam: Vec<usize>,
        /// Write a scatter plot (SVG plus CSV) per beam into this directory.
        #[arg(long)]
        plot_dir: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } => 3,
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn guard_output(out: &Path, inputs: &[&Path]) -> seqimprove::Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).ok();
    if let Some(o) = canon(out) {
        if inputs.iter().any(|i| canon(i).as_ref() == Some(&o)) {
            return Err(Error::Config(format!(
                "refusing to overwrite input file {}",
                out.display()
            )));
        }
    }
    Ok(())
}

struct DataDir {
    vocab: Vocab,
    train: Dataset,
    dev: Dataset,
    test: Dataset,
}

fn load_data(dir: &Path, cfg: &RunConfig) -> seqimprove::Result<DataDir> {
    let vocab = Vocab::load(&dir.join("vocab.json"))?;
    let split = |s: Split| load_jsonl(&dir.join(format!("{s}.jsonl")), &vocab, cfg.task, s);
    Ok(DataDir {
        train: split(Split::Train)?,
        dev: split(Split::Dev)?,
        test: split(Split::Test)?,
        vocab,
    })
}

fn load_checkpoint(path: &Path, vocab: &Vocab) -> seqimprove::Result<Checkpoint> {
    let ckpt = Checkpoint::load(path)?;
    ckpt.check_vocab(vocab)?;
    Ok(ckpt)
}

/// Token sequences from `decode` output (best hypothesis) or plain text lines.
fn read_predictions(path: &Path, vocab: &Vocab) -> seqimprove::Result<Vec<TokenSequence>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(n, line)| {
            let value: Option<serde_json::Value> = serde_json::from_str(line).ok();
            match value.as_ref().and_then(|v| v.get("beam")) {
                Some(beam) => {
                    let tokens = beam
                        .get(0)
                        .and_then(|h| h.get("tokens"))
                        .and_then(|t| t.as_array())
                        .ok_or_else(|| Error::Data(format!("line {}: empty beam", n + 1)))?;
                    tokens
                        .iter()
                        .map(|t| {
                            t.as_u64().map(|id| id as u32).ok_or_else(|| {
                                Error::Data(format!("line {}: bad token id {t}", n + 1))
                            })
                        })
                        .collect::<seqimprove::Result<Vec<u32>>>()
                        .map(TokenSequence)
                }
                None => Ok(vocab.encode_text(line)),
            }
        })
        .collect()
}

fn run(cli: Cli) -> seqimprove::Result<()> {
    match cli.command {
        Command::Synth { config, out } => {
            let cfg = config.resolve()?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let data = cfg.synthetic_data()?;
            for split in [Split::Train, Split::Dev, Split::Test] {
                let pairs = synth_generate(&cfg.synth_config(split), cfg.task)?;
                write_raw_jsonl(&pairs, &out.join(format!("{split}.jsonl")))?;
            }
            data.vocab.save(&out.join("vocab.json"))?;
            println!(
                "wrote {} train, {} dev, {} test pairs and {} vocabulary entries to {}",
                data.train.len(),
                data.dev.len(),
                data.test.len(),
                data.vocab.len(),
                out.display()
            );
        }
        Command::Train { config, data, out } => {
            let cfg = config.resolve()?;
            let d = load_data(&data, &cfg)?;
            let pretrained = Checkpoint::init(&d.vocab, cfg.hidden, cfg.init_seed())?;
            let ckpt = train(&pretrained, &d.train, &d.dev, &cfg.train_config())?;
            ckpt.save(&out)?;
            println!("{}", serde_json::to_string(&ckpt.train_meta).expect("meta"));
        }
        Command::Pseudo {
            config,
            data,
            ckpt,
            out,
        } => {
            let cfg = config.resolve()?;
            let d = load_data(&data, &cfg)?;
            guard_output(&out, &[&data.join("train.jsonl")])?;
            let ck = load_checkpoint(&ckpt, &d.vocab)?;
            let pseudo = generate_pseudo_dataset(&ck, &d.train, &d.vocab, &cfg.pseudo_config())?;
            save_jsonl(&pseudo, &d.vocab, &out)?;
            println!("wrote {} pseudo pairs to {}", pseudo.len(), out.display());
        }
        Command::Improve {
            config,
            data,
            ckpt,
            pseudo,
            out,
        } => {
            let cfg = config.resolve()?;
            let d = load_data(&data, &cfg)?;
            guard_output(&out, &[&ckpt])?;
            let ck = load_checkpoint(&ckpt, &d.vocab)?;
            let p = load_jsonl(&pseudo, &d.vocab, cfg.task, Split::Train)?
                .with_provenance(Provenance::Pseudo);
            if !p.is_aligned_with(&d.train) {
                return Err(Error::Contract(
                    "pseudo dataset does not align with the train split".into(),
                ));
            }
            let improved = improve(&ck, &p, &d.dev, &cfg.train_config())?;
            improved.save(&out)?;
            println!("{}", serde_json::to_string(&improved.train_meta).expect("meta"));
        }
        Command::Decode {
            config,
            ckpt,
            vocab,
            input,
            beam,
            out,
        } => {
            let cfg = config.resolve()?;
            let v = Vocab::load(&vocab)?;
            let ck = load_checkpoint(&ckpt, &v)?;
            let d = load_jsonl(&input, &v, cfg.task, Split::Test)?;
            let beams = decode_dataset(&ck, &d, beam, cfg.max_len, cfg.workers)?;
            let mut text = String::new();
            for (ex, b) in d.examples.iter().zip(&beams) {
                let line = serde_json::json!({
                    "index": ex.index,
                    "beam": b.hypotheses.iter().map(|h| serde_json::json!({
                        "tokens": h.tokens.ids(),
                        "logprob": h.logprob,
                    })).collect::<Vec<_>>(),
                });
                text.push_str(&line.to_string());
                text.push('\n');
            }
            match out {
                Some(p) => {
                    guard_output(&p, &[&input])?;
                    fs::write(&p, text).map_err(|e| Error::io(&p, e))?
                }
                None => print!("{text}"),
            }
        }
        Command::Eval {
            config,
            predictions,
            references,
            vocab,
        } => {
            let cfg = config.resolve()?;
            let v = Vocab::load(&vocab)?;
            let refs = load_jsonl(&references, &v, cfg.task, Split::Test)?;
            let preds = read_predictions(&predictions, &v)?;
            let report = evaluate(&preds, &refs, &v, &cfg.codebleu_config())?;
            println!("{}", report.to_json());
        }
        Command::Pipeline { config, data, out } => {
            let mut cfg = config.resolve()?;
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            let (vocab, tr, dev, test) = match data {
                Some(dir) => {
                    let d = load_data(&dir, &cfg)?;
                    (d.vocab, d.train, d.dev, d.test)
                }
                None => {
                    let d = cfg.synthetic_data()?;
                    (d.vocab, d.train, d.dev, d.test)
                }
            };
            let run = run_pipeline(&tr, &dev, &test, &vocab, &cfg.pipeline_config(), &cfg.out_dir)?;
            verify_manifest(&run.dir)?;
            print!("{}", seqimprove::selfimprove::scores_csv(&run.scores));
            println!(
                "mass probability: fine_tuned {:.6} improved {:.6}",
                run.mass_probability[0], run.mass_probability[1]
            );
            println!("run directory: {}", run.dir.display());
        }
        Command::Analyze {
            fixture,
            beam,
            plot_dir,
        } => {
            let beams = if beam.is_empty() { vec![1, 5, 10] } else { beam };
            eprintln!("# analyze fixture={} beams={beams:?}", fixture.display());
            let table = ScoreTable::load(&fixture)?;
            let report = analyze(&table, &beams)?;
            for b in &report.beams {
                println!(
                    "beam {}: n = {} r = {:.4} R2 = {:.4} slope = {:.4} intercept = {:.4}",
                    b.beam,
                    b.points.len(),
                    b.pearson_r,
                    b.r_squared,
                    b.fit.slope,
                    b.fit.intercept
                );
            }
            if let Some(dir) = plot_dir {
                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for b in &report.beams {
                    emit_scatter(b, &dir.join(format!("scatter_beam{}.svg", b.beam)))?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
