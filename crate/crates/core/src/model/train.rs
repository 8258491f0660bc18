use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainMeta};
use super::optim::{clip_global_norm, Adam};
use super::rnn::RnnModel;
use super::Stage;
use crate::corpus::{Dataset, ExamplePair, Provenance};
use crate::decode::{greedy_decode, DEFAULT_MAX_LEN};
use crate::error::{Error, Result};
use crate::metrics::smoothed_sentence_bleu;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: f64,
    /// Epochs without a dev-BLEU improvement before stopping.
    pub early_stop_patience: usize,
    /// Length cap for the greedy decodes used in dev evaluation.
    pub max_decode_len: usize,
    /// Explicit improvement-stage learning rate; needs `unsafe_lr`.
    pub improve_lr: Option<f64>,
    pub unsafe_lr: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-2,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            grad_clip: 1.0,
            early_stop_patience: 5,
            max_decode_len: DEFAULT_MAX_LEN,
            improve_lr: None,
            unsafe_lr: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.early_stop_patience == 0 {
            return bad("epochs, batch_size and early_stop_patience must be >= 1".into());
        }
        if !(self.grad_clip > 0.0) {
            return bad(format!("grad_clip must be positive, got {}", self.grad_clip));
        }
        if self.max_decode_len == 0 {
            return bad("max_decode_len must be >= 1".into());
        }
        match self.improve_lr {
            Some(lr) if !self.unsafe_lr => bad(format!(
                "improve_lr = {lr} overrides the learning_rate / 10 rule; set unsafe_lr to allow it"
            )),
            Some(lr) if !(lr > 0.0 && lr.is_finite()) => bad(format!("improve_lr must be positive, got {lr}")),
            _ => Ok(()),
        }
    }

    /// Learning rate for the improvement stage.
    pub fn improvement_learning_rate(&self) -> Result<f64> {
        self.validate()?;
        Ok(self.improve_lr.unwrap_or(self.learning_rate / 10.0))
    }
}

/// A differentiable scalar function of a flat parameter vector.
pub trait Objective {
    fn loss(&self, params: &[f64]) -> Result<f64>;

    fn loss_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;
}

struct MleObjective<'a> {
    model: &'a RnnModel,
    batch: &'a [ExamplePair],
}

impl Objective for MleObjective<'_> {
    fn loss(&self, params: &[f64]) -> Result<f64> {
        let (total, count) = self.model.batch_nll(params, self.batch, None)?;
        Ok(total / count as f64)
    }

    fn loss_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; params.len()];
        let (total, count) = self.model.batch_nll(params, self.batch, Some(&mut grad))?;
        let n = count as f64;
        grad.iter_mut().for_each(|g| *g /= n);
        Ok((total / n, grad))
    }
}

fn mle_objective<'a>(ckpt: &'a Checkpoint, batch: &'a [ExamplePair]) -> Result<MleObjective<'a>> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    Ok(MleObjective {
        model: &ckpt.model,
        batch,
    })
}

/// Mean per-token teacher-forced NLL (EOS included) and its gradient.
pub fn mle_loss(ckpt: &Checkpoint, batch: &[ExamplePair]) -> Result<(f64, Vec<f64>)> {
    mle_objective(ckpt, batch)?.loss_and_grad(ckpt.model.params())
}

/// Max relative error |a − n| / max(|a|, |n|, 1e-8) between analytic and
/// central-difference gradients over `coords` random coordinates.
pub fn gradient_check_objective(
    obj: &dyn Objective,
    params: &[f64],
    coords: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    if coords == 0 || !(eps > 0.0) {
        return Err(Error::Contract(format!(
            "gradient check needs coords >= 1 and eps > 0 (got {coords}, {eps})"
        )));
    }
    if params.is_empty() {
        return Err(Error::Contract("no parameters to check".into()));
    }
    let (_, analytic) = obj.loss_and_grad(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for _ in 0..coords {
        let i = rng.gen_range(0..params.len());
        probe[i] = params[i] + eps;
        let up = obj.loss(&probe)?;
        probe[i] = params[i] - eps;
        let down = obj.loss(&probe)?;
        probe[i] = params[i];
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}

pub fn gradient_check(
    ckpt: &Checkpoint,
    batch: &[ExamplePair],
    coords: usize,
    eps: f64,
    seed: u64,
) -> Result<f64> {
    let obj = mle_objective(ckpt, batch)?;
    gradient_check_objective(&obj, ckpt.model.params(), coords, eps, seed)
}

fn next_stage(from: Stage, provenance: Provenance) -> Result<Stage> {
    match (from, provenance) {
        (Stage::Pretrained, Provenance::Original) => Ok(Stage::FineTuned),
        (Stage::FineTuned, Provenance::Pseudo) => Ok(Stage::Improved),
        (stage, prov) => Err(Error::Contract(format!(
            "cannot train a {stage} checkpoint on {} data",
            match prov {
                Provenance::Original => "original",
                Provenance::Pseudo => "pseudo",
            }
        ))),
    }
}

/// Mean smoothed sentence BLEU ×100 of greedy decodes on `dev`.
pub fn dev_bleu(model: &RnnModel, dev: &Dataset, max_len: usize) -> Result<f64> {
    let mut total = 0.0;
    for ex in &dev.examples {
        let hyp = greedy_decode(model, ex.source.ids(), max_len)?;
        total += smoothed_sentence_bleu(hyp.content(), ex.target.ids())?.value;
    }
    Ok(100.0 * total / dev.len() as f64)
}

/// MLE fine-tuning with Adam, keeping the parameters of the best dev-BLEU
/// epoch (epoch 0 being the input parameters).
///
/// A `pretrained` checkpoint trained on original data becomes `fine_tuned`;
/// a `fine_tuned` one trained on pseudo data becomes `improved`.
pub fn train(ckpt: &Checkpoint, train: &Dataset, dev: &Dataset, cfg: &TrainConfig) -> Result<Checkpoint> {
    cfg.validate()?;
    let stage = next_stage(ckpt.stage, train.provenance)?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Contract("train and dev sets must be non-empty".into()));
    }
    let vocab = ckpt.model.dims().vocab;
    for d in [train, dev] {
        if let Some(id) = d.max_token_id().filter(|&id| id as usize >= vocab) {
            return Err(Error::VocabMismatch(format!(
                "{} set uses token id {id}, the checkpoint has {vocab} tokens",
                d.split
            )));
        }
    }

    let mut model = ckpt.model.clone();
    let mut params = model.params().to_vec();
    let mut best_params = params.clone();
    let mut best_bleu = dev_bleu(&model, dev, cfg.max_decode_len)?;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut epochs_run = 0;

    let mut adam = Adam::new(params.len(), cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grad = vec![0.0; params.len()];

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for (batch_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<ExamplePair> = chunk.iter().map(|&i| train.examples[i].clone()).collect();
            grad.iter_mut().for_each(|g| *g = 0.0);
            let (total, count) = model.batch_nll(&params, &batch, Some(&mut grad))?;
            let n = count as f64;
            if !(total / n).is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    step: adam.steps(),
                    batch: batch_index,
                });
            }
            grad.iter_mut().for_each(|g| *g /= n);
            clip_global_norm(&mut grad, cfg.grad_clip);
            adam.step(&mut params, &grad);
        }
        epochs_run = epoch;
        model.set_params(params.clone())?;
        let bleu = dev_bleu(&model, dev, cfg.max_decode_len)?;
        if bleu > best_bleu {
            best_bleu = bleu;
            best_epoch = epoch;
            best_params.clone_from(&params);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }

    model.set_params(best_params)?;
    Ok(Checkpoint {
        stage,
        model,
        vocab_digest: ckpt.vocab_digest.clone(),
        train_meta: Some(TrainMeta {
            steps: adam.steps(),
            learning_rate: cfg.learning_rate,
            seed: cfg.seed,
            epochs_run,
            best_epoch,
            best_dev_bleu: best_bleu,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, Split, Task, TokenSequence, Vocab};

    struct Quadratic {
        center: Vec<f64>,
    }

    impl Objective for Quadratic {
        fn loss(&self, p: &[f64]) -> Result<f64> {
            Ok(p.iter().zip(&self.center).map(|(x, c)| (x - c) * (x - c)).sum())
        }

        fn loss_and_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
            let g = p.iter().zip(&self.center).map(|(x, c)| 2.0 * (x - c)).collect();
            Ok((self.loss(p)?, g))
        }
    }

    #[test]
    fn quadratic_gradient_check() {
        let q = Quadratic {
            center: vec![1.0, -2.0, 0.5],
        };
        let err = gradient_check_objective(&q, &[0.3, 0.7, -1.1], 10, 1e-4, 0).unwrap();
        assert!(err < 1e-8, "{err}");
        assert!(gradient_check_objective(&q, &[0.0; 3], 10, 0.0, 0).is_err());
        assert!(gradient_check_objective(&q, &[0.0; 3], 0, 1e-4, 0).is_err());
    }

    fn vocab() -> Vocab {
        let toks: Vec<String> = "a b c d e".split(' ').map(String::from).collect();
        build_vocab([toks.as_slice()], 32).unwrap()
    }

    fn copy_data(split: Split, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Dataset::from_pairs(
            split,
            Task::Summarization,
            (0..n).map(|_| {
                let len = rng.gen_range(1..4);
                let s: Vec<u32> = (0..len).map(|_| rng.gen_range(4..9)).collect();
                (TokenSequence(s.clone()), TokenSequence(s))
            }),
        )
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 0.02,
            epochs: 2,
            batch_size: 8,
            max_decode_len: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_decreases_after_small_step() {
        let ck = Checkpoint::init(&vocab(), 6, 1).unwrap();
        let data = copy_data(Split::Train, 6, 0);
        let (loss, grad) = mle_loss(&ck, &data.examples).unwrap();
        assert!(loss > 0.0);
        let stepped: Vec<f64> = ck.model.params().iter().zip(&grad).map(|(p, g)| p - 1e-4 * g).collect();
        let mut after = ck.clone();
        after.model.set_params(stepped).unwrap();
        let (loss2, _) = mle_loss(&after, &data.examples).unwrap();
        assert!(loss2 <= loss);
    }

    #[test]
    fn deterministic_and_stage_advancing() {
        let ck = Checkpoint::init(&vocab(), 6, 1).unwrap();
        let tr = copy_data(Split::Train, 20, 0);
        let dev = copy_data(Split::Dev, 5, 1);
        let a = train(&ck, &tr, &dev, &small_cfg()).unwrap();
        let b = train(&ck, &tr, &dev, &small_cfg()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.stage, Stage::FineTuned);
        assert_eq!(a.train_meta.as_ref().unwrap().learning_rate, 0.02);

        // fine_tuned on original data and pretrained on pseudo data are rejected
        assert!(train(&a, &tr, &dev, &small_cfg()).is_err());
        let pseudo = tr.clone().with_provenance(Provenance::Pseudo);
        assert!(train(&ck, &pseudo, &dev, &small_cfg()).is_err());
        let c = train(&a, &pseudo, &dev, &small_cfg()).unwrap();
        assert_eq!(c.stage, Stage::Improved);
        assert!(train(&c, &pseudo, &dev, &small_cfg()).is_err());
    }

    #[test]
    fn keeps_input_when_nothing_improves() {
        let ck = Checkpoint::init(&vocab(), 6, 1).unwrap();
        let tr = copy_data(Split::Train, 10, 0);
        let dev = copy_data(Split::Dev, 4, 1);
        // a learning rate too small to change any greedy decode
        let cfg = TrainConfig {
            learning_rate: 1e-12,
            epochs: 3,
            early_stop_patience: 1,
            ..small_cfg()
        };
        let out = train(&ck, &tr, &dev, &cfg).unwrap();
        assert_eq!(out.model.params(), ck.model.params());
        let meta = out.train_meta.unwrap();
        assert_eq!((meta.best_epoch, meta.epochs_run), (0, 1));
    }

    #[test]
    fn improvement_lr_rule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.improvement_learning_rate().unwrap(), cfg.learning_rate / 10.0);
        let over = TrainConfig {
            improve_lr: Some(0.5),
            ..TrainConfig::default()
        };
        assert!(over.improvement_learning_rate().is_err());
        let allowed = TrainConfig {
            unsafe_lr: true,
            ..over
        };
        assert_eq!(allowed.improvement_learning_rate().unwrap(), 0.5);
    }

    #[test]
    fn config_validation() {
        for cfg in [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { epochs: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { grad_clip: -1.0, ..TrainConfig::default() },
            TrainConfig { early_stop_patience: 0, ..TrainConfig::default() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn out_of_vocab_ids_rejected() {
        let ck = Checkpoint::init(&vocab(), 6, 1).unwrap();
        let bad = Dataset::from_pairs(
            Split::Train,
            Task::Summarization,
            [(TokenSequence(vec![4]), TokenSequence(vec![99]))],
        );
        let dev = copy_data(Split::Dev, 2, 1);
        assert!(matches!(
            train(&ck, &bad, &dev, &small_cfg()),
            Err(Error::VocabMismatch(_))
        ));
    }
}
