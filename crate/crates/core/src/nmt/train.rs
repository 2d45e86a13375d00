//! The training loop: batch packing by token budget, the phased loss-weight
//! schedule, optimizer steps and validation-based early stopping.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::Token;
use crate::eval;
use crate::subword::join_bpe_lossy;

use super::beam::{greedy_decode_batch, DecodeSpecials};
use super::loss::wce_from_logits;
use super::model::{Batch, Seq2SeqModel};
use super::vocab::Vocabulary;
use super::{NmtError, Real};

/// One training sentence pair after subword segmentation.
/// `target_constraints[i]` marks whether target unit `i` belongs to a
/// constraint's target term.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub source_units: Vec<String>,
    pub target_units: Vec<String>,
    pub target_constraints: Vec<bool>,
}

/// Held-out data for the stopping criterion. References are plain tokens
/// (after joining subword units), which is what validation BLEU scores.
#[derive(Clone, Debug)]
pub struct ValidationSet {
    pub sources: Vec<Vec<String>>,
    pub target_units: Vec<Vec<String>>,
    pub references: Vec<Vec<Token>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ValidationMetric {
    /// Greedy-decode the validation set and score corpus BLEU.
    Bleu,
    /// Teacher-forced per-token cross-entropy (lower is better).
    Loss,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OptimizerKind {
    Sgd { lr: f64 },
    Adam { lr: f64 },
}

impl OptimizerKind {
    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr } | OptimizerKind::Adam { lr } => lr,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    /// `(phase_fraction, alpha)` pairs; fractions are positive and sum to 1,
    /// every alpha >= 1. Phase boundaries scale with `max_epochs`.
    pub alpha_schedule: Vec<(f64, f64)>,
    pub min_epochs: usize,
    pub max_epochs: usize,
    pub tokens_per_batch: usize,
    pub seed: u64,
    pub validation: ValidationMetric,
    /// Early-stopping patience in epochs, active after `min_epochs`.
    pub patience: usize,
    pub optimizer: OptimizerKind,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Cap on validation sentences scored per epoch.
    pub max_valid_sentences: usize,
    /// Generation length bound for validation decoding.
    pub max_decode_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha_schedule: vec![(0.9, 1.0), (0.1, 2.0)],
            min_epochs: 50,
            max_epochs: 100,
            tokens_per_batch: 3000,
            seed: 0,
            validation: ValidationMetric::Bleu,
            patience: 5,
            optimizer: OptimizerKind::Adam { lr: 3e-3 },
            clip_norm: Some(1.0),
            max_valid_sentences: 256,
            max_decode_len: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NmtError> {
        if self.alpha_schedule.is_empty() {
            return Err(NmtError::InvalidConfig("alpha schedule is empty".into()));
        }
        let mut sum = 0.0;
        for &(fraction, alpha) in &self.alpha_schedule {
            if fraction <= 0.0 {
                return Err(NmtError::InvalidConfig(format!(
                    "phase fraction {fraction} must be positive"
                )));
            }
            if alpha < 1.0 {
                return Err(NmtError::InvalidConfig(format!("alpha {alpha} must be >= 1")));
            }
            sum += fraction;
        }
        if (sum - 1.0).abs() > 1e-6 {
            return Err(NmtError::InvalidConfig(format!(
                "phase fractions sum to {sum}, expected 1"
            )));
        }
        if self.min_epochs > self.max_epochs {
            return Err(NmtError::InvalidConfig(format!(
                "min_epochs {} > max_epochs {}",
                self.min_epochs, self.max_epochs
            )));
        }
        if self.max_epochs == 0 || self.tokens_per_batch == 0 || self.max_decode_len == 0 {
            return Err(NmtError::InvalidConfig(
                "max_epochs, tokens_per_batch and max_decode_len must be positive".into(),
            ));
        }
        if self.optimizer.lr() <= 0.0 {
            return Err(NmtError::InvalidConfig("learning rate must be positive".into()));
        }
        Ok(())
    }

    /// Loss weight for 1-based `epoch`: phase boundaries are the cumulative
    /// fractions scaled by `max_epochs` and rounded, so a (0.9, 0.1) split
    /// over 100 epochs puts alpha-phase two exactly on epochs 91..=100.
    pub fn alpha_for_epoch(&self, epoch: usize) -> f64 {
        let mut cumulative = 0.0;
        for (i, &(fraction, alpha)) in self.alpha_schedule.iter().enumerate() {
            cumulative += fraction;
            let boundary = if i + 1 == self.alpha_schedule.len() {
                self.max_epochs
            } else {
                (cumulative * self.max_epochs as f64).round() as usize
            };
            if epoch <= boundary {
                return alpha;
            }
        }
        self.alpha_schedule.last().map(|&(_, a)| a).unwrap_or(1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub alpha: f64,
    /// Mean weighted cross-entropy per target token.
    pub train_loss: f64,
    pub valid_score: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    pub stopped_early: bool,
}

struct Optimizer<F> {
    kind: OptimizerKind,
    step: usize,
    moment1: Vec<Array2<F>>,
    moment2: Vec<Array2<F>>,
}

impl<F: Real> Optimizer<F> {
    fn new(kind: OptimizerKind) -> Self {
        Optimizer {
            kind,
            step: 0,
            moment1: Vec::new(),
            moment2: Vec::new(),
        }
    }

    fn apply(&mut self, params: Vec<&mut super::layers::Param<F>>) {
        match self.kind {
            OptimizerKind::Sgd { lr } => {
                let lr = F::from_f64(lr);
                for p in params {
                    ndarray::Zip::from(&mut p.value)
                        .and(&p.grad)
                        .for_each(|v, &g| *v = *v - lr * g);
                }
            }
            OptimizerKind::Adam { lr } => {
                let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
                if self.moment1.is_empty() {
                    for p in &params {
                        self.moment1.push(Array2::zeros(p.value.raw_dim()));
                        self.moment2.push(Array2::zeros(p.value.raw_dim()));
                    }
                }
                self.step += 1;
                let bias1 = F::from_f64(1.0 - beta1.powi(self.step as i32));
                let bias2 = F::from_f64(1.0 - beta2.powi(self.step as i32));
                let (b1, b2) = (F::from_f64(beta1), F::from_f64(beta2));
                let one = F::one();
                let lr = F::from_f64(lr);
                let eps = F::from_f64(eps);
                for (i, p) in params.into_iter().enumerate() {
                    let m = &mut self.moment1[i];
                    let v = &mut self.moment2[i];
                    ndarray::Zip::from(&mut p.value)
                        .and(&p.grad)
                        .and(m)
                        .and(v)
                        .for_each(|value, &g, m, v| {
                            *m = b1 * *m + (one - b1) * g;
                            *v = b2 * *v + (one - b2) * g * g;
                            let m_hat = *m / bias1;
                            let v_hat = *v / bias2;
                            *value = *value - lr * m_hat / (v_hat.sqrt() + eps);
                        });
                }
            }
        }
    }
}

fn clip_gradients<F: Real>(params: Vec<&mut super::layers::Param<F>>, max_norm: f64) {
    let mut sum_sq = 0.0f64;
    for p in &params {
        for &g in p.grad.iter() {
            let g = g.to_f64();
            sum_sq += g * g;
        }
    }
    let norm = sum_sq.sqrt();
    if norm > max_norm {
        let scale = F::from_f64(max_norm / norm);
        for p in params {
            p.grad.mapv_inplace(|g| g * scale);
        }
    }
}

fn pack_batches(
    examples: &[(Vec<u32>, Vec<u32>, Vec<bool>)],
    tokens_per_batch: usize,
) -> Result<Vec<Batch>, NmtError> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| (examples[i].1.len(), examples[i].0.len(), i));

    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut max_src = 0usize;
    let mut max_tgt = 0usize;
    for &i in &order {
        let src_len = examples[i].0.len();
        let tgt_len = examples[i].1.len() + 1;
        let new_src = max_src.max(src_len);
        let new_tgt = max_tgt.max(tgt_len);
        let cost = (current.len() + 1) * (new_src + new_tgt);
        if !current.is_empty() && cost > tokens_per_batch {
            batches.push(build_batch(examples, &current)?);
            current.clear();
            max_src = 0;
            max_tgt = 0;
        }
        max_src = max_src.max(src_len);
        max_tgt = max_tgt.max(tgt_len);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(build_batch(examples, &current)?);
    }
    Ok(batches)
}

fn build_batch(
    examples: &[(Vec<u32>, Vec<u32>, Vec<bool>)],
    indices: &[usize],
) -> Result<Batch, NmtError> {
    let sources: Vec<Vec<u32>> = indices.iter().map(|&i| examples[i].0.clone()).collect();
    let targets: Vec<Vec<u32>> = indices.iter().map(|&i| examples[i].1.clone()).collect();
    let masks: Vec<Vec<bool>> = indices.iter().map(|&i| examples[i].2.clone()).collect();
    Batch::new(&sources, &targets, &masks)
}

fn validation_score<F: Real>(
    model: &Seq2SeqModel<F>,
    vocab: &Vocabulary,
    valid: &ValidationSet,
    cfg: &TrainConfig,
) -> Result<f64, NmtError> {
    let n = valid.sources.len().min(cfg.max_valid_sentences);
    if n == 0 {
        return Ok(0.0);
    }
    match cfg.validation {
        ValidationMetric::Bleu => {
            let sources: Vec<Vec<u32>> = valid.sources[..n]
                .iter()
                .map(|units| vocab.encode(units))
                .collect();
            let outputs = greedy_decode_batch(
                model,
                &sources,
                cfg.max_decode_len,
                &DecodeSpecials::default(),
            )?;
            let hypotheses: Vec<Vec<Token>> = outputs
                .iter()
                .map(|ids| join_bpe_lossy(&vocab.decode(ids)))
                .collect();
            let score = eval::bleu(&hypotheses, &valid.references[..n])
                .map(|b| b.bleu)
                .unwrap_or(0.0);
            Ok(score)
        }
        ValidationMetric::Loss => {
            let examples: Vec<(Vec<u32>, Vec<u32>, Vec<bool>)> = valid.sources[..n]
                .iter()
                .zip(&valid.target_units[..n])
                .map(|(src, tgt)| {
                    (
                        vocab.encode(src),
                        vocab.encode(tgt),
                        vec![false; tgt.len()],
                    )
                })
                .collect();
            let mut loss_sum = 0.0;
            let mut tokens = 0usize;
            for batch in pack_batches(&examples, cfg.tokens_per_batch)? {
                let pass = model.forward_batch(&batch, None)?;
                let weights = batch.weights::<F>(1.0);
                let (loss, _) = wce_from_logits(&pass.logits, &batch.tgt_out_ids, &weights)?;
                loss_sum += loss.to_f64();
                tokens += batch.target_tokens();
            }
            // negated so that "higher is better" holds for both metrics
            Ok(-loss_sum / tokens.max(1) as f64)
        }
    }
}

/// Trains `model` in place and returns the per-epoch log.
///
/// Epochs run in schedule order with the loss weight of their phase. After
/// `min_epochs`, training stops early once the validation score has not
/// improved for `patience` consecutive epochs. Fully deterministic for a
/// fixed config and seed.
pub fn train<F: Real>(
    model: &mut Seq2SeqModel<F>,
    vocab: &Vocabulary,
    examples: &[TrainExample],
    valid: Option<&ValidationSet>,
    cfg: &TrainConfig,
) -> Result<TrainLog, NmtError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(NmtError::EmptyCorpus);
    }
    let encoded: Vec<(Vec<u32>, Vec<u32>, Vec<bool>)> = examples
        .iter()
        .map(|ex| {
            (
                vocab.encode(&ex.source_units),
                vocab.encode(&ex.target_units),
                ex.target_constraints.clone(),
            )
        })
        .collect();
    let batches = pack_batches(&encoded, cfg.tokens_per_batch)?;
    let mut optimizer = Optimizer::new(cfg.optimizer);

    let mut log = TrainLog {
        epochs: Vec::with_capacity(cfg.max_epochs),
        stopped_early: false,
    };
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let alpha = cfg.alpha_for_epoch(epoch);
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut order: Vec<usize> = (0..batches.len()).collect();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut token_count = 0usize;
        for &bi in &order {
            let batch = &batches[bi];
            let dropout_rng = model.config().dropout_rate > 0.0;
            let pass = if dropout_rng {
                model.forward_batch(batch, Some(&mut rng))?
            } else {
                model.forward_batch(batch, None)?
            };
            let weights = batch.weights::<F>(alpha);
            let (loss, mut dlogits) = wce_from_logits(&pass.logits, &batch.tgt_out_ids, &weights)?;
            let tokens = batch.target_tokens();
            let scale = F::from_f64(1.0 / tokens as f64);
            dlogits.mapv_inplace(|g| g * scale);
            model.zero_grads();
            model.backward_batch(&pass, &dlogits);
            if let Some(max_norm) = cfg.clip_norm {
                clip_gradients(model.parameters_mut(), max_norm);
            }
            optimizer.apply(model.parameters_mut());
            loss_sum += loss.to_f64();
            token_count += tokens;
        }
        let train_loss = loss_sum / token_count.max(1) as f64;

        let valid_score = match valid {
            Some(v) => Some(validation_score(model, vocab, v, cfg)?),
            None => None,
        };
        log.epochs.push(EpochLog {
            epoch,
            alpha,
            train_loss,
            valid_score,
        });

        if let Some(score) = valid_score {
            if score > best_score {
                best_score = score;
                best_epoch = epoch;
            } else if epoch >= cfg.min_epochs && epoch - best_epoch >= cfg.patience {
                log.stopped_early = true;
                break;
            }
        }
    }
    Ok(log)
}
