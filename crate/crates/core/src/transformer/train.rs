//! Teacher-forced training with AdamW, and likelihood evaluation.

use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::checkpoint::{save_checkpoint, CheckpointError};
use super::ops::log_softmax_row;
use super::{ModelError, SeqModel};
use crate::decoder::{Automaton, DecodeError};
use crate::generator::DatasetRecord;
use crate::tokenizer::{encode_layout, encode_tree, TokenSeq, TokenizeError, Vocabulary};

/// One input/output sequence pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub input: TokenSeq,
    pub output: TokenSeq,
}

impl TrainingPair {
    pub fn from_record(rec: &DatasetRecord, vocab: &Vocabulary) -> Result<Self, TokenizeError> {
        Ok(Self { input: encode_layout(&rec.layout, vocab)?, output: encode_tree(&rec.tree, vocab)? })
    }

    /// Number of scored (shifted) target tokens.
    pub fn target_tokens(&self) -> usize {
        self.output.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub val_fraction: f64,
    /// Epochs without validation improvement before stopping; 0 disables.
    pub patience: usize,
    /// Global gradient-norm clip; not from the paper.
    pub clip_norm: Option<f64>,
    /// Linear learning-rate warmup in optimizer steps; not from the paper.
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Wall-clock budget; training stops after the batch that exceeds it.
    pub max_seconds: Option<f64>,
    /// Writes `last.ckpt` every epoch and `best.ckpt` on improvement.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            batch_size: 32,
            epochs: 100,
            weight_decay: 0.01,
            seed: 0,
            val_fraction: 0.1,
            patience: 5,
            clip_norm: Some(1.0),
            warmup_steps: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            max_seconds: None,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.clip_norm.is_some_and(|c| c <= 0.0) {
            return bad("weight decay and clip norm must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("invalid Adam moments");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean per-token training loss over the batches seen (dropout active).
    pub train_loss: f64,
    /// Mean per-token validation loss in evaluation mode.
    pub val_loss: Option<f64>,
    pub steps: usize,
    pub seconds: f64,
    /// The epoch was cut short by the time budget.
    pub partial: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStop {
    MaxEpochs,
    EarlyStopped,
    TimeBudget,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    /// Epoch whose parameters the model holds after training.
    pub best_epoch: Option<usize>,
    pub stop: TrainStop,
    pub train_size: usize,
    pub val_size: usize,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("loss became non-finite in epoch {epoch}")]
    Divergence { epoch: usize, report: Box<TrainReport> },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Decoupled-weight-decay Adam over the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f32>,
    v: Vec<f32>,
    decay: Vec<bool>,
    step: u64,
}

impl AdamW {
    /// Weight decay applies to linear weight matrices only, not to
    /// embeddings, biases or norm gains.
    pub fn new(model: &SeqModel<f32>) -> Self {
        let mut decay = vec![false; model.param_count()];
        for t in model.tensors() {
            if t.name.ends_with(".w") {
                decay[t.offset..t.offset + t.len()].fill(true);
            }
        }
        let n = model.param_count();
        Self { m: vec![0.0; n], v: vec![0.0; n], decay, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut [f32], grads: &[f32], lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let step_size = (lr / c1) as f32;
        let root_c2 = c2.sqrt() as f32;
        let eps = cfg.eps as f32;
        let wd = (lr * cfg.weight_decay) as f32;
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            if self.decay[i] {
                params[i] -= wd * params[i];
            }
            params[i] -= step_size * self.m[i] / (self.v[i].sqrt() / root_c2 + eps);
        }
    }
}

/// Deterministic train/validation split.
pub fn split_dataset(n: usize, val_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_5B17));
    let n_val = if n > 1 { ((n as f64 * val_fraction).round() as usize).min(n - 1) } else { 0 };
    let val = idx.split_off(n - n_val);
    (idx, val)
}

/// Mean per-token teacher-forcing loss in evaluation mode.
pub fn mean_loss(model: &SeqModel<f32>, pairs: &[&TrainingPair]) -> Result<f64, ModelError> {
    let (mut total, mut tokens) = (0.0, 0);
    for p in pairs {
        let (l, n) = model.sequence_loss(&p.input, &p.output)?;
        total += l;
        tokens += n;
    }
    Ok(if tokens == 0 { 0.0 } else { total / tokens as f64 })
}

fn grad_norm(g: &[f32]) -> f64 {
    g.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>().sqrt()
}

/// Trains `model` in place. When a validation split exists the model ends
/// up holding the parameters of the best validation epoch.
pub fn train(
    model: &mut SeqModel<f32>,
    vocab: &Vocabulary,
    data: &[TrainingPair],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(CheckpointError::Io)?;
    }
    let start = Instant::now();
    let (mut train_idx, val_idx) = split_dataset(data.len(), cfg.val_fraction, cfg.seed);
    let val: Vec<&TrainingPair> = val_idx.iter().map(|&i| &data[i]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(model);
    let mut grads = vec![0f32; model.param_count()];
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        stop: TrainStop::MaxEpochs,
        train_size: train_idx.len(),
        val_size: val.len(),
    };
    let mut best: Option<(f64, Vec<f32>)> = None;
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        let epoch_start = Instant::now();
        train_idx.shuffle(&mut rng);
        let (mut loss_sum, mut token_sum, mut steps) = (0.0, 0usize, 0);
        let mut partial = false;
        for batch in train_idx.chunks(cfg.batch_size) {
            let tokens: usize = batch.iter().map(|&i| data[i].target_tokens()).sum();
            if tokens == 0 {
                continue;
            }
            grads.fill(0.0);
            let scale = 1.0 / tokens as f32;
            for &i in batch {
                let (l, _) = model.accumulate_gradient(&data[i].input, &data[i].output, &mut grads, scale, Some(&mut rng))?;
                loss_sum += l;
            }
            token_sum += tokens;
            if !loss_sum.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Divergence { epoch, report: Box::new(report) });
            }
            if let Some(c) = cfg.clip_norm {
                let norm = grad_norm(&grads);
                if norm > c {
                    let s = (c / norm) as f32;
                    grads.iter_mut().for_each(|g| *g *= s);
                }
            }
            let warm = if cfg.warmup_steps == 0 {
                1.0
            } else {
                ((opt.steps() + 1) as f64 / cfg.warmup_steps as f64).min(1.0)
            };
            opt.update(model.params_mut(), &grads, cfg.learning_rate * warm, cfg);
            steps += 1;
            if cfg.max_seconds.is_some_and(|m| start.elapsed().as_secs_f64() > m) {
                partial = true;
                break;
            }
        }
        let val_loss = if val.is_empty() { None } else { Some(mean_loss(model, &val)?) };
        let train_loss = if token_sum == 0 { 0.0 } else { loss_sum / token_sum as f64 };
        if val_loss.is_some_and(|v| !v.is_finite()) {
            return Err(TrainError::Divergence { epoch, report: Box::new(report) });
        }
        let er = EpochReport { epoch, train_loss, val_loss, steps, seconds: epoch_start.elapsed().as_secs_f64(), partial };
        log::info!("epoch {epoch}: train {train_loss:.5} val {val_loss:?} ({steps} steps, {:.1}s)", er.seconds);
        let monitored = val_loss.unwrap_or(train_loss);
        let improved = best.as_ref().is_none_or(|(b, _)| monitored < *b);
        if improved {
            best = Some((monitored, model.params().to_vec()));
            report.best_epoch = Some(epoch);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            save_checkpoint(model, vocab, &dir.join("last.ckpt"))?;
            if improved {
                save_checkpoint(model, vocab, &dir.join("best.ckpt"))?;
            }
        }
        // Checkpoints of this epoch exist by the time the callback runs.
        on_epoch(&er);
        report.epochs.push(er);
        if partial {
            report.stop = TrainStop::TimeBudget;
            break;
        }
        if cfg.patience > 0 && since_best >= cfg.patience {
            report.stop = TrainStop::EarlyStopped;
            break;
        }
    }
    if let Some((_, params)) = best {
        model.params_mut().copy_from_slice(&params);
    }
    Ok(report)
}

/// Summed negative log-likelihood of one pair without and with invalid
/// tokens nullified, plus the number of scored tokens.
pub fn pair_nll(model: &SeqModel<f32>, automaton: &Automaton, pair: &TrainingPair) -> Result<(f64, f64, usize), NllError> {
    let rows = model.teacher_forcing_logits(&pair.input, &pair.output)?;
    let mut state = automaton.from_prefix(&pair.output.tokens[..1])?;
    let (mut plain, mut masked) = (0.0, 0.0);
    for (row, &target) in rows.iter().zip(&pair.output.tokens[1..]) {
        let lp = log_softmax_row(row);
        let valid = automaton.valid_next_tokens(&state);
        let t = target as usize;
        let max = valid.tokens().map(|v| lp[v as usize] as f64).fold(f64::NEG_INFINITY, f64::max);
        // log of the valid mass; it cannot exceed log 1 = 0, rounding aside.
        let lse = (valid.tokens().map(|v| (lp[v as usize] as f64 - max).exp()).sum::<f64>().ln() + max).min(0.0);
        plain -= lp[t] as f64;
        masked -= lp[t] as f64 - lse;
        state = automaton.advance(&state, target)?;
    }
    Ok((plain, masked, rows.len()))
}

#[derive(Debug, Error)]
pub enum NllError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("ground truth is not decodable: {0}")]
    Decode(#[from] DecodeError),
}

/// Mean per-token NLL over `pairs`; with `mask_invalid` the distribution is
/// renormalized over syntactically valid tokens before scoring.
pub fn nll(model: &SeqModel<f32>, automaton: &Automaton, pairs: &[TrainingPair], mask_invalid: bool) -> Result<f64, NllError> {
    let (mut total, mut tokens) = (0.0, 0);
    for p in pairs {
        let (plain, masked, n) = pair_nll(model, automaton, p)?;
        total += if mask_invalid { masked } else { plain };
        tokens += n;
    }
    Ok(if tokens == 0 { 0.0 } else { total / tokens as f64 })
}
