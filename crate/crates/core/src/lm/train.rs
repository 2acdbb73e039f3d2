use std::collections::BTreeMap;
use std::f64::consts::PI;

use kedit_numerics::graph::Graph;
use kedit_numerics::{AdamW, AdamWConfig, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::TransformerLm;
use crate::error::{config_err, CoreError, Result};
use crate::util::{derive_seed, rng_for};
use crate::world::{Triple, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine decay target as a fraction of `lr`, reached at the last epoch.
    pub lr_final_ratio: f64,
    pub weight_decay: f64,
    pub beta2: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Probability that a training sequence gets a random neutral prefix.
    pub prefix_prob: f64,
}

impl Default for LmTrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            epochs: 36,
            batch_size: 32,
            lr: 1.5e-3,
            lr_final_ratio: 0.05,
            weight_decay: 0.0,
            beta2: 0.98,
            grad_clip: 1.0,
            prefix_prob: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    /// Global optimizer step count at the end of the epoch.
    pub step: u64,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmTrainReport {
    pub epochs: Vec<EpochStat>,
    /// Fraction of triples whose canonical prompt argmax is the object.
    pub recall: f64,
    pub recall_by_template: Vec<f64>,
}

/// Optimizer state carried across resumed runs.
#[derive(Debug, Clone)]
pub struct LmTrainState {
    pub optimizer: AdamW,
    pub epochs_done: usize,
}

impl LmTrainConfig {
    /// Optimizer settings; `lr` is overwritten by the schedule each epoch.
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta2: self.beta2,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.prefix_prob) {
            return Err(config_err(
                "lm training needs batch_size ≥ 1, lr > 0 and prefix_prob in [0, 1]",
            ));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        let lo = self.lr * self.lr_final_ratio;
        if self.epochs <= 1 {
            return self.lr;
        }
        let t = epoch as f64 / (self.epochs - 1) as f64;
        lo + (self.lr - lo) * 0.5 * (1.0 + (PI * t).cos())
    }
}

/// Fraction of `triples` whose prompt in `template` predicts the object.
pub fn triple_recall(model: &TransformerLm, world: &World, triples: &[Triple], template: usize) -> Result<f64> {
    if triples.is_empty() {
        return Ok(0.0);
    }
    let prompts: Vec<Vec<usize>> = triples
        .iter()
        .map(|t| world.prompt(t.subject, t.relation, template, None).tokens)
        .collect();
    let refs: Vec<&[usize]> = prompts.iter().map(|p| p.as_slice()).collect();
    let preds = model.predict_many(&refs)?;
    let hits = preds.iter().zip(triples).filter(|(p, t)| **p == t.object).count();
    Ok(hits as f64 / triples.len() as f64)
}

fn epoch_batches(world: &World, cfg: &LmTrainConfig, epoch: usize) -> Vec<(Vec<Vec<usize>>, Vec<usize>)> {
    let mut rng = rng_for(derive_seed(cfg.seed, "lm.epoch"), &epoch.to_string());
    let mut by_len: BTreeMap<usize, Vec<(Vec<usize>, usize)>> = BTreeMap::new();
    for t in &world.triples {
        for template in 0..world.templates.len() {
            let prefix = if rng.random::<f64>() < cfg.prefix_prob {
                Some(rng.random_range(0..world.prefixes.len()))
            } else {
                None
            };
            let p = world.prompt(t.subject, t.relation, template, prefix);
            by_len.entry(p.tokens.len()).or_default().push((p.tokens, t.object));
        }
    }
    let mut batches = Vec::new();
    for (_, mut seqs) in by_len {
        seqs.shuffle(&mut rng);
        for chunk in seqs.chunks(cfg.batch_size) {
            batches.push((
                chunk.iter().map(|c| c.0.clone()).collect(),
                chunk.iter().map(|c| c.1).collect(),
            ));
        }
    }
    batches.shuffle(&mut rng);
    batches
}

/// Mean final-position cross-entropy of a batch and its parameter gradients.
pub fn batch_loss_and_grads(
    model: &TransformerLm,
    seqs: &[Vec<usize>],
    targets: &[usize],
) -> Result<(f64, Vec<Tensor>)> {
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let len = refs[0].len();
    let mut g = Graph::new();
    let b = model.bind(&mut g, true);
    let x = model.embed(&mut g, &b, &refs)?;
    let last = model.stream(&mut g, &b, x, 0, len, None, None)?;
    let rows: Vec<usize> = (0..refs.len()).map(|i| i * len + len - 1).collect();
    let logits = model.logits_at(&mut g, &b, last, Some(&rows))?;
    let loss = g.cross_entropy(logits, targets)?;
    let mut grads = g.backward(loss)?;
    let value = g.value(loss).item();
    let out = b
        .vars()
        .into_iter()
        .map(|v| grads.take(v).unwrap_or_else(|| Tensor::zeros(g.value(v).shape())))
        .collect();
    Ok((value, out))
}

pub fn train_lm(model: &mut TransformerLm, world: &World, cfg: &LmTrainConfig) -> Result<LmTrainReport> {
    Ok(train_lm_resume(model, world, cfg, None)?.0)
}

/// Trains up to `cfg.epochs` total epochs, continuing from `state` if given.
pub fn train_lm_resume(
    model: &mut TransformerLm,
    world: &World,
    cfg: &LmTrainConfig,
    state: Option<LmTrainState>,
) -> Result<(LmTrainReport, LmTrainState)> {
    cfg.validate()?;
    if world.vocab.len() != model.vocab_size {
        return Err(config_err(format!(
            "world vocabulary has {} tokens, model {}",
            world.vocab.len(),
            model.vocab_size
        )));
    }
    let mut state = match state {
        Some(s) => s,
        None => {
            let shapes: Vec<Vec<usize>> = model.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
            let refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
            LmTrainState {
                optimizer: AdamW::new(cfg.adamw(), &refs),
                epochs_done: 0,
            }
        }
    };
    let mut epochs = Vec::new();
    for epoch in state.epochs_done..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        state.optimizer.config.lr = lr;
        let mut total = 0.0;
        let mut count = 0usize;
        for (seqs, targets) in epoch_batches(world, cfg, epoch) {
            let (loss, mut grads) = batch_loss_and_grads(model, &seqs, &targets)?;
            let step = state.optimizer.steps() as usize + 1;
            if !loss.is_finite() {
                return Err(CoreError::Divergence {
                    what: "language-model training",
                    step,
                    value: loss,
                });
            }
            if cfg.grad_clip > 0.0 {
                let norm = grads
                    .iter()
                    .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                if norm > cfg.grad_clip {
                    let s = cfg.grad_clip / norm;
                    grads = grads.iter().map(|g| g.scale(s)).collect();
                }
            }
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            state.optimizer.step(&mut model.params_mut(), &grad_refs)?;
            total += loss * targets.len() as f64;
            count += targets.len();
        }
        let mean_loss = total / count.max(1) as f64;
        info!("lm epoch {epoch}: loss {mean_loss:.5} lr {lr:.2e}");
        epochs.push(EpochStat {
            epoch,
            step: state.optimizer.steps(),
            lr,
            mean_loss,
        });
        state.epochs_done = epoch + 1;
    }
    let recall_by_template = (0..world.templates.len())
        .map(|t| triple_recall(model, world, &world.triples, t))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        LmTrainReport {
            epochs,
            recall: recall_by_template[0],
            recall_by_template,
        },
        state,
    ))
}
