//! Knowledge representation disentanglement: splits a subject representation
//! `h_s` (read together with a relation representation `h_r`) into a
//! target-related part `z_r` and a target-unrelated part `z_u`, and
//! recomposes `ĥ_s = W5·z_r + W6·z_u`.

use std::collections::BTreeMap;

use kedit_numerics::graph::{gelu, Graph, Var};
use kedit_numerics::{AdamW, AdamWConfig, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, CoreError, Result};
use crate::lm::{softmax, Bound, SubstitutionHook, TransformerLm};
use crate::util::{check_width, derive_seed, matvec, rng_for};
use crate::world::{Split, Triple, World};

/// Starting point of `W1…W6`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KrdInit {
    /// `W1 = W3 = I`, `W2 = W4 = 0`, `W5 = W6 = I/2`, each plus
    /// `N(0, 0.01/d)` noise: `Rec∘Dis` starts near the identity on the
    /// positive half-space and the two components start nearly equal.
    #[default]
    Identity,
    /// Every entry `N(0, 1/d)`.
    Gaussian,
}

/// How the reconstruction residual is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconForm {
    /// `‖h_s − ĥ_s‖₂`
    #[default]
    Norm,
    /// `‖h_s − ĥ_s‖₂²`
    Squared,
    /// `‖h_s − ĥ_s‖₂² / d`
    Mean,
}

impl ReconForm {
    fn apply(self, residual: &[f64]) -> f64 {
        let sq: f64 = residual.iter().map(|x| x * x).sum();
        match self {
            ReconForm::Norm => sq.sqrt(),
            ReconForm::Squared => sq,
            ReconForm::Mean => sq / residual.len() as f64,
        }
    }

    fn apply_var(self, g: &mut Graph<'_>, residual: Var) -> Var {
        match self {
            ReconForm::Norm => g.norm(residual),
            ReconForm::Squared => g.sum_squares(residual),
            ReconForm::Mean => {
                let n = g.value(residual).numel() as f64;
                let s = g.sum_squares(residual);
                g.scale(s, 1.0 / n)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KrdConfig {
    pub seed: u64,
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Same-subject facts sampled per training instance.
    pub n_irrelevant: usize,
    /// Instances drawn per epoch by cycling through the shuffled triples.
    pub samples_per_epoch: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub recon: ReconForm,
    pub init: KrdInit,
}

impl Default for KrdConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            tau: 0.1,
            alpha: 0.2,
            beta: 1.0,
            n_irrelevant: 2,
            samples_per_epoch: 4096,
            batch_size: 8,
            epochs: 5,
            lr: 2e-3,
            weight_decay: 1.0,
            recon: ReconForm::Norm,
            init: KrdInit::Identity,
        }
    }
}

impl KrdConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(config_err(format!("temperature must be positive, got {}", self.tau)));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(config_err("loss weights alpha and beta must be non-negative"));
        }
        if self.n_irrelevant == 0 {
            return Err(config_err("the irrelevant-fact set must be nonempty"));
        }
        if self.batch_size == 0 || self.samples_per_epoch == 0 || !(self.lr > 0.0) {
            return Err(config_err(
                "krd training needs batch_size ≥ 1, samples_per_epoch ≥ 1 and lr > 0",
            ));
        }
        Ok(())
    }
}

/// Disentangler `W1…W4` and recomposer `W5, W6`, all `d × d`, with the
/// loss hyperparameters and the layers the representations are read from.
#[derive(Debug, Clone, PartialEq)]
pub struct KrdState {
    pub w: [Tensor; 6],
    pub tau: f64,
    pub alpha: f64,
    pub beta: f64,
    pub recon: ReconForm,
    pub subject_layer: usize,
    pub relation_layer: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DisentangledPair {
    pub z_r: Vec<f64>,
    pub z_u: Vec<f64>,
}

impl KrdState {
    /// Fresh state initialized per `cfg.init`.
    pub fn new(d: usize, subject_layer: usize, relation_layer: usize, cfg: &KrdConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "krd.init"));
        let (std, diag) = match cfg.init {
            KrdInit::Identity => (0.1 / (d as f64).sqrt(), [1.0, 0.0, 1.0, 0.0, 0.5, 0.5]),
            KrdInit::Gaussian => (1.0 / (d as f64).sqrt(), [0.0; 6]),
        };
        let dist = Normal::new(0.0, std).expect("positive std");
        let w = diag.map(|c| {
            let mut t = Tensor::matrix(d, d, (0..d * d).map(|_| dist.sample(&mut rng)).collect()).expect("d × d");
            for i in 0..d {
                t.set(i, i, t.at(i, i) + c);
            }
            t
        });
        Ok(Self::from_weights(w, subject_layer, relation_layer, cfg))
    }

    pub fn from_weights(w: [Tensor; 6], subject_layer: usize, relation_layer: usize, cfg: &KrdConfig) -> Self {
        Self {
            w,
            tau: cfg.tau,
            alpha: cfg.alpha,
            beta: cfg.beta,
            recon: cfg.recon,
            subject_layer,
            relation_layer,
        }
    }

    pub fn width(&self) -> usize {
        self.w[0].rows()
    }

    /// `W_i` for `i` in `1..=6`.
    pub fn weight(&self, i: usize) -> &Tensor {
        &self.w[i - 1]
    }

    pub fn disentangle(&self, h_s: &[f64], h_r: &[f64]) -> Result<DisentangledPair> {
        check_width("disentangle", self.width(), &[h_s, h_r])?;
        let branch = |a: &Tensor, b: &Tensor| -> Vec<f64> {
            matvec(a, h_s)
                .into_iter()
                .zip(matvec(b, h_r))
                .map(|(x, y)| gelu(x + y))
                .collect()
        };
        Ok(DisentangledPair {
            z_r: branch(&self.w[0], &self.w[1]),
            z_u: branch(&self.w[2], &self.w[3]),
        })
    }

    pub fn recompose(&self, z_r: &[f64], z_u: &[f64]) -> Result<Vec<f64>> {
        check_width("recompose", self.width(), &[z_r, z_u])?;
        Ok(matvec(&self.w[4], z_r)
            .into_iter()
            .zip(matvec(&self.w[5], z_u))
            .map(|(a, b)| a + b)
            .collect())
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        self.w
            .iter()
            .enumerate()
            .map(|(i, t)| (format!("w{}", i + 1), t))
            .collect()
    }

    /// Rebuilds weights from tensors named `w1…w6`.
    pub fn weights_from_tensors(tensors: Vec<(String, Tensor)>) -> Result<[Tensor; 6]> {
        let mut map: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |i: usize| {
            map.remove(&format!("w{i}"))
                .ok_or_else(|| data_err(format!("disentangler checkpoint lacks w{i}")))
        };
        let w = [take(1)?, take(2)?, take(3)?, take(4)?, take(5)?, take(6)?];
        let d = w[0].rows();
        if w.iter().any(|t| t.shape() != [d, d]) {
            return Err(data_err("disentangler matrices must all be d × d"));
        }
        Ok(w)
    }

    /// Recomposition `W5·z_r + W6·z_u` of `1 × d` rows inside a graph.
    pub fn recompose_var<'a>(&'a self, g: &mut Graph<'a>, z_r: Var, z_u: Var) -> Result<Var> {
        let w5 = g.constant_ref(&self.w[4]);
        let w6 = g.constant_ref(&self.w[5]);
        let a = g.matmul_nt(z_r, w5)?;
        let b = g.matmul_nt(z_u, w6)?;
        Ok(g.add(a, b)?)
    }
}

/// `−log softmax(sim/τ)[positive]` over `{positive} ∪ negatives` inside a
/// graph, with cosine similarity.
pub fn info_nce_var(g: &mut Graph<'_>, anchor: Var, positive: Var, negatives: &[Var], tau: f64) -> Result<Var> {
    if negatives.is_empty() {
        return Err(config_err("InfoNCE needs at least one negative"));
    }
    if !(tau > 0.0) {
        return Err(config_err(format!("temperature must be positive, got {tau}")));
    }
    let mut sims = Vec::with_capacity(negatives.len() + 1);
    for &other in std::iter::once(&positive).chain(negatives) {
        let c = g.cosine(anchor, other)?;
        sims.push(g.scale(c, 1.0 / tau));
    }
    let row = g.stack(&sims)?;
    Ok(g.cross_entropy(row, &[0])?)
}

fn const_row(g: &mut Graph<'_>, x: &[f64]) -> Var {
    g.constant(Tensor::row(x.to_vec()))
}

pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    let d = anchor.len();
    check_width("info_nce", d, &[positive])?;
    for n in negatives {
        check_width("info_nce", d, &[n])?;
    }
    let mut g = Graph::new();
    let a = const_row(&mut g, anchor);
    let p = const_row(&mut g, positive);
    let ns: Vec<Var> = negatives.iter().map(|n| const_row(&mut g, n)).collect();
    let l = info_nce_var(&mut g, a, p, &ns, tau)?;
    Ok(g.value(l).item())
}

/// `InfoNCE(z_r, h_s, [z_u; H_s]) + InfoNCE(z_u, h_s, [z_r; H_s])`.
pub fn loss_ctr(pair: &DisentangledPair, h_s: &[f64], batch_negatives: &[Vec<f64>], tau: f64) -> Result<f64> {
    let mut neg_r = vec![pair.z_u.clone()];
    neg_r.extend(batch_negatives.iter().cloned());
    let mut neg_u = vec![pair.z_r.clone()];
    neg_u.extend(batch_negatives.iter().cloned());
    Ok(info_nce(&pair.z_r, h_s, &neg_r, tau)? + info_nce(&pair.z_u, h_s, &neg_u, tau)?)
}

/// `‖h_s − ĥ_s‖₂`.
pub fn loss_recon(h_s: &[f64], h_hat: &[f64]) -> Result<f64> {
    loss_recon_with(h_s, h_hat, ReconForm::Norm)
}

pub fn loss_recon_with(h_s: &[f64], h_hat: &[f64], form: ReconForm) -> Result<f64> {
    check_width("loss_recon", h_s.len(), &[h_hat])?;
    let residual: Vec<f64> = h_s.iter().zip(h_hat).map(|(a, b)| a - b).collect();
    Ok(form.apply(&residual))
}

/// A training instance: a fact and same-subject facts under other relations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KrdExample {
    pub target: Triple,
    pub irrelevant: Vec<Triple>,
}

/// Cross-entropy terms of the constraint loss, target first.
#[derive(Debug, Clone, PartialEq)]
pub struct ConLoss {
    pub terms: Vec<f64>,
    pub total: f64,
}

/// Frozen-model reads of one canonical prompt: the full `h^{l_s}` stream,
/// `h_s` and `h_r`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptReps {
    pub tokens: Vec<usize>,
    pub subject_pos: usize,
    pub stream: Tensor,
    pub h_s: Vec<f64>,
    pub h_r: Vec<f64>,
}

/// Canonical-prompt reads keyed by `(subject, relation)`.
#[derive(Debug, Clone, Default)]
pub struct RepCache {
    map: BTreeMap<(usize, usize), PromptReps>,
}

impl RepCache {
    pub fn build(
        model: &TransformerLm,
        world: &World,
        pairs: &[(usize, usize)],
        subject_layer: usize,
        relation_layer: usize,
    ) -> Result<Self> {
        for l in [subject_layer, relation_layer] {
            if l == 0 || l > model.n_layers() {
                return Err(config_err(format!(
                    "representation layer {l} outside 1..={}",
                    model.n_layers()
                )));
            }
        }
        let mut by_len: BTreeMap<usize, Vec<(usize, usize)>> = BTreeMap::new();
        for &(s, r) in pairs {
            let p = world.canonical_prompt(s, r);
            by_len.entry(p.tokens.len()).or_default().push((s, r));
        }
        let mut map = BTreeMap::new();
        for (len, keys) in by_len {
            for chunk in keys.chunks(128) {
                let prompts: Vec<_> = chunk.iter().map(|&(s, r)| world.canonical_prompt(s, r)).collect();
                let seqs: Vec<&[usize]> = prompts.iter().map(|p| p.tokens.as_slice()).collect();
                let (_, trace) = model.forward_batch(&seqs, None, &[])?;
                for (i, (&key, p)) in chunk.iter().zip(&prompts).enumerate() {
                    let base = i * len;
                    let stream = trace.hidden[subject_layer].slice_rows(base, len)?;
                    map.insert(
                        key,
                        PromptReps {
                            tokens: p.tokens.clone(),
                            subject_pos: p.subject_pos(),
                            h_s: stream.row_slice(p.subject_pos()).to_vec(),
                            h_r: trace.h(relation_layer, base + p.last_pos()).to_vec(),
                            stream,
                        },
                    );
                }
            }
        }
        Ok(Self { map })
    }

    pub fn get(&self, subject: usize, relation: usize) -> Result<&PromptReps> {
        self.map
            .get(&(subject, relation))
            .ok_or_else(|| data_err(format!("no cached representation for ({subject}, {relation})")))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Graph nodes of one minibatch objective; each component is a batch mean.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub total: Var,
    pub ctr: Var,
    pub con: Var,
    pub recon: Var,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KrdLosses {
    pub ctr: f64,
    pub con: f64,
    pub recon: f64,
    pub total: f64,
}

impl KrdLosses {
    fn read(g: &Graph<'_>, v: &LossVars) -> Self {
        Self {
            ctr: g.value(v.ctr).item(),
            con: g.value(v.con).item(),
            recon: g.value(v.recon).item(),
            total: g.value(v.total).item(),
        }
    }

    fn accumulate(&mut self, other: &Self, weight: f64) {
        self.ctr += other.ctr * weight;
        self.con += other.con * weight;
        self.recon += other.recon * weight;
        self.total += other.total * weight;
    }
}

/// Objective `L_ctr + α·L_con + β·L_recon` averaged over `batch`, with the
/// six weights given as graph variables `w`.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    g: &mut Graph<'_>,
    w: &[Var; 6],
    state: &KrdState,
    model: &TransformerLm,
    bound: &Bound,
    cache: &RepCache,
    batch: &[KrdExample],
) -> Result<LossVars> {
    if batch.is_empty() {
        return Err(config_err("empty krd minibatch"));
    }
    let n = batch.len();
    let d = state.width();
    let mut hs = Vec::with_capacity(n * d);
    let mut hr = Vec::with_capacity(n * d);
    let mut targets = Vec::with_capacity(n);
    for ex in batch {
        if ex.irrelevant.is_empty() {
            return Err(config_err("the irrelevant-fact set must be nonempty"));
        }
        let reps = cache.get(ex.target.subject, ex.target.relation)?;
        hs.extend_from_slice(&reps.h_s);
        hr.extend_from_slice(&reps.h_r);
        targets.push(reps);
    }
    let hs = g.constant(Tensor::matrix(n, d, hs)?);
    let hr = g.constant(Tensor::matrix(n, d, hr)?);
    let branch = |g: &mut Graph<'_>, a: Var, b: Var| -> Result<Var> {
        let x = g.matmul_nt(hs, a)?;
        let y = g.matmul_nt(hr, b)?;
        let s = g.add(x, y)?;
        Ok(g.gelu(s))
    };
    let zr = branch(g, w[0], w[1])?;
    let zu = branch(g, w[2], w[3])?;
    let rec_r = g.matmul_nt(zr, w[4])?;
    let rec_u = g.matmul_nt(zu, w[5])?;
    let h_hat = g.add(rec_r, rec_u)?;

    // one negative per other subject in the batch
    let mut subject_rows: Vec<(usize, usize)> = Vec::new();
    for (i, ex) in batch.iter().enumerate() {
        if !subject_rows.iter().any(|&(s, _)| s == ex.target.subject) {
            subject_rows.push((ex.target.subject, i));
        }
    }
    let mut ctr_terms = Vec::with_capacity(2 * n);
    let mut recon_terms = Vec::with_capacity(n);
    let residual = g.sub(hs, h_hat)?;
    for (i, ex) in batch.iter().enumerate() {
        let zr_i = g.slice_rows(zr, i, 1)?;
        let zu_i = g.slice_rows(zu, i, 1)?;
        let hs_i = g.slice_rows(hs, i, 1)?;
        let mut negs = Vec::new();
        for &(s, j) in &subject_rows {
            if s != ex.target.subject {
                negs.push(g.slice_rows(hs, j, 1)?);
            }
        }
        let mut neg_r = vec![zu_i];
        neg_r.extend(&negs);
        let mut neg_u = vec![zr_i];
        neg_u.extend(&negs);
        ctr_terms.push(info_nce_var(g, zr_i, hs_i, &neg_r, state.tau)?);
        ctr_terms.push(info_nce_var(g, zu_i, hs_i, &neg_u, state.tau)?);
        let res_i = g.slice_rows(residual, i, 1)?;
        recon_terms.push(state.recon.apply_var(g, res_i));
    }
    let ctr_sum = g.add_all(&ctr_terms)?;
    let ctr = g.scale(ctr_sum, 1.0 / n as f64);
    let recon_sum = g.add_all(&recon_terms)?;
    let recon = g.scale(recon_sum, 1.0 / n as f64);

    // constraint loss: substituted forwards from the subject layer
    let len = targets[0].tokens.len();
    let mut streams = Vec::new();
    let mut rows_r = Vec::new();
    let mut rows_u = Vec::new();
    let mut owner_u = Vec::new();
    let mut objects = Vec::new();
    let mut seq = 0usize;
    let mut push = |reps: &PromptReps, object: usize, streams: &mut Vec<f64>| -> Result<usize> {
        if reps.tokens.len() != len {
            return Err(data_err("krd prompts in one batch must share a length"));
        }
        streams.extend_from_slice(reps.stream.data());
        objects.push(object);
        let row = seq * len + reps.subject_pos;
        seq += 1;
        Ok(row)
    };
    for (i, ex) in batch.iter().enumerate() {
        rows_r.push(push(targets[i], ex.target.object, &mut streams)?);
        for t in &ex.irrelevant {
            if t.subject != ex.target.subject || t.relation == ex.target.relation {
                return Err(data_err(
                    "irrelevant facts must share the subject and differ in relation",
                ));
            }
            rows_u.push(push(cache.get(t.subject, t.relation)?, t.object, &mut streams)?);
            owner_u.push(i);
        }
    }
    let n_seq = objects.len();
    let base = g.constant(Tensor::matrix(n_seq * len, d, streams)?);
    let owner_r: Vec<usize> = (0..n).collect();
    let vals_r = g.gather(zr, &owner_r)?;
    let x = g.set_rows(base, &rows_r, vals_r)?;
    let vals_u = g.gather(zu, &owner_u)?;
    let x = g.set_rows(x, &rows_u, vals_u)?;
    let h_last = model.stream(g, bound, x, state.subject_layer, len, None, None)?;
    let last_rows: Vec<usize> = (0..n_seq).map(|k| k * len + len - 1).collect();
    let logits = model.logits_at(g, bound, h_last, Some(&last_rows))?;
    let ce = g.cross_entropy(logits, &objects)?;
    let con = g.scale(ce, n_seq as f64 / n as f64);

    let a = g.scale(con, state.alpha);
    let b = g.scale(recon, state.beta);
    let total = g.add_all(&[ctr, a, b])?;
    Ok(LossVars { total, ctr, con, recon })
}

/// Constraint loss of one example through independent hooked forwards:
/// `z_r` replaces `h_s` in the target prompt, `z_u` in each irrelevant one.
pub fn loss_con(state: &KrdState, model: &TransformerLm, world: &World, example: &KrdExample) -> Result<ConLoss> {
    if example.irrelevant.is_empty() {
        return Err(config_err("the irrelevant-fact set must be nonempty"));
    }
    let t = example.target;
    let p = world.canonical_prompt(t.subject, t.relation);
    let (h_s, h_r) = model.extract_reps(&p, state.subject_layer, state.relation_layer)?;
    let pair = state.disentangle(&h_s, &h_r)?;
    let hooked_ce = |prompt: &crate::world::Prompt, value: &[f64], object: usize| -> Result<f64> {
        let hook = SubstitutionHook {
            layer: state.subject_layer,
            position: prompt.subject_pos(),
            value: value.to_vec(),
        };
        let (logits, _) = model.forward(&prompt.tokens, Some(&hook))?;
        let probs = softmax(logits.row_slice(prompt.last_pos()));
        Ok(-probs[object].ln())
    };
    let mut terms = vec![hooked_ce(&p, &pair.z_r, t.object)?];
    for n in &example.irrelevant {
        let q = world.canonical_prompt(n.subject, n.relation);
        terms.push(hooked_ce(&q, &pair.z_u, n.object)?);
    }
    Ok(ConLoss {
        total: terms.iter().sum(),
        terms,
    })
}

/// Samples one epoch of `count` instances by cycling through reshuffled
/// passes over `triples`; each instance gets `n_irrelevant` distinct other
/// relations of its subject.
pub fn sample_examples(
    world: &World,
    triples: &[Triple],
    n_irrelevant: usize,
    count: usize,
    seed: u64,
    epoch: usize,
) -> Vec<KrdExample> {
    let mut rng = rng_for(derive_seed(seed, "krd.epoch"), &epoch.to_string());
    let mut out = Vec::with_capacity(count);
    let mut order: Vec<usize> = (0..triples.len()).collect();
    while out.len() < count && !triples.is_empty() {
        order.shuffle(&mut rng);
        for &i in order.iter().take(count - out.len()) {
            let t = triples[i];
            let mut others: Vec<usize> = (0..world.n_relations()).filter(|&r| r != t.relation).collect();
            others.shuffle(&mut rng);
            out.push(KrdExample {
                target: t,
                irrelevant: others
                    .into_iter()
                    .take(n_irrelevant)
                    .map(|r| world.triple(t.subject, r))
                    .collect(),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrdEpochStat {
    pub epoch: usize,
    pub step: u64,
    pub losses: KrdLosses,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KrdReport {
    /// Objective over the first epoch's instances before any update.
    pub initial: KrdLosses,
    /// Mean minibatch objective during each epoch.
    pub epochs: Vec<KrdEpochStat>,
}

#[derive(Debug, Clone)]
pub struct KrdTrainState {
    pub optimizer: AdamW,
    pub epochs_done: usize,
}

fn minibatch_losses(
    state: &KrdState,
    model: &TransformerLm,
    cache: &RepCache,
    batch: &[KrdExample],
    with_grads: bool,
) -> Result<(KrdLosses, Option<Vec<Tensor>>)> {
    let mut g = Graph::new();
    let w: [Var; 6] = std::array::from_fn(|i| {
        if with_grads {
            g.param_ref(&state.w[i])
        } else {
            g.constant_ref(&state.w[i])
        }
    });
    let bound = model.bind(&mut g, false);
    let vars = batch_loss(&mut g, &w, state, model, &bound, cache, batch)?;
    let losses = KrdLosses::read(&g, &vars);
    if !with_grads {
        return Ok((losses, None));
    }
    let mut grads = g.backward(vars.total)?;
    let out = w
        .iter()
        .zip(&state.w)
        .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((losses, Some(out)))
}

/// Mean objective over `examples` without updating the state.
pub fn evaluate_losses(
    state: &KrdState,
    model: &TransformerLm,
    cache: &RepCache,
    examples: &[KrdExample],
    batch_size: usize,
) -> Result<KrdLosses> {
    let mut acc = KrdLosses::default();
    for chunk in examples.chunks(batch_size.max(1)) {
        let (l, _) = minibatch_losses(state, model, cache, chunk, false)?;
        acc.accumulate(&l, chunk.len() as f64 / examples.len() as f64);
    }
    Ok(acc)
}

/// Canonical-prompt pairs of every triple in `split`.
pub fn split_pairs(world: &World, split: Split) -> Vec<(usize, usize)> {
    world
        .triples_in(split)
        .iter()
        .map(|t| (t.subject, t.relation))
        .collect()
}

pub fn train_krd(state: &mut KrdState, model: &TransformerLm, world: &World, cfg: &KrdConfig) -> Result<KrdReport> {
    Ok(train_krd_resume(state, model, world, cfg, None)?.0)
}

/// Trains `W1…W6` on the disentangler split with the LM frozen, up to
/// `cfg.epochs` total epochs.
pub fn train_krd_resume(
    state: &mut KrdState,
    model: &TransformerLm,
    world: &World,
    cfg: &KrdConfig,
    resume: Option<KrdTrainState>,
) -> Result<(KrdReport, KrdTrainState)> {
    cfg.validate()?;
    if state.width() != model.arch.d_model {
        return Err(config_err(format!(
            "disentangler width {} does not match model width {}",
            state.width(),
            model.arch.d_model
        )));
    }
    let triples = world.triples_in(Split::Krd);
    if triples.is_empty() {
        return Err(config_err("the world has no disentangler-training subjects"));
    }
    let pairs: Vec<(usize, usize)> = world
        .subjects_in(Split::Krd)
        .into_iter()
        .flat_map(|s| (0..world.n_relations()).map(move |r| (s, r)))
        .collect();
    let cache = RepCache::build(model, world, &pairs, state.subject_layer, state.relation_layer)?;
    let mut train = match resume {
        Some(t) => t,
        None => {
            let shapes: Vec<&[usize]> = state.w.iter().map(|t| t.shape()).collect();
            let opt = AdamW::new(cfg.adamw(), &shapes);
            KrdTrainState {
                optimizer: opt,
                epochs_done: 0,
            }
        }
    };
    let first = sample_examples(
        world,
        &triples,
        cfg.n_irrelevant,
        cfg.samples_per_epoch,
        cfg.seed,
        train.epochs_done,
    );
    let initial = evaluate_losses(state, model, &cache, &first, cfg.batch_size)?;
    let mut epochs = Vec::new();
    for epoch in train.epochs_done..cfg.epochs {
        let examples = sample_examples(
            world,
            &triples,
            cfg.n_irrelevant,
            cfg.samples_per_epoch,
            cfg.seed,
            epoch,
        );
        let mut acc = KrdLosses::default();
        for chunk in examples.chunks(cfg.batch_size) {
            let (l, grads) = minibatch_losses(state, model, &cache, chunk, true)?;
            if !l.total.is_finite() {
                return Err(CoreError::Divergence {
                    what: "disentangler training",
                    step: train.optimizer.steps() as usize + 1,
                    value: l.total,
                });
            }
            let grads = grads.expect("requested");
            let refs: Vec<&Tensor> = grads.iter().collect();
            let mut params: Vec<&mut Tensor> = state.w.iter_mut().collect();
            train.optimizer.step(&mut params, &refs)?;
            acc.accumulate(&l, chunk.len() as f64 / examples.len() as f64);
        }
        info!(
            "krd epoch {epoch}: total {:.4} ctr {:.4} con {:.4} recon {:.4}",
            acc.total, acc.ctr, acc.con, acc.recon
        );
        epochs.push(KrdEpochStat {
            epoch,
            step: train.optimizer.steps(),
            losses: acc,
        });
        train.epochs_done = epoch + 1;
    }
    Ok((KrdReport { initial, epochs }, train))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean `cos(z_r, z_u)` over `(h_s, h_r)` pairs.
pub fn mean_component_cosine(state: &KrdState, reps: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if reps.is_empty() {
        return Err(config_err("no representations to summarize"));
    }
    let mut total = 0.0;
    for (hs, hr) in reps {
        let p = state.disentangle(hs, hr)?;
        total += cosine(&p.z_r, &p.z_u);
    }
    Ok(total / reps.len() as f64)
}

/// Mean `‖h_s − Rec(Dis(h_s, h_r))‖₂` over `(h_s, h_r)` pairs.
pub fn mean_recon_residual(state: &KrdState, reps: &[(Vec<f64>, Vec<f64>)]) -> Result<f64> {
    if reps.is_empty() {
        return Err(config_err("no representations to summarize"));
    }
    let mut total = 0.0;
    for (hs, hr) in reps {
        let p = state.disentangle(hs, hr)?;
        total += loss_recon(hs, &state.recompose(&p.z_r, &p.z_u)?)?;
    }
    Ok(total / reps.len() as f64)
}

/// Plain cosine similarity; zero when either vector vanishes.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    cosine(a, b)
}
