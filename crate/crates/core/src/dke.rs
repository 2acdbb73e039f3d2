//! Rank-one editing of one FFN output matrix `W`: the key `k*` read at the
//! subject token, a value `v*` found by optimizing a shift of the subject
//! representation, and the closed-form updates
//!
//! ```text
//! Δ_MEMIT = (v* − W k*) k*ᵀ (C0 + k* k*ᵀ)⁻¹
//! Ŵ_DiKE  = W + (W3ᵀ W3 + I)⁻¹ Δ_MEMIT
//! ```
//!
//! Both updates are rank one and are carried as factor pairs `(u, w)` with
//! `Ŵ − W = u wᵀ`.

use std::fmt;
use std::str::FromStr;

use kedit_numerics::graph::{Graph, Var};
use kedit_numerics::linalg::{solve_spd, Cholesky};
use kedit_numerics::{AdamW, AdamWConfig, Tensor};
use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, CoreError, Result};
use crate::krd::KrdState;
use crate::lm::{Bound, TransformerLm};
use crate::util::{check_width, derive_seed, dot, matvec, norm, rng_for};
use crate::world::{EditRequest, Prompt, Triple, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EditorKind {
    #[serde(rename = "dike")]
    Dike,
    #[serde(rename = "memit")]
    Memit,
    #[serde(rename = "memit-constrained")]
    MemitConstrained,
}

impl EditorKind {
    pub const ALL: [EditorKind; 3] = [EditorKind::Dike, EditorKind::Memit, EditorKind::MemitConstrained];

    pub fn name(self) -> &'static str {
        match self {
            EditorKind::Dike => "dike",
            EditorKind::Memit => "memit",
            EditorKind::MemitConstrained => "memit-constrained",
        }
    }
}

impl fmt::Display for EditorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EditorKind {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let valid: Vec<&str> = Self::ALL.iter().map(|k| k.name()).collect();
            config_err(format!("unknown editor '{s}'; valid editors: {}", valid.join(", ")))
        })
    }
}

/// Order in which the edits of a batch are applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOrder {
    #[default]
    Forward,
    Reverse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EditConfig {
    /// Prompts averaged into `k*`: the bare prompt, then prefixed variants.
    pub n_prefixes: usize,
    /// Scale of the key second moment in `C0`.
    pub lambda: f64,
    pub ridge: f64,
    pub lr: f64,
    pub max_steps: usize,
    pub early_stop: f64,
    /// Draws extra prefixes once the fixed pool is used up.
    pub seed: u64,
    pub order: EditOrder,
}

impl Default for EditConfig {
    fn default() -> Self {
        Self {
            n_prefixes: 5,
            lambda: 1.0,
            ridge: 1e-3,
            lr: 0.5,
            max_steps: 50,
            early_stop: 5e-2,
            seed: 17,
            order: EditOrder::Forward,
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_prefixes == 0 {
            return Err(config_err("n_prefixes must be at least 1"));
        }
        if !(self.lambda >= 0.0 && self.ridge >= 0.0) || self.lambda + self.ridge == 0.0 {
            return Err(config_err("lambda and ridge must be non-negative and not both zero"));
        }
        if !(self.lr > 0.0) || !(self.early_stop >= 0.0) {
            return Err(config_err("edit lr must be positive and early_stop non-negative"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------- keys

/// Prompts whose subject-token keys are averaged into `k*`: the bare prompt,
/// each pool prefix in order, then seeded draws from the pool.
pub fn key_prompts(world: &World, subject: usize, relation: usize, n: usize, seed: u64) -> Vec<Prompt> {
    let mut out = vec![world.canonical_prompt(subject, relation)];
    let pool = world.prefixes.len();
    out.extend((0..pool.min(n.saturating_sub(1))).map(|p| world.prompt(subject, relation, 0, Some(p))));
    if n > pool + 1 && pool > 0 {
        let mut rng = rng_for(derive_seed(seed, "key.prefix"), &format!("{subject}/{relation}"));
        while out.len() < n {
            out.push(world.prompt(subject, relation, 0, Some(rng.random_range(0..pool))));
        }
    }
    out.truncate(n);
    out
}

/// Mean FFN inner activation at the subject token of layer `layer`.
pub fn compute_key(model: &TransformerLm, prompts: &[Prompt], layer: usize) -> Result<Vec<f64>> {
    model.w_out(layer)?;
    if prompts.is_empty() {
        return Err(config_err("key needs at least one prompt"));
    }
    let mut k = vec![0.0; model.arch.d_ff];
    for p in prompts {
        let (_, trace) = model.forward(&p.tokens, None)?;
        for (a, b) in k.iter_mut().zip(trace.k(layer, p.subject_pos())) {
            *a += b;
        }
    }
    let n = prompts.len() as f64;
    k.iter_mut().for_each(|x| *x /= n);
    Ok(k)
}

// ---------------------------------------------------------- covariance

/// Second moment `C0 = λ·mean(k kᵀ) + ridge·I` of corpus keys, with its
/// factorization cached for repeated solves.
#[derive(Debug, Clone)]
pub struct PreservationSet {
    pub c0: Tensor,
    pub lambda: f64,
    pub ridge: f64,
    pub n_keys: usize,
    factor: Cholesky,
}

impl PreservationSet {
    pub fn from_keys(keys: &[Vec<f64>], width: usize, lambda: f64, ridge: f64) -> Result<Self> {
        if keys.is_empty() {
            return Err(config_err("covariance estimate needs at least one key"));
        }
        if keys.len() < width && ridge <= 0.0 {
            return Err(config_err(format!(
                "{} keys cannot span width {width} without a ridge",
                keys.len()
            )));
        }
        for k in keys {
            check_width("covariance key", width, &[k])?;
        }
        let mut m = vec![0.0; width * width];
        for k in keys {
            for i in 0..width {
                let ki = k[i];
                if ki == 0.0 {
                    continue;
                }
                let row = &mut m[i * width..(i + 1) * width];
                for j in 0..=i {
                    row[j] += ki * k[j];
                }
            }
        }
        let s = lambda / keys.len() as f64;
        for i in 0..width {
            for j in 0..=i {
                let v = m[i * width + j] * s;
                m[i * width + j] = v;
                m[j * width + i] = v;
            }
            m[i * width + i] += ridge;
        }
        Self::from_matrix(Tensor::matrix(width, width, m)?, lambda, ridge, keys.len())
    }

    pub fn from_matrix(c0: Tensor, lambda: f64, ridge: f64, n_keys: usize) -> Result<Self> {
        let factor = Cholesky::factor(&c0)?;
        Ok(Self {
            c0,
            lambda,
            ridge,
            n_keys,
            factor,
        })
    }

    pub fn width(&self) -> usize {
        self.factor.dim()
    }

    /// `(C0 + k kᵀ)⁻¹ k`, by Sherman–Morrison on the cached factor.
    pub fn key_direction(&self, k: &[f64]) -> Result<Vec<f64>> {
        let c_inv_k = self.factor.solve_vec(k)?;
        let s = 1.0 + dot(k, &c_inv_k);
        Ok(c_inv_k.into_iter().map(|x| x / s).collect())
    }
}

/// Subject-token keys of every subject under each template and prefix.
pub fn corpus_prompts(world: &World) -> Vec<Prompt> {
    let mut out = Vec::new();
    for s in 0..world.subjects.len() {
        let r = s % world.n_relations();
        for t in 0..world.templates.len() {
            out.push(world.prompt(s, r, t, None));
            out.extend((0..world.prefixes.len()).map(|p| world.prompt(s, r, t, Some(p))));
        }
    }
    out
}

pub fn estimate_covariance(
    model: &TransformerLm,
    prompts: &[Prompt],
    layer: usize,
    lambda: f64,
    ridge: f64,
) -> Result<PreservationSet> {
    model.w_out(layer)?;
    if prompts.is_empty() {
        return Err(config_err("covariance estimate needs corpus prompts"));
    }
    let mut by_len: std::collections::BTreeMap<usize, Vec<&Prompt>> = Default::default();
    for p in prompts {
        by_len.entry(p.tokens.len()).or_default().push(p);
    }
    let mut keys = Vec::with_capacity(prompts.len());
    for (len, group) in by_len {
        for chunk in group.chunks(128) {
            let seqs: Vec<&[usize]> = chunk.iter().map(|p| p.tokens.as_slice()).collect();
            let (_, trace) = model.forward_batch(&seqs, None, &[])?;
            for (i, p) in chunk.iter().enumerate() {
                keys.push(trace.k(layer, i * len + p.subject_pos()).to_vec());
            }
        }
    }
    PreservationSet::from_keys(&keys, model.arch.d_ff, lambda, ridge)
}

// ------------------------------------------------------- closed forms

fn column(v: &[f64]) -> Tensor {
    Tensor::column(v.to_vec())
}

/// `r = v* − W k*` and `b = (C0 + k* k*ᵀ)⁻¹ k*` by a direct solve.
fn memit_factors_direct(w: &Tensor, k: &[f64], v: &[f64], c0: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (rows, cols) = w.dims2()?;
    check_width("edit key", cols, &[k])?;
    check_width("edit value", rows, &[v])?;
    let a = c0.add(&Tensor::outer(k, k))?;
    let b = solve_spd(&a, &column(k))?.into_data();
    let r: Vec<f64> = v.iter().zip(matvec(w, k)).map(|(a, b)| a - b).collect();
    Ok((r, b))
}

/// `Ŵ = W + (v* − W k*) k*ᵀ (C0 + k* k*ᵀ)⁻¹`.
pub fn memit_update(w: &Tensor, k: &[f64], v: &[f64], c0: &Tensor) -> Result<Tensor> {
    let (r, b) = memit_factors_direct(w, k, v, c0)?;
    Ok(w.add(&Tensor::outer(&r, &b))?)
}

/// `Ŵ = W + (W3ᵀ W3 + I)⁻¹ Δ_MEMIT`.
pub fn dike_update(w: &Tensor, k: &[f64], v: &[f64], c0: &Tensor, w3: &Tensor) -> Result<Tensor> {
    let (r, b) = memit_factors_direct(w, k, v, c0)?;
    let m = unrelated_gram(w3)?;
    let u = solve_spd(&m, &column(&r))?.into_data();
    Ok(w.add(&Tensor::outer(&u, &b))?)
}

/// `W3ᵀ W3 + I`.
pub fn unrelated_gram(w3: &Tensor) -> Result<Tensor> {
    let (n, _) = w3.dims2()?;
    Ok(w3.matmul_tn(w3)?.add(&Tensor::eye(n))?)
}

fn residuals(w_hat: &Tensor, k: &[f64], target: &[f64], k0: &Tensor, v0: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (rows, cols) = w_hat.dims2()?;
    check_width("objective key", cols, &[k])?;
    check_width("objective value", rows, &[target])?;
    let r_star: Vec<f64> = matvec(w_hat, k).iter().zip(target).map(|(a, b)| a - b).collect();
    let r0 = w_hat.matmul(k0)?.sub(v0)?;
    Ok((r_star, r0))
}

/// The four-term objective
/// `‖Ŵk* − v*‖² + ‖ŴK0 − V0‖² + ‖W3(Ŵk* − v0)‖² + ‖W3(ŴK0 − V0)‖²`
/// with keys as the columns of `K0`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_objective(
    w_hat: &Tensor,
    k: &[f64],
    v_star: &[f64],
    v0: &[f64],
    k0: &Tensor,
    v0s: &Tensor,
    w3: &Tensor,
) -> Result<f64> {
    let (edit, keep) = residuals(w_hat, k, v_star, k0, v0s)?;
    let (drift, _) = residuals(w_hat, k, v0, k0, v0s)?;
    let sq = |x: &[f64]| dot(x, x);
    let w3_keep = w3.matmul(&keep)?;
    Ok(sq(&edit) + sq(keep.data()) + sq(&matvec(w3, &drift)) + sq(w3_keep.data()))
}

/// Gradient of [`evaluate_objective`] in `Ŵ`, term by term.
#[allow(clippy::too_many_arguments)]
pub fn objective_gradient(
    w_hat: &Tensor,
    k: &[f64],
    v_star: &[f64],
    v0: &[f64],
    k0: &Tensor,
    v0s: &Tensor,
    w3: &Tensor,
) -> Result<Tensor> {
    let (edit, keep) = residuals(w_hat, k, v_star, k0, v0s)?;
    let (drift, _) = residuals(w_hat, k, v0, k0, v0s)?;
    let gram = w3.matmul_tn(w3)?;
    let g_drift = matvec(&gram, &drift);
    let mut grad = Tensor::outer(&edit, k);
    grad.add_scaled_(&Tensor::outer(&g_drift, k), 1.0)?;
    let keep_k = keep.matmul_nt(k0)?;
    grad.add_scaled_(&keep_k, 1.0)?;
    grad.add_scaled_(&gram.matmul(&keep_k)?, 1.0)?;
    Ok(grad.scale(2.0))
}

/// The same objective as a graph node in `Ŵ`, for derivative checks.
#[allow(clippy::too_many_arguments)]
pub fn objective_var(
    g: &mut Graph<'_>,
    w_hat: Var,
    k: &[f64],
    v_star: &[f64],
    v0: &[f64],
    k0: &Tensor,
    v0s: &Tensor,
    w3: &Tensor,
) -> Result<Var> {
    let kc = g.constant(column(k));
    let vs = g.constant(column(v_star));
    let vo = g.constant(column(v0));
    let k0 = g.constant(k0.clone());
    let v0s = g.constant(v0s.clone());
    let w3 = g.constant(w3.clone());
    let wk = g.matmul(w_hat, kc)?;
    let edit = g.sub(wk, vs)?;
    let drift = g.sub(wk, vo)?;
    let wk0 = g.matmul(w_hat, k0)?;
    let keep = g.sub(wk0, v0s)?;
    let w3_drift = g.matmul(w3, drift)?;
    let w3_keep = g.matmul(w3, keep)?;
    let terms = [
        g.sum_squares(edit),
        g.sum_squares(keep),
        g.sum_squares(w3_drift),
        g.sum_squares(w3_keep),
    ];
    Ok(g.add_all(&terms)?)
}

/// `Ŵ − W = u wᵀ` on the FFN output matrix of `layer`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankOneUpdate {
    pub layer: usize,
    pub u: Vec<f64>,
    pub w: Vec<f64>,
}

impl RankOneUpdate {
    pub fn delta(&self) -> Tensor {
        Tensor::outer(&self.u, &self.w)
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.u) * norm(&self.w)
    }

    pub fn apply_to(&self, w: &Tensor) -> Result<Tensor> {
        Ok(w.add(&self.delta())?)
    }
}

/// Replaces the edit-layer `W_out` of a copy of `model`.
pub fn apply_edit(model: &TransformerLm, layer: usize, w_hat: Tensor) -> Result<TransformerLm> {
    model.with_w_out(layer, w_hat)
}

pub fn apply_updates(model: &TransformerLm, updates: &[RankOneUpdate]) -> Result<TransformerLm> {
    let mut out = model.clone();
    for u in updates {
        let w_hat = u.apply_to(out.w_out(u.layer)?)?;
        out = out.with_w_out(u.layer, w_hat)?;
    }
    Ok(out)
}

// ------------------------------------------------------ value search

/// One prompt whose subject-token state at the edit layer is replaced.
#[derive(Debug, Clone)]
pub struct ShiftSite {
    pub tokens: Vec<usize>,
    pub subject_pos: usize,
    /// `h^{l}` of the unhooked forward, all positions.
    pub stream: Tensor,
    pub h_s: Vec<f64>,
    /// FFN output of the edit layer at the subject token.
    pub v_s: Vec<f64>,
    pub h_r: Vec<f64>,
    pub target: usize,
}

impl ShiftSite {
    pub fn new(
        model: &TransformerLm,
        prompt: &Prompt,
        layer: usize,
        relation_layer: usize,
        target: usize,
    ) -> Result<Self> {
        model.w_out(layer)?;
        if target >= model.vocab_size {
            return Err(config_err(format!("target token {target} outside vocabulary")));
        }
        let (_, trace) = model.forward(&prompt.tokens, None)?;
        let pos = prompt.subject_pos();
        Ok(Self {
            tokens: prompt.tokens.clone(),
            subject_pos: pos,
            stream: trace.hidden[layer].clone(),
            h_s: trace.h(layer, pos).to_vec(),
            v_s: trace.v(layer, pos).to_vec(),
            h_r: trace.h(relation_layer, prompt.last_pos()).to_vec(),
            target,
        })
    }
}

/// Where the optimized shift is added.
#[derive(Debug, Clone, Copy)]
pub enum ShiftSpace<'k> {
    /// `h* = Rec(z_r + δ, z_u)` with the components of the first site.
    Related(&'k KrdState),
    /// `h* = h_s + δ` at every site.
    Residual,
}

fn row_const(g: &mut Graph<'_>, v: &[f64]) -> Var {
    g.constant(Tensor::row(v.to_vec()))
}

/// Sum over sites of the target cross-entropy with the subject state of
/// each site replaced.
pub fn shift_loss_var(
    g: &mut Graph<'_>,
    model: &TransformerLm,
    bound: &Bound,
    layer: usize,
    space: ShiftSpace<'_>,
    sites: &[ShiftSite],
    delta: Var,
) -> Result<Var> {
    let related = match space {
        ShiftSpace::Related(krd) => {
            let pair = krd.disentangle(&sites[0].h_s, &sites[0].h_r)?;
            let z_r = row_const(g, &pair.z_r);
            let z_u = row_const(g, &pair.z_u);
            let shifted = g.add(z_r, delta)?;
            let w5 = g.constant(krd.w[4].clone());
            let w6 = g.constant(krd.w[5].clone());
            let a = g.matmul_nt(shifted, w5)?;
            let b = g.matmul_nt(z_u, w6)?;
            Some(g.add(a, b)?)
        }
        ShiftSpace::Residual => None,
    };
    let mut by_len: std::collections::BTreeMap<usize, Vec<&ShiftSite>> = Default::default();
    for site in sites {
        by_len.entry(site.tokens.len()).or_default().push(site);
    }
    let mut terms = Vec::with_capacity(by_len.len());
    for (len, group) in by_len {
        let mut data = Vec::with_capacity(group.len() * len * model.arch.d_model);
        for site in &group {
            data.extend_from_slice(site.stream.data());
        }
        let mut x = g.constant(Tensor::matrix(group.len() * len, model.arch.d_model, data)?);
        for (j, site) in group.iter().enumerate() {
            let h_star = match related {
                Some(h) => h,
                None => {
                    let h = row_const(g, &site.h_s);
                    g.add(h, delta)?
                }
            };
            x = g.set_rows(x, &[j * len + site.subject_pos], h_star)?;
        }
        let last = model.stream(g, bound, x, layer, len, None, None)?;
        let rows: Vec<usize> = (0..group.len()).map(|j| j * len + len - 1).collect();
        let targets: Vec<usize> = group.iter().map(|s| s.target).collect();
        let logits = model.logits_at(g, bound, last, Some(&rows))?;
        let mean = g.cross_entropy(logits, &targets)?;
        terms.push(g.scale(mean, group.len() as f64));
    }
    Ok(g.add_all(&terms)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftOutcome {
    pub delta: Vec<f64>,
    /// Edited subject representation at the first site.
    pub h_star: Vec<f64>,
    pub initial_loss: f64,
    pub loss: f64,
    pub steps: usize,
    /// Step budget ran out with the loss above ten times the threshold.
    pub warning: bool,
}

/// AdamW on `δ` until the loss drops below `early_stop` or `max_steps`
/// updates have been taken.
pub fn optimize_shift(
    model: &TransformerLm,
    layer: usize,
    space: ShiftSpace<'_>,
    sites: &[ShiftSite],
    cfg: &EditConfig,
) -> Result<ShiftOutcome> {
    cfg.validate()?;
    if sites.is_empty() {
        return Err(config_err("shift optimization needs at least one prompt"));
    }
    let d = model.arch.d_model;
    if let ShiftSpace::Related(krd) = space {
        if krd.width() != d || krd.subject_layer != layer {
            return Err(config_err(format!(
                "disentangler (width {}, layer {}) does not match the edit (width {d}, layer {layer})",
                krd.width(),
                krd.subject_layer
            )));
        }
    }
    let mut delta = Tensor::zeros(&[1, d]);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: cfg.lr,
            ..Default::default()
        },
        &[&[1, d]],
    );
    let mut initial_loss = f64::NAN;
    let mut loss;
    let mut steps = 0;
    loop {
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let dv = g.param(delta.clone());
        let out = shift_loss_var(&mut g, model, &bound, layer, space, sites, dv)?;
        loss = g.value(out).item();
        if !loss.is_finite() {
            return Err(CoreError::Divergence {
                what: "value optimization",
                step: steps,
                value: loss,
            });
        }
        if steps == 0 {
            initial_loss = loss;
        }
        if loss < cfg.early_stop || steps >= cfg.max_steps {
            break;
        }
        let mut grads = g.backward(out)?;
        let grad = grads.take(dv).unwrap_or_else(|| Tensor::zeros(&[1, d]));
        drop(g);
        opt.step(&mut [&mut delta], &[&grad])?;
        steps += 1;
    }
    let delta = delta.into_data();
    let h_star = match space {
        ShiftSpace::Related(krd) => {
            let pair = krd.disentangle(&sites[0].h_s, &sites[0].h_r)?;
            let z: Vec<f64> = pair.z_r.iter().zip(&delta).map(|(a, b)| a + b).collect();
            krd.recompose(&z, &pair.z_u)?
        }
        ShiftSpace::Residual => sites[0].h_s.iter().zip(&delta).map(|(a, b)| a + b).collect(),
    };
    let warning = loss > 10.0 * cfg.early_stop;
    if warning {
        warn!("value optimization stopped at loss {loss:.4} after {steps} steps");
    }
    Ok(ShiftOutcome {
        delta,
        h_star,
        initial_loss,
        loss,
        steps,
        warning,
    })
}

/// DiKE value search: `δ` on the related component of the canonical prompt.
pub fn optimize_delta(
    model: &TransformerLm,
    krd: &KrdState,
    world: &World,
    edit: &EditRequest,
    cfg: &EditConfig,
) -> Result<(ShiftSite, ShiftOutcome)> {
    let prompt = world.canonical_prompt(edit.subject, edit.relation);
    let site = ShiftSite::new(model, &prompt, krd.subject_layer, krd.relation_layer, edit.new_object)?;
    let out = optimize_shift(
        model,
        krd.subject_layer,
        ShiftSpace::Related(krd),
        std::slice::from_ref(&site),
        cfg,
    )?;
    Ok((site, out))
}

/// Constrained value search: the shift must also keep each constraint
/// triple's own object, read at its own subject token.
pub fn constrained_value_variant(
    model: &TransformerLm,
    world: &World,
    edit: &EditRequest,
    constraints: &[Triple],
    layer: usize,
    cfg: &EditConfig,
) -> Result<(ShiftSite, ShiftOutcome)> {
    if constraints.is_empty() {
        return Err(config_err("constrained editing needs at least one constraint triple"));
    }
    if let Some(t) = constraints.iter().find(|t| t.subject != edit.subject) {
        return Err(config_err(format!(
            "constraint on subject {} differs from edited subject {}",
            t.subject, edit.subject
        )));
    }
    let mut sites = vec![ShiftSite::new(
        model,
        &world.canonical_prompt(edit.subject, edit.relation),
        layer,
        layer,
        edit.new_object,
    )?];
    for t in constraints {
        sites.push(ShiftSite::new(
            model,
            &world.canonical_prompt(t.subject, t.relation),
            layer,
            layer,
            t.object,
        )?);
    }
    let out = optimize_shift(model, layer, ShiftSpace::Residual, &sites, cfg)?;
    let site = sites.swap_remove(0);
    Ok((site, out))
}

/// `h_s^p = h_s − v_s` and `v* = h* − h_s^p`.
pub fn compute_value(h_s: &[f64], v_s: &[f64], h_star: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    check_width("compute_value", h_s.len(), &[v_s, h_star])?;
    let h_p: Vec<f64> = h_s.iter().zip(v_s).map(|(a, b)| a - b).collect();
    let v_star = h_star.iter().zip(&h_p).map(|(a, b)| a - b).collect();
    Ok((v_star, h_p))
}

// ------------------------------------------------------------ editors

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditComputation {
    pub k_star: Vec<f64>,
    pub v_star: Vec<f64>,
    pub delta: Vec<f64>,
    pub h_star: Vec<f64>,
    pub h_s: Vec<f64>,
    pub h_p: Vec<f64>,
    /// `W k*` before the edit.
    pub v0: Vec<f64>,
    pub n_prefixes: usize,
    pub initial_loss: f64,
    pub loss: f64,
    pub steps: usize,
    pub warning: bool,
}

/// Per-edit record written next to edited snapshots.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub editor: EditorKind,
    pub position: usize,
    pub edit: EditRequest,
    pub delta_norm: f64,
    pub initial_loss: f64,
    pub loss: f64,
    pub steps: usize,
    pub warning: bool,
    pub update_norm: f64,
    pub lambda: f64,
    pub ridge: f64,
    pub n_prefixes: usize,
    pub seed: u64,
}

/// Everything one editor needs besides the model being edited.
#[derive(Debug, Clone)]
pub struct Editor<'a> {
    pub kind: EditorKind,
    pub cfg: &'a EditConfig,
    pub krd: &'a KrdState,
    pub preservation: &'a PreservationSet,
    /// Factor of `W3ᵀW3 + I`; `None` applies the update as if `W3 = 0`.
    gram: Option<Cholesky>,
}

impl<'a> Editor<'a> {
    /// The edit layer and relation layer are the disentangler's. `zero_w3`
    /// drops the unrelated-component term from the DiKE closed form.
    pub fn new(
        kind: EditorKind,
        cfg: &'a EditConfig,
        krd: &'a KrdState,
        preservation: &'a PreservationSet,
        zero_w3: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        let gram = if kind == EditorKind::Dike && !zero_w3 {
            Some(Cholesky::factor(&unrelated_gram(krd.weight(3))?)?)
        } else {
            None
        };
        Ok(Self {
            kind,
            cfg,
            krd,
            preservation,
            gram,
        })
    }

    pub fn layer(&self) -> usize {
        self.krd.subject_layer
    }

    pub fn compute(
        &self,
        model: &TransformerLm,
        world: &World,
        edit: &EditRequest,
        constraints: &[Triple],
    ) -> Result<EditComputation> {
        let layer = self.layer();
        let w = model.w_out(layer)?;
        if self.preservation.width() != model.arch.d_ff {
            return Err(config_err("covariance width does not match the model's d_ff"));
        }
        let prompts = key_prompts(world, edit.subject, edit.relation, self.cfg.n_prefixes, self.cfg.seed);
        let k_star = compute_key(model, &prompts, layer)?;
        let (site, out) = match self.kind {
            EditorKind::Dike => optimize_delta(model, self.krd, world, edit, self.cfg)?,
            EditorKind::Memit => {
                let prompt = world.canonical_prompt(edit.subject, edit.relation);
                let site = ShiftSite::new(model, &prompt, layer, self.krd.relation_layer, edit.new_object)?;
                let out = optimize_shift(
                    model,
                    layer,
                    ShiftSpace::Residual,
                    std::slice::from_ref(&site),
                    self.cfg,
                )?;
                (site, out)
            }
            EditorKind::MemitConstrained => {
                constrained_value_variant(model, world, edit, constraints, layer, self.cfg)?
            }
        };
        let (v_star, h_p) = compute_value(&site.h_s, &site.v_s, &out.h_star)?;
        Ok(EditComputation {
            v0: matvec(w, &k_star),
            k_star,
            v_star,
            delta: out.delta,
            h_star: out.h_star,
            h_s: site.h_s,
            h_p,
            n_prefixes: prompts.len(),
            initial_loss: out.initial_loss,
            loss: out.loss,
            steps: out.steps,
            warning: out.warning,
        })
    }

    /// Closed-form update for a computed edit against the current `W`.
    pub fn update(&self, model: &TransformerLm, comp: &EditComputation) -> Result<RankOneUpdate> {
        let w = model.w_out(self.layer())?;
        let r: Vec<f64> = comp
            .v_star
            .iter()
            .zip(matvec(w, &comp.k_star))
            .map(|(a, b)| a - b)
            .collect();
        let b = self.preservation.key_direction(&comp.k_star)?;
        let u = match &self.gram {
            Some(f) => f.solve_vec(&r)?,
            None => r,
        };
        Ok(RankOneUpdate {
            layer: self.layer(),
            u,
            w: b,
        })
    }

    /// Applies `edits` one after another, each computed on the model left
    /// by the previous ones.
    pub fn apply_batch(
        &self,
        model: &TransformerLm,
        world: &World,
        edits: &[EditRequest],
        constraints: &[Triple],
    ) -> Result<(TransformerLm, Vec<RankOneUpdate>, Vec<EditReport>)> {
        let mut order: Vec<usize> = (0..edits.len()).collect();
        if self.cfg.order == EditOrder::Reverse {
            order.reverse();
        }
        let mut current = model.clone();
        let mut updates = Vec::with_capacity(edits.len());
        let mut reports = Vec::with_capacity(edits.len());
        for (position, &i) in order.iter().enumerate() {
            let edit = &edits[i];
            let comp = self.compute(&current, world, edit, constraints)?;
            let upd = self.update(&current, &comp)?;
            current = apply_updates(&current, std::slice::from_ref(&upd))?;
            reports.push(EditReport {
                editor: self.kind,
                position,
                edit: *edit,
                delta_norm: norm(&comp.delta),
                initial_loss: comp.initial_loss,
                loss: comp.loss,
                steps: comp.steps,
                warning: comp.warning,
                update_norm: upd.frobenius_norm(),
                lambda: self.preservation.lambda,
                ridge: self.preservation.ridge,
                n_prefixes: comp.n_prefixes,
                seed: self.cfg.seed,
            });
            updates.push(upd);
        }
        Ok((current, updates, reports))
    }

    /// Edited models for each prefix `edits[..size]`, sizes ascending. In
    /// forward order the prefixes share one sequential pass.
    pub fn apply_nested(
        &self,
        model: &TransformerLm,
        world: &World,
        edits: &[EditRequest],
        constraints: &[Triple],
        sizes: &[usize],
    ) -> Result<Vec<(usize, TransformerLm, Vec<RankOneUpdate>, Vec<EditReport>)>> {
        if sizes.windows(2).any(|w| w[0] >= w[1]) || sizes.iter().any(|&n| n == 0 || n > edits.len()) {
            return Err(config_err(format!(
                "batch sizes {sizes:?} must ascend within 1..={}",
                edits.len()
            )));
        }
        if self.cfg.order == EditOrder::Reverse {
            return sizes
                .iter()
                .map(|&n| {
                    let (m, u, r) = self.apply_batch(model, world, &edits[..n], constraints)?;
                    Ok((n, m, u, r))
                })
                .collect();
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut current = model.clone();
        let mut updates = Vec::new();
        let mut reports = Vec::new();
        let mut done = 0;
        for &n in sizes {
            let (m, u, r) = self.apply_batch(&current, world, &edits[done..n], constraints)?;
            current = m;
            updates.extend(u);
            reports.extend(r.into_iter().map(|mut rep| {
                rep.position += done;
                rep
            }));
            done = n;
            out.push((n, current.clone(), updates.clone(), reports.clone()));
        }
        Ok(out)
    }
}
