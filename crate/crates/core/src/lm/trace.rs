use std::collections::BTreeMap;

use kedit_numerics::graph::Graph;
use kedit_numerics::{log_sum_exp, Tensor};

use super::model::{GraphHook, TransformerLm};
use crate::error::{config_err, data_err, Result};
use crate::util::argmax;
use crate::world::Prompt;

/// Replaces the residual stream `h^layer` at `position` with `value`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubstitutionHook {
    pub layer: usize,
    pub position: usize,
    pub value: Vec<f64>,
}

/// Residual-stream record of one forward pass over `n` stacked rows.
///
/// `hidden[l]` is `h^l` (`hidden[0]` the embeddings); `attn[l-1]`,
/// `ffn_out[l-1]` and `ffn_inner[l-1]` are `a^l`, `v^l` and the inner FFN
/// activation `f(W_in·…)` of layer `l`. Hidden states are recorded after any
/// substitution.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub hidden: Vec<Tensor>,
    pub attn: Vec<Tensor>,
    pub ffn_out: Vec<Tensor>,
    pub ffn_inner: Vec<Tensor>,
}

impl ForwardTrace {
    pub fn h(&self, layer: usize, row: usize) -> &[f64] {
        self.hidden[layer].row_slice(row)
    }

    pub fn a(&self, layer: usize, row: usize) -> &[f64] {
        self.attn[layer - 1].row_slice(row)
    }

    pub fn v(&self, layer: usize, row: usize) -> &[f64] {
        self.ffn_out[layer - 1].row_slice(row)
    }

    pub fn k(&self, layer: usize, row: usize) -> &[f64] {
        self.ffn_inner[layer - 1].row_slice(row)
    }

    /// Largest deviation of `h^l` from `(h^{l−1} + a^l) + v^l`, evaluated in
    /// the order the forward pass sums. Rows listed in `substituted` as
    /// `(layer, row)` are skipped.
    pub fn residual_defect(&self, substituted: &[(usize, usize)]) -> f64 {
        let mut worst: f64 = 0.0;
        for l in 1..self.hidden.len() {
            for row in 0..self.hidden[l].rows() {
                if substituted.contains(&(l, row)) {
                    continue;
                }
                let hp = self.h(l - 1, row);
                for (j, &h) in self.h(l, row).iter().enumerate() {
                    let rebuilt = (hp[j] + self.a(l, row)[j]) + self.v(l, row)[j];
                    worst = worst.max((h - rebuilt).abs());
                }
            }
        }
        worst
    }
}

/// Softmax of a logit row.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|x| (x - lse).exp()).collect()
}

impl TransformerLm {
    /// Logits `(len × vocab)` and the full trace of one sequence.
    pub fn forward(&self, tokens: &[usize], hook: Option<&SubstitutionHook>) -> Result<(Tensor, ForwardTrace)> {
        let hooks: Vec<(usize, Vec<f64>)> = hook.map(|h| (h.position, h.value.clone())).into_iter().collect();
        self.forward_batch(&[tokens], hook.map(|h| h.layer), &hooks)
    }

    /// Stacked forward over equal-length sequences. `hooks` lists
    /// `(row, value)` substitutions in `h^hook_layer`, rows counted over the
    /// stacked batch.
    pub fn forward_batch(
        &self,
        seqs: &[&[usize]],
        hook_layer: Option<usize>,
        hooks: &[(usize, Vec<f64>)],
    ) -> Result<(Tensor, ForwardTrace)> {
        let len = self.check_tokens(seqs)?;
        let n = seqs.len() * len;
        let d = self.arch.d_model;
        let mut g = Graph::new();
        let b = self.bind(&mut g, false);
        let x = self.embed(&mut g, &b, seqs)?;
        let rows: Vec<usize> = hooks.iter().map(|h| h.0).collect();
        let hook = match hook_layer {
            Some(layer) if !hooks.is_empty() => {
                if layer > self.arch.n_layers {
                    return Err(config_err(format!("hook layer {layer} exceeds {}", self.arch.n_layers)));
                }
                if let Some(&r) = rows.iter().find(|&&r| r >= n) {
                    return Err(config_err(format!("hook position {r} outside sequence of {n} rows")));
                }
                let mut data = Vec::with_capacity(hooks.len() * d);
                for (_, v) in hooks {
                    if v.len() != d {
                        return Err(config_err(format!("hook vector has width {}, model {d}", v.len())));
                    }
                    data.extend_from_slice(v);
                }
                let values = g.constant(Tensor::matrix(hooks.len(), d, data)?);
                Some(GraphHook {
                    layer,
                    rows: &rows,
                    values,
                })
            }
            _ => None,
        };
        let mut layers = Vec::with_capacity(self.arch.n_layers);
        let x = if let Some(h) = hook.filter(|h| h.layer == 0) {
            g.set_rows(x, h.rows, h.values)?
        } else {
            x
        };
        let h0 = x;
        let hook_rest = hook.filter(|h| h.layer > 0);
        let last = self.stream(&mut g, &b, x, 0, len, hook_rest, Some(&mut layers))?;
        let logits = self.logits_at(&mut g, &b, last, None)?;
        let mut hidden = vec![g.value(h0).clone()];
        hidden.extend(layers.iter().map(|l| g.value(l.hidden).clone()));
        let trace = ForwardTrace {
            hidden,
            attn: layers.iter().map(|l| g.value(l.attn).clone()).collect(),
            ffn_out: layers.iter().map(|l| g.value(l.ffn_out).clone()).collect(),
            ffn_inner: layers.iter().map(|l| g.value(l.ffn_inner).clone()).collect(),
        };
        Ok((g.value(logits).clone(), trace))
    }

    /// Final-position logits of many prompts, batched by length.
    pub fn last_logits_many(&self, seqs: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        const CHUNK: usize = 128;
        let mut by_len: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, s) in seqs.iter().enumerate() {
            by_len.entry(s.len()).or_default().push(i);
        }
        let mut out = vec![Vec::new(); seqs.len()];
        for (len, idx) in by_len {
            for chunk in idx.chunks(CHUNK) {
                let batch: Vec<&[usize]> = chunk.iter().map(|&i| seqs[i]).collect();
                let mut g = Graph::new();
                let b = self.bind(&mut g, false);
                let x = self.embed(&mut g, &b, &batch)?;
                let last = self.stream(&mut g, &b, x, 0, len, None, None)?;
                let rows: Vec<usize> = (0..batch.len()).map(|i| i * len + len - 1).collect();
                let logits = self.logits_at(&mut g, &b, last, Some(&rows))?;
                for (k, &i) in chunk.iter().enumerate() {
                    out[i] = g.value(logits).row_slice(k).to_vec();
                }
            }
        }
        Ok(out)
    }

    pub fn last_logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        Ok(self.last_logits_many(&[tokens])?.remove(0))
    }

    /// Next-token distribution after the prompt.
    pub fn next_token_probs(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        Ok(softmax(&self.last_logits(tokens)?))
    }

    /// `P(token | prompt)` at the final position.
    pub fn recall_prob(&self, tokens: &[usize], token: usize) -> Result<f64> {
        if token >= self.vocab_size {
            return Err(data_err(format!("token {token} outside vocabulary")));
        }
        Ok(self.next_token_probs(tokens)?[token])
    }

    /// Greedy next token; ties resolve to the lowest id.
    pub fn predict(&self, tokens: &[usize]) -> Result<usize> {
        Ok(argmax(&self.last_logits(tokens)?))
    }

    pub fn predict_many(&self, seqs: &[&[usize]]) -> Result<Vec<usize>> {
        Ok(self.last_logits_many(seqs)?.iter().map(|l| argmax(l)).collect())
    }

    /// `(h_s, h_r)`: stream `h^{l_s}` at the last subject token and `h^{l_r}`
    /// at the last prompt token.
    pub fn extract_reps(
        &self,
        prompt: &Prompt,
        subject_layer: usize,
        relation_layer: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        validate_prompt(prompt)?;
        for l in [subject_layer, relation_layer] {
            if l > self.arch.n_layers {
                return Err(config_err(format!("layer {l} exceeds {}", self.arch.n_layers)));
            }
        }
        let (_, trace) = self.forward(&prompt.tokens, None)?;
        Ok((
            trace.h(subject_layer, prompt.subject_pos()).to_vec(),
            trace.h(relation_layer, prompt.last_pos()).to_vec(),
        ))
    }
}

pub(crate) fn validate_prompt(p: &Prompt) -> Result<()> {
    if p.tokens.is_empty() {
        return Err(data_err("empty prompt"));
    }
    if p.subject_end <= p.subject_start || p.subject_end > p.tokens.len() {
        return Err(data_err(format!(
            "prompt lacks a valid subject span ({}..{} in {} tokens)",
            p.subject_start,
            p.subject_end,
            p.tokens.len()
        )));
    }
    Ok(())
}
