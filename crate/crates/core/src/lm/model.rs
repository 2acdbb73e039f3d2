use kedit_numerics::graph::{Graph, Var};
use kedit_numerics::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, CoreError, Result};
use crate::util::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmArch {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    /// Lowest blocks whose attention sees only the current position.
    pub local_layers: usize,
    pub max_len: usize,
    pub ln_eps: f64,
}

impl Default for LmArch {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            d_ff: 256,
            n_heads: 4,
            local_layers: 2,
            max_len: 16,
            ln_eps: 1e-5,
        }
    }
}

impl LmArch {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 || self.max_len == 0 {
            return Err(config_err("model extents must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(config_err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.local_layers >= self.n_layers {
            return Err(config_err(format!(
                "local_layers {} leaves no block that mixes positions (n_layers {})",
                self.local_layers, self.n_layers
            )));
        }
        Ok(())
    }
}

/// Pre-norm decoder block. Linear maps are stored `out × in` and applied to
/// row vectors as `x · Wᵀ`, so `v = W_out · k` in column form.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w_in: Tensor,
    pub b_in: Tensor,
    pub w_out: Tensor,
}

const BLOCK_FIELDS: [&str; 11] = [
    "ln1_g", "ln1_b", "w_q", "w_k", "w_v", "w_o", "ln2_g", "ln2_b", "w_in", "b_in", "w_out",
];

impl Block {
    fn fields(&self) -> [&Tensor; 11] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_g,
            &self.ln2_b,
            &self.w_in,
            &self.b_in,
            &self.w_out,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor; 11] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w_in,
            &mut self.b_in,
            &mut self.w_out,
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLm {
    pub arch: LmArch,
    pub vocab_size: usize,
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head: Tensor,
}

/// Graph handles for every parameter of one block.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockVars {
    ln1_g: Var,
    ln1_b: Var,
    w_q: Var,
    w_k: Var,
    w_v: Var,
    w_o: Var,
    ln2_g: Var,
    ln2_b: Var,
    w_in: Var,
    b_in: Var,
    w_out: Var,
}

/// Model parameters bound into a graph.
#[derive(Debug, Clone)]
pub struct Bound {
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<BlockVars>,
    lnf_g: Var,
    lnf_b: Var,
    head: Var,
}

impl Bound {
    /// Vars in the order of [`TransformerLm::named_params`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for b in &self.blocks {
            out.extend([
                b.ln1_g, b.ln1_b, b.w_q, b.w_k, b.w_v, b.w_o, b.ln2_g, b.ln2_b, b.w_in, b.b_in, b.w_out,
            ]);
        }
        out.extend([self.lnf_g, self.lnf_b, self.head]);
        out
    }
}

/// Per-layer graph nodes recorded while streaming through blocks.
#[derive(Debug, Clone, Copy)]
pub struct LayerVars {
    pub attn: Var,
    pub ffn_inner: Var,
    pub ffn_out: Var,
    pub hidden: Var,
}

/// Replacement of rows of the residual stream `h^layer` (layer 0 is the
/// embedding output, layer `l ≥ 1` the output of block `l`).
#[derive(Debug, Clone, Copy)]
pub struct GraphHook<'h> {
    pub layer: usize,
    pub rows: &'h [usize],
    pub values: Var,
}

impl TransformerLm {
    pub fn new(arch: LmArch, vocab_size: usize, seed: u64) -> Result<Self> {
        arch.validate()?;
        if vocab_size == 0 {
            return Err(config_err("vocabulary is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = arch.d_model;
        let ff = arch.d_ff;
        let mut normal = |rows: usize, cols: usize, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(&mut rng)).collect())
                .expect("extents match")
        };
        let lin = |fan_in: usize| 0.5 / (fan_in as f64).sqrt();
        let ones = |n: usize| Tensor::row(vec![1.0; n]);
        let zeros = |n: usize| Tensor::row(vec![0.0; n]);
        let tok_emb = normal(vocab_size, d, 0.1);
        let pos_emb = normal(arch.max_len, d, 0.1);
        let blocks = (0..arch.n_layers)
            .map(|_| Block {
                ln1_g: ones(d),
                ln1_b: zeros(d),
                w_q: normal(d, d, lin(d)),
                w_k: normal(d, d, lin(d)),
                w_v: normal(d, d, lin(d)),
                w_o: normal(d, d, lin(d)),
                ln2_g: ones(d),
                ln2_b: zeros(d),
                w_in: normal(ff, d, lin(d)),
                b_in: zeros(ff),
                w_out: normal(d, ff, lin(ff)),
            })
            .collect();
        let head = normal(vocab_size, d, lin(d));
        Ok(Self {
            lnf_g: ones(d),
            lnf_b: zeros(d),
            head,
            arch,
            vocab_size,
            tok_emb,
            pos_emb,
            blocks,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.arch.n_layers
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("blocks.{i}.{name}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("head".into(), &self.head));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out.push(&mut self.head);
        out
    }

    /// Rebuilds a model from tensors named as in [`named_params`](Self::named_params).
    pub fn from_named(arch: LmArch, vocab_size: usize, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(arch, vocab_size, 0)?;
        let expected: Vec<(String, Vec<usize>)> = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        if tensors.len() < expected.len() {
            return Err(data_err(format!(
                "checkpoint has {} tensors, model needs {}",
                tensors.len(),
                expected.len()
            )));
        }
        for ((slot, (name, shape)), (got_name, t)) in model.params_mut().into_iter().zip(&expected).zip(tensors) {
            if &got_name != name || t.shape() != shape.as_slice() {
                return Err(data_err(format!(
                    "checkpoint tensor {got_name} {:?} does not match {name} {:?}",
                    t.shape(),
                    shape
                )));
            }
            *slot = t;
        }
        Ok(model)
    }

    /// SHA-256 over every parameter's bits, in canonical order.
    pub fn param_hash(&self) -> String {
        let mut bytes = Vec::new();
        for (name, t) in self.named_params() {
            bytes.extend_from_slice(name.as_bytes());
            for x in t.data() {
                bytes.extend_from_slice(&x.to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    /// Checks a 1-based layer number and returns its block index.
    fn block_index(&self, layer: usize) -> Result<usize> {
        if layer == 0 || layer > self.arch.n_layers {
            return Err(config_err(format!(
                "layer {layer} has no FFN; valid layers are 1..={}",
                self.arch.n_layers
            )));
        }
        Ok(layer - 1)
    }

    /// FFN output matrix `W_out` of layer `layer` (1-based): the edited `W`.
    pub fn w_out(&self, layer: usize) -> Result<&Tensor> {
        Ok(&self.blocks[self.block_index(layer)?].w_out)
    }

    /// Copy of the model with layer `layer`'s `W_out` replaced.
    pub fn with_w_out(&self, layer: usize, w_hat: Tensor) -> Result<Self> {
        let i = self.block_index(layer)?;
        if w_hat.shape() != self.blocks[i].w_out.shape() {
            return Err(CoreError::Numerics(kedit_numerics::NumericsError::Dimension {
                op: "apply_edit",
                detail: format!("{:?} vs {:?}", w_hat.shape(), self.blocks[i].w_out.shape()),
            }));
        }
        let mut m = self.clone();
        m.blocks[i].w_out = w_hat;
        Ok(m)
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> Bound {
        let mut bind = |t: &'a Tensor| if trainable { g.param_ref(t) } else { g.constant_ref(t) };
        let tok_emb = bind(&self.tok_emb);
        let pos_emb = bind(&self.pos_emb);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1_g: bind(&b.ln1_g),
                ln1_b: bind(&b.ln1_b),
                w_q: bind(&b.w_q),
                w_k: bind(&b.w_k),
                w_v: bind(&b.w_v),
                w_o: bind(&b.w_o),
                ln2_g: bind(&b.ln2_g),
                ln2_b: bind(&b.ln2_b),
                w_in: bind(&b.w_in),
                b_in: bind(&b.b_in),
                w_out: bind(&b.w_out),
            })
            .collect();
        let lnf_g = bind(&self.lnf_g);
        let lnf_b = bind(&self.lnf_b);
        let head = bind(&self.head);
        Bound {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            head,
        }
    }

    /// Binds copies of every parameter as constants, for graphs that must
    /// outlive the borrow of `self`.
    pub fn bind_owned(&self, g: &mut Graph<'_>) -> Bound {
        let mut bind = |t: &Tensor| g.constant(t.clone());
        let tok_emb = bind(&self.tok_emb);
        let pos_emb = bind(&self.pos_emb);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln1_g: bind(&b.ln1_g),
                ln1_b: bind(&b.ln1_b),
                w_q: bind(&b.w_q),
                w_k: bind(&b.w_k),
                w_v: bind(&b.w_v),
                w_o: bind(&b.w_o),
                ln2_g: bind(&b.ln2_g),
                ln2_b: bind(&b.ln2_b),
                w_in: bind(&b.w_in),
                b_in: bind(&b.b_in),
                w_out: bind(&b.w_out),
            })
            .collect();
        let lnf_g = bind(&self.lnf_g);
        let lnf_b = bind(&self.lnf_b);
        let head = bind(&self.head);
        Bound {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g,
            lnf_b,
            head,
        }
    }

    pub(crate) fn check_tokens(&self, seqs: &[&[usize]]) -> Result<usize> {
        let len = seqs.first().map(|s| s.len()).unwrap_or(0);
        if len == 0 {
            return Err(data_err("empty token sequence"));
        }
        if len > self.arch.max_len {
            return Err(data_err(format!(
                "sequence of {len} tokens exceeds max_len {}",
                self.arch.max_len
            )));
        }
        for s in seqs {
            if s.len() != len {
                return Err(data_err("sequences in one batch must share a length"));
            }
            if let Some(&t) = s.iter().find(|&&t| t >= self.vocab_size) {
                return Err(data_err(format!("token {t} outside vocabulary of {}", self.vocab_size)));
            }
        }
        Ok(len)
    }

    /// Stacked token + position embeddings of equal-length sequences.
    pub fn embed(&self, g: &mut Graph<'_>, b: &Bound, seqs: &[&[usize]]) -> Result<Var> {
        let len = self.check_tokens(seqs)?;
        let toks: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        let pos: Vec<usize> = (0..seqs.len()).flat_map(|_| 0..len).collect();
        let te = g.gather(b.tok_emb, &toks)?;
        let pe = g.gather(b.pos_emb, &pos)?;
        Ok(g.add(te, pe)?)
    }

    fn block(&self, g: &mut Graph<'_>, index: usize, b: &BlockVars, x: Var, seq_len: usize) -> Result<LayerVars> {
        let eps = self.arch.ln_eps;
        let n1 = g.layer_norm(x, b.ln1_g, b.ln1_b, eps)?;
        let v = g.matmul_nt(n1, b.w_v)?;
        // a position attending only to itself puts all weight on its own value
        let att = if index < self.arch.local_layers {
            v
        } else {
            let q = g.matmul_nt(n1, b.w_q)?;
            let k = g.matmul_nt(n1, b.w_k)?;
            g.causal_attention(q, k, v, seq_len, self.arch.n_heads)?
        };
        let attn = g.matmul_nt(att, b.w_o)?;
        let mid = g.add(x, attn)?;
        let n2 = g.layer_norm(mid, b.ln2_g, b.ln2_b, eps)?;
        let pre = g.matmul_nt(n2, b.w_in)?;
        let pre = g.add_row(pre, b.b_in)?;
        let ffn_inner = g.gelu(pre);
        let ffn_out = g.matmul_nt(ffn_inner, b.w_out)?;
        let hidden = g.add(mid, ffn_out)?;
        Ok(LayerVars {
            attn,
            ffn_inner,
            ffn_out,
            hidden,
        })
    }

    /// Runs blocks `from+1 ..= L` on the stream `x = h^from`, applying
    /// `hook` when the stream reaches its layer. Returns `h^L`.
    pub fn stream(
        &self,
        g: &mut Graph<'_>,
        b: &Bound,
        mut x: Var,
        from: usize,
        seq_len: usize,
        hook: Option<GraphHook<'_>>,
        mut record: Option<&mut Vec<LayerVars>>,
    ) -> Result<Var> {
        if let Some(h) = hook {
            if h.layer < from || h.layer > self.arch.n_layers {
                return Err(config_err(format!(
                    "hook layer {} outside {from}..={}",
                    h.layer, self.arch.n_layers
                )));
            }
            if h.layer == from {
                x = g.set_rows(x, h.rows, h.values)?;
            }
        }
        for l in from..self.arch.n_layers {
            let mut lv = self.block(g, l, &b.blocks[l], x, seq_len)?;
            if let Some(h) = hook.filter(|h| h.layer == l + 1) {
                lv.hidden = g.set_rows(lv.hidden, h.rows, h.values)?;
            }
            x = lv.hidden;
            if let Some(r) = record.as_deref_mut() {
                r.push(lv);
            }
        }
        Ok(x)
    }

    /// Final norm and output head on the given rows of `h^L`.
    pub fn logits_at(&self, g: &mut Graph<'_>, b: &Bound, h_last: Var, rows: Option<&[usize]>) -> Result<Var> {
        let x = match rows {
            Some(r) => g.gather(h_last, r)?,
            None => h_last,
        };
        let n = g.layer_norm(x, b.lnf_g, b.lnf_b, self.arch.ln_eps)?;
        Ok(g.matmul_nt(n, b.head)?)
    }
}
