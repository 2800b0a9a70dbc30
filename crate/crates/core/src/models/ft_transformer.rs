//! Feature Tokenizer + Transformer.

use serde::{Deserialize, Serialize};

use super::layers::{uniform, LayerNorm, Linear};
use super::{check_rate, FeatureLayout, ForwardCtx};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::{ParamId, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FtTransformerConfig {
    pub n_layers: usize,
    pub d_token: usize,
    pub n_heads: usize,
    /// FFN hidden size is `round(ffn_factor · d_token)`.
    pub ffn_factor: f64,
    pub attention_dropout: f64,
    pub ffn_dropout: f64,
    pub residual_dropout: f64,
    /// Per-feature token biases (ablation switch).
    #[serde(default = "default_true")]
    pub token_bias: bool,
}

fn default_true() -> bool {
    true
}

impl Default for FtTransformerConfig {
    fn default() -> Self {
        FtTransformerConfig {
            n_layers: 3,
            d_token: 192,
            n_heads: 8,
            ffn_factor: 4.0 / 3.0,
            attention_dropout: 0.2,
            ffn_dropout: 0.1,
            residual_dropout: 0.0,
            token_bias: true,
        }
    }
}

impl FtTransformerConfig {
    pub fn ffn_hidden(&self) -> usize {
        (self.ffn_factor * self.d_token as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 {
            return Err(Error::config("n_layers", "need at least one layer"));
        }
        if self.d_token == 0 || self.n_heads == 0 {
            return Err(Error::config("d_token", "token width and head count must be positive"));
        }
        if !self.d_token.is_multiple_of(self.n_heads) {
            return Err(Error::config(
                "n_heads",
                format!("d_token {} is not divisible by n_heads {}", self.d_token, self.n_heads),
            ));
        }
        if !(self.ffn_factor > 0.0) || self.ffn_hidden() == 0 {
            return Err(Error::config("ffn_factor", "FFN hidden size must be positive"));
        }
        check_rate("attention_dropout", self.attention_dropout)?;
        check_rate("ffn_dropout", self.ffn_dropout)?;
        check_rate("residual_dropout", self.residual_dropout)
    }
}

/// CLS-query attention probabilities of one layer, before attention dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub batch: usize,
    pub n_heads: usize,
    /// Key count, CLS included at index 0.
    pub n_tokens: usize,
    /// `[batch, n_heads, n_tokens]`.
    pub probs: Vec<f64>,
}

impl AttentionRecord {
    pub fn row(&self, b: usize, h: usize) -> &[f64] {
        let t = self.n_tokens;
        &self.probs[(b * self.n_heads + h) * t..(b * self.n_heads + h + 1) * t]
    }
}

#[derive(Debug, Clone)]
pub(crate) struct FeatureTokenizer {
    num_weight: Option<ParamId>,
    num_bias: Option<ParamId>,
    cat_tables: Vec<ParamId>,
    cat_bias: Option<ParamId>,
    pub cls: ParamId,
    d: usize,
}

impl FeatureTokenizer {
    fn new(layout: &FeatureLayout, d: usize, bias: bool, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (d as f64).sqrt();
        let (k_num, k_cat) = (layout.k_num, layout.k_cat());
        let mut num_weight = None;
        let mut num_bias = None;
        if k_num > 0 {
            num_weight = Some(store.add("tokenizer.num_weight", uniform(&[k_num, d], bound, rng))?);
            if bias {
                num_bias = Some(store.add("tokenizer.num_bias", uniform(&[k_num, d], bound, rng))?);
            }
        }
        let mut cat_tables = Vec::with_capacity(k_cat);
        for (j, &s) in layout.cardinalities.iter().enumerate() {
            cat_tables.push(store.add(format!("tokenizer.cat_weight.{j}"), uniform(&[s, d], bound, rng))?);
        }
        let cat_bias = if bias && k_cat > 0 {
            Some(store.add("tokenizer.cat_bias", uniform(&[k_cat, d], bound, rng))?)
        } else {
            None
        };
        let cls = store.add("tokenizer.cls", uniform(&[d], bound, rng))?;
        Ok(FeatureTokenizer { num_weight, num_bias, cat_tables, cat_bias, cls, d })
    }

    /// `[b, k_num + k_cat, d]`, numerical tokens first.
    fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x_num: Var, x_cat: &[usize]) -> Result<Var> {
        let b = tape.shape(x_num)[0];
        let mut parts = Vec::new();
        if let Some(w) = self.num_weight {
            let w = tape.param(w, store.tensor(w));
            let mut t = tape.token_scale(x_num, w)?;
            if let Some(bias) = self.num_bias {
                let bias = tape.param(bias, store.tensor(bias));
                t = tape.add_trailing(t, bias)?;
            }
            parts.push(t);
        }
        let k_cat = self.cat_tables.len();
        if k_cat > 0 {
            let mut cols = Vec::with_capacity(k_cat);
            for (j, &table) in self.cat_tables.iter().enumerate() {
                let idx: Vec<usize> = (0..b).map(|r| x_cat[r * k_cat + j]).collect();
                let table = tape.param(table, store.tensor(table));
                let e = tape.embedding(table, &idx)?;
                cols.push(tape.reshape(e, vec![b, 1, self.d])?);
            }
            let mut t = if cols.len() == 1 { cols[0] } else { tape.concat(&cols, 1)? };
            if let Some(bias) = self.cat_bias {
                let bias = tape.param(bias, store.tensor(bias));
                t = tape.add_trailing(t, bias)?;
            }
            parts.push(t);
        }
        match parts.len() {
            0 => tape.constant(vec![b, 0, self.d], Vec::new()),
            1 => Ok(parts[0]),
            _ => tape.concat(&parts, 1),
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    n_heads: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, d: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng)?,
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng)?,
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng)?,
            out: Linear::new(store, &format!("{name}.out"), d, d, true, rng)?,
            n_heads,
        })
    }

    /// Queries from `x_q[b, tq, d]`, keys and values from `x_kv[b, t, d]`.
    /// Returns the output and the fused attention node.
    fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        x_q: Var,
        x_kv: Var,
        dropout: f64,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(Var, Var)> {
        let q = self.q.forward(tape, store, x_q)?;
        let k = self.k.forward(tape, store, x_kv)?;
        let v = self.v.forward(tape, store, x_kv)?;
        let rng = ctx.dropout_rng(dropout)?;
        let o = tape.attention(q, k, v, self.n_heads, rng.map(|r| (dropout, r)))?;
        Ok((self.out.forward(tape, store, o)?, o))
    }
}

#[derive(Debug, Clone)]
struct Block {
    attention_norm: Option<LayerNorm>,
    attention: Attention,
    ffn_norm: LayerNorm,
    linear1: Linear,
    linear2: Linear,
}

/// FT-Transformer: tokenizer, CLS token, PreNorm blocks and a CLS head.
#[derive(Debug, Clone)]
pub struct FtTransformer {
    cfg: FtTransformerConfig,
    tokenizer: FeatureTokenizer,
    blocks: Vec<Block>,
    head_norm: LayerNorm,
    head: Linear,
}

impl FtTransformer {
    pub(crate) fn new(
        cfg: &FtTransformerConfig,
        layout: &FeatureLayout,
        d_out: usize,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        let d = cfg.d_token;
        let h = cfg.ffn_hidden();
        let tokenizer = FeatureTokenizer::new(layout, d, cfg.token_bias, store, rng)?;
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("layers.{l}");
            blocks.push(Block {
                // the first block attends over raw tokens
                attention_norm: if l == 0 { None } else { Some(LayerNorm::new(store, &format!("{p}.attention_norm"), d)?) },
                attention: Attention::new(store, &format!("{p}.attention"), d, cfg.n_heads, rng)?,
                ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), d)?,
                linear1: Linear::new(store, &format!("{p}.ffn.linear1"), d, 2 * h, true, rng)?,
                linear2: Linear::new(store, &format!("{p}.ffn.linear2"), h, d, true, rng)?,
            });
        }
        let head_norm = LayerNorm::new(store, "head.norm", d)?;
        let head = Linear::new(store, "head.linear", d, d_out, true, rng)?;
        Ok(FtTransformer { cfg: cfg.clone(), tokenizer, blocks, head_norm, head })
    }

    pub(crate) fn tokenize<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x_num: Var, x_cat: &[usize]) -> Result<Var> {
        self.tokenizer.forward(tape, store, x_num, x_cat)
    }

    pub(crate) fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        x_num: Var,
        x_cat: &[usize],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let b = tape.shape(x_num)[0];
        let d = self.cfg.d_token;
        let tokens = self.tokenizer.forward(tape, store, x_num, x_cat)?;
        let cls = tape.param(self.tokenizer.cls, store.tensor(self.tokenizer.cls));
        let mut x = tape.prepend_row(tokens, cls)?;
        let n_tokens = tape.shape(x)[1];
        for (l, block) in self.blocks.iter().enumerate() {
            let h = match &block.attention_norm {
                Some(norm) => norm.forward(tape, store, x)?,
                None => x,
            };
            // only the CLS row of the last block reaches the head
            let last = l + 1 == self.blocks.len();
            let (x_res, x_q) = if last && n_tokens > 1 {
                (tape.narrow(x, 0, 1)?, tape.narrow(h, 0, 1)?)
            } else {
                (x, h)
            };
            let (a, probs) = block.attention.forward(tape, store, x_q, h, self.cfg.attention_dropout, ctx)?;
            if ctx.capture_attention {
                ctx.attention.push(cls_rows(tape, probs, l, b, self.cfg.n_heads));
            }
            let a = ctx.dropout(tape, a, self.cfg.residual_dropout)?;
            x = tape.add(x_res, a)?;

            let f = block.ffn_norm.forward(tape, store, x)?;
            let f = block.linear1.forward(tape, store, f)?;
            let f = tape.reglu(f)?;
            let f = ctx.dropout(tape, f, self.cfg.ffn_dropout)?;
            let f = block.linear2.forward(tape, store, f)?;
            let f = ctx.dropout(tape, f, self.cfg.residual_dropout)?;
            x = tape.add(x, f)?;
        }
        let x = tape.narrow(x, 0, 1)?;
        let x = tape.reshape(x, vec![b, d])?;
        let x = self.head_norm.forward(tape, store, x)?;
        let x = tape.relu(x);
        self.head.forward(tape, store, x)
    }
}

fn cls_rows(tape: &Tape<'_>, node: Var, layer: usize, b: usize, n_heads: usize) -> AttentionRecord {
    let tq = tape.shape(node)[1];
    let v = tape.attention_probs(node).expect("an attention node");
    let t = v.len() / (b * n_heads * tq).max(1);
    let mut out = Vec::with_capacity(b * n_heads * t);
    for g in 0..b * n_heads {
        out.extend_from_slice(&v[g * tq * t..g * tq * t + t]);
    }
    AttentionRecord { layer, batch: b, n_heads, n_tokens: t, probs: out }
}
