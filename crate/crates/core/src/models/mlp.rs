use serde::{Deserialize, Serialize};

use super::layers::{CatEmbeddings, Linear};
use super::{check_rate, FeatureLayout, ForwardCtx};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    /// Hidden layer widths.
    pub layers: Vec<usize>,
    pub dropout: f64,
    #[serde(default = "default_embedding")]
    pub d_embedding: usize,
}

fn default_embedding() -> usize {
    8
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig { layers: vec![256, 256, 256], dropout: 0.1, d_embedding: default_embedding() }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.contains(&0) || self.d_embedding == 0 {
            return Err(Error::config("layers", "layer sizes must be positive"));
        }
        check_rate("dropout", self.dropout)
    }
}

/// `Dropout(ReLU(Linear(x)))` blocks followed by a linear head.
#[derive(Debug, Clone)]
pub struct Mlp {
    cfg: MlpConfig,
    embeddings: CatEmbeddings,
    blocks: Vec<Linear>,
    head: Linear,
}

impl Mlp {
    pub(crate) fn new(cfg: &MlpConfig, layout: &FeatureLayout, d_out: usize, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        let embeddings = CatEmbeddings::new(store, &layout.cardinalities, cfg.d_embedding, rng)?;
        let mut d_in = layout.k_num + embeddings.width();
        let mut blocks = Vec::with_capacity(cfg.layers.len());
        for (i, &w) in cfg.layers.iter().enumerate() {
            blocks.push(Linear::new(store, &format!("blocks.{i}.linear"), d_in, w, true, rng)?);
            d_in = w;
        }
        let head = Linear::new(store, "head", d_in, d_out, true, rng)?;
        Ok(Mlp { cfg: cfg.clone(), embeddings, blocks, head })
    }

    pub(crate) fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        x_num: Var,
        x_cat: &[usize],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let mut x = self.embeddings.input(tape, store, x_num, x_cat)?;
        for block in &self.blocks {
            x = block.forward(tape, store, x)?;
            x = tape.relu(x);
            x = ctx.dropout(tape, x, self.cfg.dropout)?;
        }
        self.head.forward(tape, store, x)
    }
}
