use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, CatEmbeddings, Linear};
use super::{check_rate, FeatureLayout, ForwardCtx};
use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::{BatchNormStats, Tape, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResNetConfig {
    pub n_blocks: usize,
    pub d_main: usize,
    /// Block hidden width is `round(hidden_factor · d_main)`.
    pub hidden_factor: f64,
    pub hidden_dropout: f64,
    pub residual_dropout: f64,
    /// Width of each categorical embedding.
    #[serde(default = "default_embedding")]
    pub d_embedding: usize,
}

fn default_embedding() -> usize {
    8
}

impl Default for ResNetConfig {
    fn default() -> Self {
        ResNetConfig {
            n_blocks: 4,
            d_main: 256,
            hidden_factor: 1.5,
            hidden_dropout: 0.5,
            residual_dropout: 0.0,
            d_embedding: default_embedding(),
        }
    }
}

impl ResNetConfig {
    pub fn d_hidden(&self) -> usize {
        (self.hidden_factor * self.d_main as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_main == 0 || self.d_embedding == 0 {
            return Err(Error::config("d_main", "layer sizes must be positive"));
        }
        if self.n_blocks > 0 && !(self.hidden_factor > 0.0 && self.d_hidden() > 0) {
            return Err(Error::config("hidden_factor", "block hidden size must be positive"));
        }
        check_rate("hidden_dropout", self.hidden_dropout)?;
        check_rate("residual_dropout", self.residual_dropout)
    }
}

#[derive(Debug, Clone)]
struct Block {
    norm: BatchNorm,
    linear1: Linear,
    linear2: Linear,
}

/// `x + Dropout(Linear(Dropout(ReLU(Linear(BatchNorm(x))))))` blocks between
/// an input projection and a `Linear(ReLU(BatchNorm(x)))` head.
#[derive(Debug, Clone)]
pub struct ResNet {
    cfg: ResNetConfig,
    embeddings: CatEmbeddings,
    first: Linear,
    blocks: Vec<Block>,
    head_norm: BatchNorm,
    head: Linear,
}

impl ResNet {
    pub(crate) fn new(
        cfg: &ResNetConfig,
        layout: &FeatureLayout,
        d_out: usize,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        let embeddings = CatEmbeddings::new(store, &layout.cardinalities, cfg.d_embedding, rng)?;
        let d_in = layout.k_num + embeddings.width();
        let d = cfg.d_main;
        let first = Linear::new(store, "first", d_in, d, true, rng)?;
        let mut blocks = Vec::with_capacity(cfg.n_blocks);
        for i in 0..cfg.n_blocks {
            let p = format!("blocks.{i}");
            blocks.push(Block {
                norm: BatchNorm::new(store, &format!("{p}.norm"), d)?,
                linear1: Linear::new(store, &format!("{p}.linear1"), d, cfg.d_hidden(), true, rng)?,
                linear2: Linear::new(store, &format!("{p}.linear2"), cfg.d_hidden(), d, true, rng)?,
            });
        }
        let head_norm = BatchNorm::new(store, "head.norm", d)?;
        let head = Linear::new(store, "head.linear", d, d_out, true, rng)?;
        Ok(ResNet { cfg: cfg.clone(), embeddings, first, blocks, head_norm, head })
    }

    pub(crate) fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &'a ParamStore,
        x_num: Var,
        x_cat: &[usize],
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Var> {
        let x = self.embeddings.input(tape, store, x_num, x_cat)?;
        let mut x = self.first.forward(tape, store, x)?;
        for block in &self.blocks {
            let h = block.norm.forward(tape, store, x, ctx)?;
            let h = block.linear1.forward(tape, store, h)?;
            let h = tape.relu(h);
            let h = ctx.dropout(tape, h, self.cfg.hidden_dropout)?;
            let h = block.linear2.forward(tape, store, h)?;
            let h = ctx.dropout(tape, h, self.cfg.residual_dropout)?;
            x = tape.add(x, h)?;
        }
        let x = self.head_norm.forward(tape, store, x, ctx)?;
        let x = tape.relu(x);
        self.head.forward(tape, store, x)
    }

    fn norms(&self) -> impl Iterator<Item = &BatchNorm> {
        self.blocks.iter().map(|b| &b.norm).chain(std::iter::once(&self.head_norm))
    }

    fn norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm> {
        self.blocks.iter_mut().map(|b| &mut b.norm).chain(std::iter::once(&mut self.head_norm))
    }

    pub(crate) fn apply_running_updates(&mut self, updates: &[(String, BatchNormStats)]) -> Result<()> {
        for (name, stats) in updates {
            let bn = self
                .norms_mut()
                .find(|n| &n.name == name)
                .ok_or_else(|| Error::Contract(format!("no BatchNorm named `{name}`")))?;
            bn.update(stats)?;
        }
        Ok(())
    }

    pub(crate) fn buffers(&self) -> Vec<(String, &[f64])> {
        self.norms()
            .flat_map(|n| {
                let [m, v] = n.buffer_names();
                [(m, n.running_mean.as_slice()), (v, n.running_var.as_slice())]
            })
            .collect()
    }

    pub(crate) fn buffer_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        for n in self.norms_mut() {
            let [m, v] = n.buffer_names();
            if m == name {
                return Some(&mut n.running_mean);
            }
            if v == name {
                return Some(&mut n.running_var);
            }
        }
        None
    }
}
