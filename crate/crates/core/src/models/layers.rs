use rand::Rng as _;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::rng::Rng;
use crate::tensor::{BatchNormStats, ParamId, Tape, Tensor, Var, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM, LAYER_NORM_EPS};

use super::ForwardCtx;

pub(crate) fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Affine map with weight stored `[d_in, d_out]`. Weights and biases are
/// drawn from `U(-1/sqrt(d_in), 1/sqrt(d_in))` (Kaiming-uniform with the
/// `a = sqrt(5)` slope used by common deep learning frameworks).
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (d_in.max(1) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(&[d_in, d_out], bound, rng))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), uniform(&[d_out], bound, rng))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(self.weight, store.tensor(self.weight));
        let b = self.bias.map(|b| tape.param(b, store.tensor(b)));
        tape.linear(x, w, b)
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerNorm {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            weight: store.add(format!("{name}.weight"), Tensor::full(vec![d], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![d]))?,
        })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(self.weight, store.tensor(self.weight));
        let b = tape.param(self.bias, store.tensor(self.bias));
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// BatchNorm with running statistics held outside the parameter store.
#[derive(Debug, Clone)]
pub(crate) struct BatchNorm {
    pub name: String,
    pub weight: ParamId,
    pub bias: ParamId,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(BatchNorm {
            name: name.to_string(),
            weight: store.add(format!("{name}.weight"), Tensor::full(vec![d], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(vec![d]))?,
            running_mean: vec![0.0; d],
            running_var: vec![1.0; d],
        })
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x: Var, ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let g = tape.param(self.weight, store.tensor(self.weight));
        let b = tape.param(self.bias, store.tensor(self.bias));
        let (y, stats) = tape.batch_norm(x, g, b, &self.running_mean, &self.running_var, ctx.training, BATCH_NORM_EPS)?;
        if let Some(stats) = stats {
            ctx.running_updates.push((self.name.clone(), stats));
        }
        Ok(y)
    }

    pub fn update(&mut self, stats: &BatchNormStats) -> Result<()> {
        if stats.mean.len() != self.running_mean.len() {
            return Err(Error::shape(format!("running-stat update for `{}` has wrong length", self.name)));
        }
        let m = BATCH_NORM_MOMENTUM;
        for (r, v) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * v;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * v;
        }
        Ok(())
    }

    pub fn buffer_names(&self) -> [String; 2] {
        [format!("{}.running_mean", self.name), format!("{}.running_var", self.name)]
    }
}

/// Categorical embedding tables shared by MLP and ResNet inputs.
#[derive(Debug, Clone, Default)]
pub(crate) struct CatEmbeddings {
    pub tables: Vec<ParamId>,
    pub d: usize,
}

impl CatEmbeddings {
    pub fn new(store: &mut ParamStore, cardinalities: &[usize], d: usize, rng: &mut Rng) -> Result<Self> {
        let bound = 1.0 / (d.max(1) as f64).sqrt();
        let tables = cardinalities
            .iter()
            .enumerate()
            .map(|(j, &s)| store.add(format!("cat_embeddings.{j}"), uniform(&[s, d], bound, rng)))
            .collect::<Result<_>>()?;
        Ok(CatEmbeddings { tables, d })
    }

    pub fn width(&self) -> usize {
        self.tables.len() * self.d
    }

    /// `[x_num | emb_1(x_cat_1) | … ]` as one `[b, k_num + k_cat·d]` matrix.
    pub fn input<'a>(&self, tape: &mut Tape<'a>, store: &'a ParamStore, x_num: Var, x_cat: &[usize]) -> Result<Var> {
        let k_cat = self.tables.len();
        if k_cat == 0 {
            return Ok(x_num);
        }
        let b = tape.shape(x_num)[0];
        if x_cat.len() != b * k_cat {
            return Err(Error::shape(format!("expected {} categorical values, got {}", b * k_cat, x_cat.len())));
        }
        let mut parts = vec![x_num];
        for (j, &t) in self.tables.iter().enumerate() {
            let idx: Vec<usize> = (0..b).map(|r| x_cat[r * k_cat + j]).collect();
            let table = tape.param(t, store.tensor(t));
            parts.push(tape.embedding(table, &idx)?);
        }
        tape.concat(&parts, 1)
    }
}
