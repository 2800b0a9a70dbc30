//! MLP, ResNet and FT-Transformer over numerical and categorical features.

mod checkpoint;
pub mod ft_transformer;
pub(crate) mod layers;
pub mod mlp;
pub mod resnet;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use ft_transformer::{AttentionRecord, FtTransformer, FtTransformerConfig};
pub use mlp::{Mlp, MlpConfig};
pub use resnet::{ResNet, ResNetConfig};

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::param::ParamStore;
use crate::rng::{self, Rng};
use crate::tensor::{BatchNormStats, Tape, Var};

/// Column layout a model is built for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub k_num: usize,
    /// Cardinality of each categorical feature.
    pub cardinalities: Vec<usize>,
}

impl FeatureLayout {
    pub fn numerical(k_num: usize) -> Self {
        FeatureLayout { k_num, cardinalities: Vec::new() }
    }

    pub fn k_cat(&self) -> usize {
        self.cardinalities.len()
    }

    pub fn n_features(&self) -> usize {
        self.k_num + self.k_cat()
    }

    pub fn of(ds: &crate::data::TabularDataset) -> Self {
        FeatureLayout { k_num: ds.k_num(), cardinalities: ds.cardinalities.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ModelConfig {
    FtTransformer(FtTransformerConfig),
    Resnet(ResNetConfig),
    Mlp(MlpConfig),
}

impl ModelConfig {
    pub fn family(&self) -> &'static str {
        match self {
            ModelConfig::FtTransformer(_) => "ft_transformer",
            ModelConfig::Resnet(_) => "resnet",
            ModelConfig::Mlp(_) => "mlp",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::FtTransformer(c) => c.validate(),
            ModelConfig::Resnet(c) => c.validate(),
            ModelConfig::Mlp(c) => c.validate(),
        }
    }

    /// Default configuration for a family name.
    pub fn default_for(family: &str) -> Result<Self> {
        match family {
            "ft_transformer" | "ft" => Ok(ModelConfig::FtTransformer(FtTransformerConfig::default())),
            "resnet" => Ok(ModelConfig::Resnet(ResNetConfig::default())),
            "mlp" => Ok(ModelConfig::Mlp(MlpConfig::default())),
            other => Err(Error::config("model", format!("unknown model family `{other}`"))),
        }
    }
}

pub(crate) fn check_rate(key: &str, rate: f64) -> Result<()> {
    if (0.0..1.0).contains(&rate) {
        Ok(())
    } else {
        Err(Error::config(key, format!("rate {rate} outside [0, 1)")))
    }
}

/// Everything needed to rebuild a model's structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub config: ModelConfig,
    pub layout: FeatureLayout,
    /// 1 for regression and binary tasks (single logit), C for multiclass.
    pub d_out: usize,
}

/// Per-call forward state: mode, dropout randomness, and side outputs.
pub struct ForwardCtx<'r> {
    pub training: bool,
    rng: Option<&'r mut Rng>,
    /// Record CLS-row attention probabilities (FT-Transformer only).
    pub capture_attention: bool,
    pub attention: Vec<AttentionRecord>,
    /// BatchNorm batch statistics observed in training mode, by layer name.
    pub running_updates: Vec<(String, BatchNormStats)>,
}

impl ForwardCtx<'static> {
    pub fn eval() -> Self {
        ForwardCtx {
            training: false,
            rng: None,
            capture_attention: false,
            attention: Vec::new(),
            running_updates: Vec::new(),
        }
    }
}

impl<'r> ForwardCtx<'r> {
    pub fn train(rng: &'r mut Rng) -> Self {
        ForwardCtx {
            training: true,
            rng: Some(rng),
            capture_attention: false,
            attention: Vec::new(),
            running_updates: Vec::new(),
        }
    }

    pub fn with_attention(mut self) -> Self {
        self.capture_attention = true;
        self
    }

    /// The dropout RNG when dropout at `rate` is active.
    pub(crate) fn dropout_rng(&mut self, rate: f64) -> Result<Option<&mut Rng>> {
        if !self.training || rate == 0.0 {
            return Ok(None);
        }
        self.rng
            .as_deref_mut()
            .map(Some)
            .ok_or_else(|| Error::Contract("training-mode forward needs a dropout RNG".into()))
    }

    pub(crate) fn dropout(&mut self, tape: &mut Tape<'_>, x: Var, rate: f64) -> Result<Var> {
        if !self.training || rate == 0.0 {
            return Ok(x);
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::Contract("training-mode forward needs a dropout RNG".into()))?;
        tape.dropout(x, rate, true, rng)
    }
}

#[derive(Debug, Clone)]
enum Arch {
    Ft(FtTransformer),
    Resnet(ResNet),
    Mlp(Mlp),
}

/// A built model: architecture, named parameters, and buffers.
#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    arch: Arch,
    params: ParamStore,
}

impl Model {
    /// Build and initialize from `seed` (drawn from the init stream).
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.config.validate()?;
        if spec.d_out == 0 {
            return Err(Error::config("d_out", "output dimension must be positive"));
        }
        if spec.layout.cardinalities.contains(&0) {
            return Err(Error::config("cardinalities", "categorical feature with no categories"));
        }
        let mut r = rng::stream(seed, rng::streams::INIT);
        let mut params = ParamStore::new();
        let arch = match &spec.config {
            ModelConfig::FtTransformer(c) => Arch::Ft(FtTransformer::new(c, &spec.layout, spec.d_out, &mut params, &mut r)?),
            ModelConfig::Resnet(c) => Arch::Resnet(ResNet::new(c, &spec.layout, spec.d_out, &mut params, &mut r)?),
            ModelConfig::Mlp(c) => Arch::Mlp(Mlp::new(c, &spec.layout, spec.d_out, &mut params, &mut r)?),
        };
        Ok(Model { spec, arch, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn n_params(&self) -> usize {
        self.params.num_elements()
    }

    pub fn d_out(&self) -> usize {
        self.spec.d_out
    }

    /// `x_num` is `[b, k_num]`; `x_cat` holds `b · k_cat` row-major indices.
    /// Returns `[b, d_out]`.
    pub fn forward<'a>(&'a self, tape: &mut Tape<'a>, x_num: Var, x_cat: &[usize], ctx: &mut ForwardCtx<'_>) -> Result<Var> {
        let s = tape.shape(x_num);
        if s.len() != 2 || s[1] != self.spec.layout.k_num {
            return Err(Error::shape(format!(
                "model expects [b, {}] numerical input, got {s:?}",
                self.spec.layout.k_num
            )));
        }
        if x_cat.len() != s[0] * self.spec.layout.k_cat() {
            return Err(Error::shape(format!(
                "model expects {} categorical values per row, got {} for {} rows",
                self.spec.layout.k_cat(),
                x_cat.len(),
                s[0]
            )));
        }
        match &self.arch {
            Arch::Ft(m) => m.forward(tape, &self.params, x_num, x_cat, ctx),
            Arch::Resnet(m) => m.forward(tape, &self.params, x_num, x_cat, ctx),
            Arch::Mlp(m) => m.forward(tape, &self.params, x_num, x_cat, ctx),
        }
    }

    /// Feature tokens `[b, k, d]` without the CLS row (FT-Transformer only).
    pub fn tokenize<'a>(&'a self, tape: &mut Tape<'a>, x_num: Var, x_cat: &[usize]) -> Result<Var> {
        match &self.arch {
            Arch::Ft(m) => m.tokenize(tape, &self.params, x_num, x_cat),
            _ => Err(Error::Unsupported("only the FT-Transformer tokenizes features".into())),
        }
    }

    /// Fold BatchNorm statistics from a training forward into running estimates.
    pub fn apply_running_updates(&mut self, updates: &[(String, BatchNormStats)]) -> Result<()> {
        match &mut self.arch {
            Arch::Resnet(m) => m.apply_running_updates(updates),
            _ if updates.is_empty() => Ok(()),
            _ => Err(Error::Contract("running-stat updates for a model without BatchNorm".into())),
        }
    }

    /// Non-trainable state (BatchNorm running estimates), by name.
    pub fn buffers(&self) -> Vec<(String, &[f64])> {
        match &self.arch {
            Arch::Resnet(m) => m.buffers(),
            _ => Vec::new(),
        }
    }

    pub(crate) fn buffer_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        match &mut self.arch {
            Arch::Resnet(m) => m.buffer_mut(name),
            _ => None,
        }
    }

    /// Eval-mode forward on one batch of rows.
    pub fn forward_eval(&self, x_num: &[f64], x_cat: &[usize], n: usize, exec: Exec) -> Result<Vec<f64>> {
        Ok(self.forward_eval_inner(x_num, x_cat, n, exec, false)?.0)
    }

    /// Eval-mode forward that also returns CLS attention records.
    pub fn forward_eval_with_attention(
        &self,
        x_num: &[f64],
        x_cat: &[usize],
        n: usize,
        exec: Exec,
    ) -> Result<(Vec<f64>, Vec<AttentionRecord>)> {
        if !matches!(self.arch, Arch::Ft(_)) {
            return Err(Error::Unsupported(format!(
                "attention maps are only defined for the FT-Transformer, not `{}`",
                self.spec.config.family()
            )));
        }
        self.forward_eval_inner(x_num, x_cat, n, exec, true)
    }

    fn forward_eval_inner(
        &self,
        x_num: &[f64],
        x_cat: &[usize],
        n: usize,
        exec: Exec,
        attention: bool,
    ) -> Result<(Vec<f64>, Vec<AttentionRecord>)> {
        let mut tape = Tape::with_exec(exec);
        let x = tape.constant(vec![n, self.spec.layout.k_num], x_num.to_vec())?;
        let mut ctx = ForwardCtx::eval();
        ctx.capture_attention = attention;
        let out = self.forward(&mut tape, x, x_cat, &mut ctx)?;
        Ok((tape.value(out).to_vec(), ctx.attention))
    }

    /// Eval-mode predictions `[n, d_out]` in batches of `batch_size`; batches
    /// run concurrently under [`Exec::Parallel`]. Output does not depend on
    /// `exec`.
    pub fn predict(&self, x_num: &[f64], x_cat: &[usize], n: usize, batch_size: usize, exec: Exec) -> Result<Vec<f64>> {
        let (k, c) = (self.spec.layout.k_num, self.spec.layout.k_cat());
        if x_num.len() != n * k || x_cat.len() != n * c {
            return Err(Error::shape("prediction input does not match the feature layout"));
        }
        let bs = batch_size.max(1);
        let n_batches = n.div_ceil(bs);
        let parts = exec.try_map(n_batches, |i| {
            let (lo, hi) = (i * bs, ((i + 1) * bs).min(n));
            self.forward_eval(&x_num[lo * k..hi * k], &x_cat[lo * c..hi * c], hi - lo, Exec::Sequential)
        })?;
        Ok(parts.concat())
    }
}
