//! Run configuration: one JSON file (nested objects or flat dotted keys)
//! plus command-line overrides. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use tabdl::data::DatasetSchema;
use tabdl::models::ModelConfig;
use tabdl::preprocess::NumericPolicy;
use tabdl::synth::{SweepModel, SyntheticTaskSpec};
use tabdl::training::TrainConfig;
use tabdl::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Csv {
        path: PathBuf,
        schema: DatasetSchema,
        #[serde(default = "default_split")]
        split: [f64; 3],
        #[serde(default)]
        split_seed: u64,
        #[serde(default)]
        preprocessing: NumericPolicy,
    },
    Synthetic {
        #[serde(default)]
        spec: SyntheticTaskSpec,
        #[serde(default)]
        alpha: f64,
    },
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    Count(usize),
    List(Vec<u64>),
}

impl Seeds {
    pub fn resolve(&self) -> Vec<u64> {
        match self {
            Seeds::Count(n) => (0..*n as u64).collect(),
            Seeds::List(v) => v.clone(),
        }
    }
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds::Count(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub spec: SyntheticTaskSpec,
    pub alphas: Vec<f64>,
    /// Empty means the built-in desk-scale pair.
    pub models: Vec<SweepModel>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { spec: SyntheticTaskSpec::default(), alphas: tabdl::synth::DEFAULT_ALPHAS.to_vec(), models: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub methods: Vec<String>,
    /// Trained checkpoint; one is trained with the first seed when absent.
    pub checkpoint: Option<PathBuf>,
    /// Rows of the training split used by every method.
    pub n_samples: usize,
    pub ig_steps: usize,
    pub pt_repeats: usize,
    pub seed: u64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            methods: vec!["am".into(), "ig".into(), "pt".into()],
            checkpoint: None,
            n_samples: 1000,
            ig_steps: tabdl::explain::DEFAULT_IG_STEPS,
            pt_repeats: tabdl::explain::DEFAULT_PT_REPEATS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuneConfig {
    pub budget: usize,
    pub seed: u64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig { budget: 20, seed: 0 }
    }
}

/// Either a named preset of a family or a full explicit configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, try_from = "Value")]
pub enum ModelChoice {
    Preset { family: String, preset: String },
    Explicit(ModelConfig),
}

impl TryFrom<Value> for ModelChoice {
    type Error = String;

    fn try_from(v: Value) -> std::result::Result<Self, String> {
        let Some(obj) = v.as_object() else { return Err("expected an object".into()) };
        if obj.contains_key("preset") {
            if let Some(k) = obj.keys().find(|k| *k != "family" && *k != "preset") {
                return Err(format!("unknown field `{k}` next to a preset"));
            }
            let field = |k: &str| obj.get(k).and_then(Value::as_str).map(str::to_string).ok_or_else(|| format!("`{k}` must be a string"));
            return Ok(ModelChoice::Preset { family: field("family")?, preset: field("preset")? });
        }
        serde_json::from_value(v).map(ModelChoice::Explicit).map_err(|e| e.to_string())
    }
}

impl ModelChoice {
    pub fn resolve(&self) -> Result<ModelConfig> {
        let c = match self {
            ModelChoice::Preset { family, preset } => {
                if preset != "default" {
                    return Err(Error::config("model.preset", format!("unknown preset `{preset}`")));
                }
                ModelConfig::default_for(family).map_err(|_| Error::config("model.family", format!("unknown model family `{family}`")))?
            }
            ModelChoice::Explicit(c) => c.clone(),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn family(&self) -> String {
        match self {
            ModelChoice::Preset { family, .. } => family.clone(),
            ModelChoice::Explicit(c) => c.family().to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct RunConfig {
    pub dataset: Option<DatasetConfig>,
    pub model: Option<ModelChoice>,
    pub train: TrainConfig,
    pub seeds: Seeds,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    pub synth: SynthConfig,
    pub explain: ExplainConfig,
    pub tune: TuneConfig,
}


/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub model: Option<String>,
    pub preset: Option<String>,
    pub seeds: Option<usize>,
    pub alphas: Option<Vec<f64>>,
    pub budget: Option<usize>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

/// Expand `"a.b.c": v` keys into nested objects; nested input passes
/// through unchanged.
pub fn expand_dotted(v: Value) -> Result<Value> {
    let Value::Object(map) = v else { return Ok(v) };
    let mut out = Map::new();
    for (key, val) in map {
        let val = expand_dotted(val)?;
        let mut parts: Vec<&str> = key.split('.').collect();
        let last = parts.pop().expect("split yields one part");
        let mut cur = &mut out;
        for p in parts {
            let slot = cur.entry(p.to_string()).or_insert_with(|| Value::Object(Map::new()));
            cur = slot.as_object_mut().ok_or_else(|| Error::config(key.clone(), "conflicts with a non-object value"))?;
        }
        match (cur.get_mut(last), val) {
            (Some(Value::Object(existing)), Value::Object(new)) => {
                for (k, v) in new {
                    if existing.insert(k.clone(), v).is_some() {
                        return Err(Error::config(format!("{key}.{k}"), "given twice"));
                    }
                }
            }
            (Some(_), _) => return Err(Error::config(key.clone(), "given twice")),
            (None, val) => {
                cur.insert(last.to_string(), val);
            }
        }
    }
    Ok(Value::Object(out))
}

fn parse_error(e: serde_json::Error) -> Error {
    // serde names the offending key, e.g. "unknown field `lr2`"
    Error::config("config", e.to_string())
}

/// Read a run config; a run manifest is accepted too and replays its
/// resolved config.
pub fn load(path: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = path else { return Ok(RunConfig::default()) };
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut v: Value = serde_json::from_str(&text).map_err(parse_error)?;
    if let Some(resolved) = v.get("resolved_config").cloned() {
        v = resolved;
    }
    from_value(expand_dotted(v)?)
}

/// Deserialize, naming the offending key path on failure.
pub fn from_value(v: Value) -> Result<RunConfig> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        Error::config(if path == "." { "config".to_string() } else { path }, e.into_inner().to_string())
    })
}

impl RunConfig {
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        match (&o.model, &o.preset) {
            (Some(family), preset) => {
                let preset = preset.clone().unwrap_or_else(|| "default".into());
                let keep = matches!(&self.model, Some(ModelChoice::Explicit(c)) if normalize(c.family()) == normalize(family)) && o.preset.is_none();
                if !keep {
                    self.model = Some(ModelChoice::Preset { family: family.clone(), preset });
                }
            }
            (None, Some(preset)) => {
                let family = self.model.as_ref().map(ModelChoice::family).ok_or_else(|| Error::config("preset", "needs --model or model.family"))?;
                self.model = Some(ModelChoice::Preset { family, preset: preset.clone() });
            }
            (None, None) => {}
        }
        if let Some(n) = o.seeds {
            if n == 0 {
                return Err(Error::config("seeds", "must be at least 1"));
            }
            self.seeds = Seeds::Count(n);
        }
        if let Some(a) = &o.alphas {
            self.synth.alphas = a.clone();
        }
        if let Some(b) = o.budget {
            self.tune.budget = b;
        }
        if o.out.is_some() {
            self.out = o.out.clone();
        }
        if o.threads.is_some() {
            self.threads = o.threads;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if let Some(m) = &self.model {
            m.resolve()?;
        }
        if self.seeds.resolve().is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.synth.alphas.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::config("synth.alphas", "every alpha must lie in [0, 1]"));
        }
        self.synth.spec.validate()?;
        if let Some(DatasetConfig::Synthetic { spec, alpha }) = &self.dataset {
            spec.validate()?;
            if !(0.0..=1.0).contains(alpha) {
                return Err(Error::config("dataset.alpha", "must lie in [0, 1]"));
            }
        }
        for m in &self.explain.methods {
            tabdl::explain::Method::parse(m)?;
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("runs/latest"))
    }
}

fn normalize(f: &str) -> &str {
    if f == "ft" {
        "ft_transformer"
    } else {
        f
    }
}
