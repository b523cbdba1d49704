//! Training configuration and its flat dotted-key JSON form.
//!
//! A config file is a single JSON object such as
//! `{"arch": "a", "model.d": 128, "loss.tau": 0.5}`. Missing keys take their
//! defaults; unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{BmimError, Result};

/// Output architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Arch {
    /// Parallel heads with the label contrastive loss.
    #[serde(rename = "a")]
    Parallel,
    /// Sentiment feeds act prediction; dual loss s→a.
    #[serde(rename = "b")]
    SentimentToAct,
    /// Act feeds sentiment prediction; dual loss a→s.
    #[serde(rename = "c")]
    ActToSentiment,
}

impl Arch {
    pub fn tag(self) -> &'static str {
        match self {
            Arch::Parallel => "a",
            Arch::SentimentToAct => "b",
            Arch::ActToSentiment => "c",
        }
    }

    pub fn all() -> [Arch; 3] {
        [Arch::Parallel, Arch::SentimentToAct, Arch::ActToSentiment]
    }
}

impl FromStr for Arch {
    type Err = BmimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(Arch::Parallel),
            "b" => Ok(Arch::SentimentToAct),
            "c" => Ok(Arch::ActToSentiment),
            other => Err(BmimError::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Word embedding width.
    pub d_w: usize,
    /// Utterance representation width (even).
    pub d: usize,
    /// Label embedding width.
    pub d_e: usize,
    /// Half-width of the uniform initialiser for embeddings.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_w: 64,
            d: 128,
            d_e: 64,
            init_scale: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FsnConfig {
    /// Use one gate transform for both gates (then a = 1 - s).
    pub shared_gate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BminConfig {
    /// Number of inference hops.
    pub hops: usize,
    /// Share parameters between the two directions of each task.
    pub tie_directions: bool,
}

impl Default for BminConfig {
    fn default() -> Self {
        BminConfig {
            hops: 3,
            tie_directions: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub epsilon: f64,
    pub lambda_cl: f64,
    pub lambda_dl: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.5,
            epsilon: 1e-8,
            lambda_cl: 1.0,
            lambda_dl: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Which metric protocol drives checkpoint selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Sentiment macro-F1 without neutral, act prevalence-weighted F1.
    Mastodon,
    /// Macro P/R/F1 for both tasks.
    Dailydialog,
}

impl FromStr for Protocol {
    type Err = BmimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mastodon" => Ok(Protocol::Mastodon),
            "dailydialog" => Ok(Protocol::Dailydialog),
            other => Err(BmimError::Config(format!("unknown protocol {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub epochs: usize,
    /// Dialogs per mini-batch.
    pub batch_size: usize,
    pub seed: u64,
    pub early_stop_patience: usize,
    pub protocol: Protocol,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 50,
            batch_size: 16,
            seed: 0,
            early_stop_patience: 10,
            protocol: Protocol::Dailydialog,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_fsn: bool,
    pub no_bmin: bool,
    pub no_cl_dl: bool,
}

impl Ablation {
    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.no_fsn {
            parts.push("no_fsn");
        }
        if self.no_bmin {
            parts.push("no_bmin");
        }
        if self.no_cl_dl {
            parts.push("no_cl_dl");
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join("+")
        }
    }
}

impl FromStr for Ablation {
    type Err = BmimError;

    /// `full`, or flags joined by `+` (e.g. `no_fsn+no_bmin`).
    fn from_str(s: &str) -> Result<Self> {
        let mut ab = Ablation::default();
        if s == "full" {
            return Ok(ab);
        }
        for part in s.split('+') {
            match part.trim() {
                "no_fsn" => ab.no_fsn = true,
                "no_bmin" => ab.no_bmin = true,
                "no_cl_dl" => ab.no_cl_dl = true,
                other => {
                    return Err(BmimError::Config(format!("unknown ablation flag {other:?}")))
                }
            }
        }
        Ok(ab)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub arch: Arch,
    pub model: ModelConfig,
    pub fsn: FsnConfig,
    pub bmin: BminConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainingConfig,
    pub ablation: Ablation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            arch: Arch::Parallel,
            model: ModelConfig::default(),
            fsn: FsnConfig::default(),
            bmin: BminConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train: TrainingConfig::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(BmimError::Config(m.to_string()));
        let m = &self.model;
        if m.d_w == 0 || m.d == 0 || m.d_e == 0 {
            return bad("model widths must be positive");
        }
        if m.d % 2 != 0 {
            return bad("model.d must be even");
        }
        if self.bmin.hops == 0 {
            return bad("bmin.hops must be at least 1");
        }
        if !(self.loss.tau > 0.0) {
            return bad("loss.tau must be positive");
        }
        if self.loss.epsilon < 0.0 || self.loss.lambda_cl < 0.0 || self.loss.lambda_dl < 0.0 {
            return bad("loss.epsilon and loss weights must be non-negative");
        }
        if self.optim.lr < 0.0 || !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return bad("optimizer settings out of range");
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be at least 1");
        }
        Ok(())
    }

    /// Loss weights after applying the `no_cl_dl` ablation.
    pub fn effective_lambdas(&self) -> (f64, f64) {
        if self.ablation.no_cl_dl {
            (0.0, 0.0)
        } else {
            (self.loss.lambda_cl, self.loss.lambda_dl)
        }
    }

    pub fn to_flat(&self) -> Map<String, Value> {
        let mut out = Map::new();
        flatten("", &serde_json::to_value(self).expect("config serializes"), &mut out);
        out
    }

    pub fn to_flat_json(&self) -> String {
        serde_json::to_string_pretty(&Value::Object(self.to_flat())).expect("config serializes")
    }

    /// Builds a config from dotted keys over the defaults.
    pub fn from_flat(flat: &Map<String, Value>) -> Result<Self> {
        let mut tree = serde_json::to_value(TrainConfig::default()).expect("config serializes");
        for (key, value) in flat {
            set_dotted(&mut tree, key, value.clone())?;
        }
        let cfg: TrainConfig = serde_json::from_value(tree)
            .map_err(|e| BmimError::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_flat_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)
            .map_err(|e| BmimError::Config(format!("config is not valid JSON: {e}")))?;
        match value {
            Value::Object(map) => Self::from_flat(&map),
            _ => Err(BmimError::Config("config must be a JSON object".into())),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| BmimError::io(path, e))?;
        Self::from_flat_json(&text)
    }

    /// Applies `key=value` overrides. Values parse as JSON, falling back
    /// to a plain string.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut flat = self.to_flat();
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| BmimError::Config(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            if !flat.contains_key(key) {
                return Err(BmimError::Config(format!("unknown config key {key:?}")));
            }
            let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
            flat.insert(key.to_string(), value);
        }
        Self::from_flat(&flat)
    }
}

fn flatten(prefix: &str, value: &Value, out: &mut Map<String, Value>) {
    match value {
        Value::Object(map) => {
            for (k, v) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        leaf => {
            out.insert(prefix.to_string(), leaf.clone());
        }
    }
}

fn set_dotted(tree: &mut Value, key: &str, value: Value) -> Result<()> {
    let unknown = || BmimError::Config(format!("unknown config key {key:?}"));
    let mut node = tree;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(unknown)?;
        let child = obj.get_mut(*part).ok_or_else(unknown)?;
        if i + 1 == parts.len() {
            if child.is_object() {
                return Err(unknown());
            }
            *child = value;
            return Ok(());
        }
        node = child;
    }
    Err(unknown())
}
