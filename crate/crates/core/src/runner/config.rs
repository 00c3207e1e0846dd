//! Experiment configuration: a flat JSON document, deserialized strictly,
//! then checked semantically before anything touches the disk.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::RunnerError;
use crate::corpus::DatasetSchema;
use crate::modelcore::toy::BACKEND_ID;
use crate::modelcore::{GenerationConfig, OptimizerKind, ToyConfig};
use crate::promptkit::SourceVariant;
use crate::training::{LabelSource, Phase, SelectionMetric};

/// JSON schema for [`ExperimentConfig`] documents.
pub const CONFIG_SCHEMA: &str = include_str!("../../schema/experiment_config.schema.json");

pub const FIGLANG: &str = "figlang";
pub const ESNLI: &str = "esnli";
pub const IMPLI: &str = "impli";

/// The five supported training sequences.
pub const SEQUENCES: [&[&str]; 5] = [
    &[FIGLANG],
    &[ESNLI, FIGLANG],
    &[IMPLI, FIGLANG],
    &[ESNLI, IMPLI, FIGLANG],
    &[IMPLI, ESNLI, FIGLANG],
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Sft,
    HifeatMtl,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Sft => "sft",
            Regime::HifeatMtl => "hifeat_mtl",
        }
    }

    pub fn display(self) -> &'static str {
        match self {
            Regime::Sft => "SFT",
            Regime::HifeatMtl => "HiFeatMTL",
        }
    }
}

pub fn schema_for(dataset_id: &str) -> Option<DatasetSchema> {
    match dataset_id {
        FIGLANG => Some(DatasetSchema::figlang()),
        ESNLI => Some(DatasetSchema::esnli()),
        IMPLI => Some(DatasetSchema::impli()),
        _ => None,
    }
}

pub fn display_name(dataset_id: &str) -> &str {
    match dataset_id {
        FIGLANG => "FigLang",
        ESNLI => "eSNLI",
        IMPLI => "IMPLI",
        other => other,
    }
}

pub fn mode_name(mode: SourceVariant) -> &'static str {
    match mode {
        SourceVariant::Standard => "standard",
        SourceVariant::HypothesisOnly => "hyponly",
        SourceVariant::PremiseOnly => "premonly",
        SourceVariant::SecondPassWithLabel => "secondpass",
    }
}

/// Train file plus an optional dev file; without one, the dev split is
/// carved out of the train file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
}

/// How earlier datasets are cut down to the final dataset's size.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    #[default]
    Prefix,
    /// Seeded random subset (seed `split_seed`), original order kept.
    Sample,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_metric: Option<SelectionMetric>,
    /// HiFeatMTL only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phases: Option<Vec<Phase>>,
}

fn d_seed() -> u64 {
    0
}
fn d_backend() -> String {
    BACKEND_ID.to_string()
}
fn d_dev_fraction() -> f64 {
    0.1
}
fn d_true() -> bool {
    true
}
fn d_lr() -> f64 {
    1e-3
}
fn d_batch() -> usize {
    8
}
fn d_clip() -> Option<f64> {
    Some(5.0)
}
fn d_beams() -> usize {
    GenerationConfig::default().num_beams
}
fn d_max_out() -> usize {
    GenerationConfig::default().max_output_tokens
}
fn d_d_model() -> usize {
    ToyConfig::default().d_model
}
fn d_max_src() -> usize {
    ToyConfig::default().max_source_tokens
}
fn d_max_tgt() -> usize {
    ToyConfig::default().max_target_tokens
}
fn d_init() -> f64 {
    ToyConfig::default().init_scale
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub regime: Regime,
    pub sequence: Vec<String>,
    #[serde(default)]
    pub source_mode: SourceVariant,
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_backend")]
    pub model_backend: String,
    pub data: BTreeMap<String, DataPaths>,
    #[serde(default = "d_dev_fraction")]
    pub dev_fraction: f64,
    /// Seed of the train/dev split, independent of `seed` so runs with
    /// different seeds share one eval split.
    #[serde(default = "d_seed")]
    pub split_seed: u64,
    #[serde(default = "d_true")]
    pub truncate_to_final: bool,
    #[serde(default)]
    pub truncation: Truncation,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_clip")]
    pub max_grad_norm: Option<f64>,
    #[serde(default = "d_beams")]
    pub num_beams: usize,
    #[serde(default = "d_max_out")]
    pub max_output_tokens: usize,
    #[serde(default = "d_d_model")]
    pub d_model: usize,
    #[serde(default = "d_max_src")]
    pub max_source_tokens: usize,
    #[serde(default = "d_max_tgt")]
    pub max_target_tokens: usize,
    #[serde(default = "d_init")]
    pub init_scale: f64,
    #[serde(default)]
    pub label_source: LabelSource,
    #[serde(default)]
    pub save_epoch_checkpoints: bool,
    #[serde(default)]
    pub stage_overrides: BTreeMap<String, StageOverride>,
}

impl ExperimentConfig {
    /// A config with every optional key at its default.
    pub fn new(regime: Regime, sequence: &[&str], data: BTreeMap<String, DataPaths>) -> Self {
        let json = serde_json::json!({
            "regime": regime,
            "sequence": sequence,
            "data": data,
        });
        serde_json::from_value(json).expect("minimal config deserializes")
    }

    pub fn from_json(text: &str) -> Result<Self, RunnerError> {
        serde_json::from_str(text).map_err(|e| RunnerError::Config(e.to_string()))
    }

    /// Parse and validate a config file; relative data paths are resolved
    /// against the file's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunnerError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        for paths in cfg.data.values_mut() {
            if paths.train.is_relative() {
                paths.train = base.join(&paths.train);
            }
            if let Some(dev) = paths.dev.as_mut().filter(|d| d.is_relative()) {
                *dev = base.join(&*dev);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        let err = |m: String| Err(RunnerError::Config(m));
        let seq: Vec<&str> = self.sequence.iter().map(String::as_str).collect();
        if !SEQUENCES.contains(&seq.as_slice()) {
            return err(format!(
                "sequence {seq:?} is not one of the supported sequences {SEQUENCES:?}"
            ));
        }
        if self.model_backend != BACKEND_ID {
            return err(format!("unsupported model_backend `{}`", self.model_backend));
        }
        if self.source_mode == SourceVariant::SecondPassWithLabel {
            return err("source_mode must be standard, hypothesis_only or premise_only".into());
        }
        for id in &self.sequence {
            if !self.data.contains_key(id) {
                return err(format!("no data paths for `{id}`"));
            }
        }
        for id in self.data.keys().chain(self.stage_overrides.keys()) {
            if schema_for(id).is_none() {
                return err(format!("unknown dataset id `{id}`"));
            }
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return err(format!("dev_fraction {} outside (0, 1)", self.dev_fraction));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return err(format!("lr {} must be positive", self.lr));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c.is_finite() && c > 0.0) {
                return err(format!("max_grad_norm {c} must be positive"));
            }
        }
        if !(self.init_scale.is_finite() && self.init_scale > 0.0) {
            return err(format!("init_scale {} must be positive", self.init_scale));
        }
        for (key, v) in [
            ("batch_size", self.batch_size),
            ("num_beams", self.num_beams),
            ("max_output_tokens", self.max_output_tokens),
            ("d_model", self.d_model),
            ("max_source_tokens", self.max_source_tokens),
            ("max_target_tokens", self.max_target_tokens),
        ] {
            if v == 0 {
                return err(format!("{key} must be >= 1"));
            }
        }
        for (id, o) in &self.stage_overrides {
            if o.epochs == Some(0) {
                return err(format!("stage `{id}`: epochs must be >= 1"));
            }
            if self.regime == Regime::Sft && o.phases.is_some() {
                return err(format!("stage `{id}`: phases apply to hifeat_mtl only"));
            }
            if self.regime == Regime::HifeatMtl && o.selection_metric == Some(SelectionMetric::DevLoss) {
                return err(format!("stage `{id}`: hifeat_mtl stages cannot select on dev loss"));
            }
            if let Some(phases) = &o.phases {
                if phases.is_empty() || phases.iter().any(|p| p.epochs == 0) {
                    return err(format!("stage `{id}`: phases must be non-empty with epochs >= 1"));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical serialization (object keys sorted), so
    /// key order in the source file does not matter.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        hex::encode(Sha256::digest(canonical_json(&value).as_bytes()))
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            num_beams: self.num_beams,
            max_output_tokens: self.max_output_tokens,
            seed: self.seed,
        }
    }

    pub fn toy_config(&self) -> ToyConfig {
        ToyConfig {
            d_model: self.d_model,
            max_source_tokens: self.max_source_tokens,
            max_target_tokens: self.max_target_tokens,
            init_scale: self.init_scale,
            seed: self.seed,
        }
    }

    /// `{regime}_{sequence}_{mode}_{seed}_{confighash8}`.
    pub fn run_name(&self) -> String {
        format!(
            "{}_{}_{}_{}_{}",
            self.regime.as_str(),
            self.sequence.join("-"),
            mode_name(self.source_mode),
            self.seed,
            &self.hash()[..8]
        )
    }

    /// Human-readable setting label, e.g. `SFT eSNLI -> FigLang`.
    pub fn setting(&self) -> String {
        let seq: Vec<&str> = self.sequence.iter().map(|s| display_name(s)).collect();
        format!("{} {}", self.regime.display(), seq.join(" -> "))
    }
}

fn canonical_json(v: &serde_json::Value) -> String {
    use serde_json::Value;
    match v {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(items) => {
            let body: Vec<String> = items.iter().map(canonical_json).collect();
            format!("[{}]", body.join(","))
        }
        other => other.to_string(),
    }
}
