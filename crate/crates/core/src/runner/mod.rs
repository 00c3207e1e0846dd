//! Config-driven experiment orchestration: data preparation, training under
//! either regime, final evaluation, and a self-describing run directory.
//!
//! ```text
//! <root>/<run name>/
//!   manifest.json        RunManifest, rewritten on completion or failure
//!   history.jsonl        one record per epoch
//!   steps.jsonl          one record per optimizer step
//!   report.json          final EvalReport
//!   report.csv           setting,Acc@0,Acc@50,Acc@60
//!   per_type.csv         type,accuracy
//!   predictions.jsonl    one Prediction per eval example
//!   data/<id>_dev.jsonl  the exact eval split
//!   checkpoints/final/   selected final parameters
//! ```

pub mod config;
pub mod manifest;

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use config::{DataPaths, ExperimentConfig, Regime, StageOverride, Truncation, CONFIG_SCHEMA};
pub use manifest::{emit_comparison, format_delta, ComparisonTable, EvalSetting, RunManifest, RunStatus, TypeDelta};

use crate::corpus::{self, CorpusError, Dataset, DatasetSchema, Label};
use crate::evalharness::{self, EvalError, EvalRegime, EvalReport, EvalSettings, ExplanationScorer, Prediction};
use crate::modelcore::checkpoint::{load_checkpoint, read_manifest};
use crate::modelcore::{GenerationConfig, ModelError, TextToTextModel, ToySeq2Seq, Vocabulary};
use crate::promptkit::{self, SourceMode, SourceVariant};
use crate::training::{self, DataMap, Phase, SelectionMetric, Stage, StageData, TrainConfig, TrainError};

pub const OUT_ENV: &str = "XFERBENCH_OUT";

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("bad manifest: {0}")]
    Manifest(String),
    #[error("comparison needs at least 2 manifests, got {0}")]
    TooFewManifests(usize),
    #[error("run `{0}` did not complete")]
    IncompleteRun(String),
    #[error("`{0}` was evaluated on a different split")]
    MismatchedEvalSplit(String),
    #[error("unknown explanation scorer `{0}`")]
    UnknownScorer(String),
    #[error("run failed ({}): {message}", run_dir.display())]
    RunFailed { run_dir: PathBuf, message: String },
}

impl RunnerError {
    fn io(path: &Path, source: io::Error) -> Self {
        RunnerError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

/// `$XFERBENCH_OUT`, else `./runs`.
pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn scorer_by_name(name: &str) -> Result<Arc<dyn ExplanationScorer>, RunnerError> {
    let s = evalharness::surrogate_scorer();
    if s.name() == name {
        Ok(s)
    } else {
        Err(RunnerError::UnknownScorer(name.to_string()))
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), RunnerError> {
    fs::write(path, contents).map_err(|e| RunnerError::io(path, e))
}

/// Create `root/name`, or `root/name-2`, `-3`, ... if taken.
fn fresh_dir(root: &Path, name: &str) -> Result<PathBuf, RunnerError> {
    fs::create_dir_all(root).map_err(|e| RunnerError::io(root, e))?;
    for k in 1.. {
        let candidate = if k == 1 {
            root.join(name)
        } else {
            root.join(format!("{name}-{k}"))
        };
        match fs::create_dir(&candidate) {
            Ok(()) => return Ok(candidate),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(RunnerError::io(&candidate, e)),
        }
    }
    unreachable!()
}

/// Stage list and per-stage phase plan for `cfg`.
pub fn plan_stages(cfg: &ExperimentConfig) -> (Vec<Stage>, Vec<Vec<Phase>>) {
    let mut stages = Vec::new();
    let mut plans = Vec::new();
    for id in &cfg.sequence {
        let schema = config::schema_for(id).expect("validated dataset id");
        let o = cfg.stage_overrides.get(id).cloned().unwrap_or_default();
        let default_epochs = match (cfg.regime, id.as_str()) {
            (Regime::Sft, config::IMPLI) => 3,
            _ => 10,
        };
        let epochs = o.epochs.unwrap_or(default_epochs);
        let metric = o.selection_metric.unwrap_or(if id == config::IMPLI {
            SelectionMetric::AccAt0
        } else {
            SelectionMetric::AccAt60
        });
        let phases = o
            .phases
            .unwrap_or_else(|| Phase::default_plan(schema.has_explanations, epochs));
        let stage_epochs = match cfg.regime {
            Regime::Sft => epochs,
            Regime::HifeatMtl => phases.iter().map(|p| p.epochs).sum(),
        };
        stages.push(Stage {
            dataset_id: id.clone(),
            epochs: stage_epochs,
            include_explanation: schema.has_explanations,
            selection_metric: metric,
        });
        plans.push(phases);
    }
    (stages, plans)
}

/// Load every dataset in the sequence, split off dev sets where no dev file
/// is given, and truncate earlier datasets to the final dataset's sizes.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<DataMap, RunnerError> {
    let mut data = DataMap::new();
    for id in &cfg.sequence {
        let schema = config::schema_for(id).expect("validated dataset id");
        let paths = &cfg.data[id];
        let full = corpus::load_dataset(&paths.train, &schema)?;
        let (train, dev) = match &paths.dev {
            Some(dev) => (full, corpus::load_dataset(dev, &schema)?),
            None => corpus::split_dev(&full, cfg.dev_fraction, cfg.split_seed)?,
        };
        data.insert(id.clone(), StageData { train, dev });
    }
    if cfg.truncate_to_final {
        let last = cfg.sequence.last().expect("non-empty sequence");
        let (n_train, n_dev) = (data[last].train.len(), data[last].dev.len());
        for id in &cfg.sequence[..cfg.sequence.len() - 1] {
            let d = data.get_mut(id).expect("loaded above");
            let (train, dev) = match cfg.truncation {
                Truncation::Prefix => (corpus::truncate(&d.train, n_train), corpus::truncate(&d.dev, n_dev)),
                Truncation::Sample => (
                    corpus::truncate_sample(&d.train, n_train, cfg.split_seed),
                    corpus::truncate_sample(&d.dev, n_dev, cfg.split_seed),
                ),
            };
            d.train = train;
            d.dev = dev;
        }
    }
    Ok(data)
}

/// Whitespace vocabulary over every text a run can feed or emit.
pub fn build_vocabulary(data: &DataMap) -> Result<Vocabulary, RunnerError> {
    let mut texts: Vec<String> = Label::ALL.iter().map(|l| l.as_str().to_string()).collect();
    texts.push(promptkit::EXPLANATION_SEPARATOR.to_string());
    for split in data.values() {
        for e in split.train.examples().iter().chain(split.dev.examples()) {
            texts.push(promptkit::serialize_source(e, SourceMode::STANDARD).map_err(TrainError::from)?);
            if e.explanation.is_some() {
                texts.push(promptkit::serialize_target(e, true).map_err(TrainError::from)?);
            }
        }
    }
    Ok(Vocabulary::build(texts.iter().map(String::as_str)))
}

fn split_digest(d: &Dataset) -> String {
    hex::encode(Sha256::digest(d.to_jsonl().as_bytes()))
}

/// Evaluation settings persisted with the final checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEvalMeta {
    pub eval: EvalSetting,
    pub generation: GenerationConfig,
    pub label_vocab: Vec<Label>,
    pub schema: DatasetSchema,
}

/// Run one experiment into a fresh directory under `out_root`.
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path) -> Result<RunManifest, RunnerError> {
    execute(cfg, out_root, cfg.setting())
}

fn execute(cfg: &ExperimentConfig, out_root: &Path, setting: String) -> Result<RunManifest, RunnerError> {
    cfg.validate()?;
    let started = Instant::now();
    let run_dir = fresh_dir(out_root, &cfg.run_name())?;
    let (stages, plans) = plan_stages(cfg);
    let templates = BTreeMap::from([
        ("source".to_string(), promptkit::SOURCE_TEMPLATE.to_string()),
        ("second_pass_source".to_string(), promptkit::SECOND_PASS_TEMPLATE.to_string()),
        ("target".to_string(), promptkit::TARGET_TEMPLATE.to_string()),
    ]);
    let mut manifest = RunManifest {
        framework_version: env!("CARGO_PKG_VERSION").to_string(),
        run_name: run_dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        setting,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        status: RunStatus::Running,
        templates,
        stages,
        label_source: (cfg.regime == Regime::HifeatMtl).then_some(cfg.label_source),
        dataset_sizes: BTreeMap::new(),
        vocab_hash: None,
        history: Vec::new(),
        segments: Vec::new(),
        eval: None,
        report: None,
        artifacts: manifest::ArtifactPaths::default(),
        wall_clock_secs: 0.0,
    };
    let manifest_path = run_dir.join("manifest.json");
    manifest.save(&manifest_path)?;

    let outcome = train_and_evaluate(cfg, &run_dir, &plans, &mut manifest);
    manifest.wall_clock_secs = started.elapsed().as_secs_f64();
    match outcome {
        Ok(()) => {
            manifest.status = RunStatus::Completed;
            manifest.save(&manifest_path)?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.status = RunStatus::Failed { error: e.to_string() };
            manifest.save(&manifest_path)?;
            Err(RunnerError::RunFailed {
                run_dir,
                message: e.to_string(),
            })
        }
    }
}

fn train_and_evaluate(
    cfg: &ExperimentConfig,
    run_dir: &Path,
    plans: &[Vec<Phase>],
    manifest: &mut RunManifest,
) -> Result<(), RunnerError> {
    let data = prepare_data(cfg)?;
    manifest.dataset_sizes = data
        .iter()
        .map(|(id, d)| (id.clone(), (d.train.len(), d.dev.len())))
        .collect();
    let vocab = build_vocabulary(&data)?;
    manifest.vocab_hash = Some(vocab.hash());
    let mut model = ToySeq2Seq::new(cfg.toy_config(), vocab);

    let scorers = vec![evalharness::surrogate_scorer()];
    let mut tc = TrainConfig::new(scorers.clone());
    tc.lr = cfg.lr;
    tc.optimizer = cfg.optimizer;
    tc.batch_size = cfg.batch_size;
    tc.seed = cfg.seed;
    tc.max_grad_norm = cfg.max_grad_norm;
    tc.generation = cfg.generation();
    tc.source = cfg.source_mode;
    tc.artifact_dir = Some(run_dir.to_path_buf());
    tc.save_epoch_checkpoints = cfg.save_epoch_checkpoints;

    let history = match cfg.regime {
        Regime::Sft => training::run_sft(&mut model, &manifest.stages, &data, &tc)?,
        Regime::HifeatMtl => {
            training::run_hifeat(&mut model, &manifest.stages, plans, cfg.label_source, &data, &tc)?
        }
    };
    manifest.artifacts.history = Some("history.jsonl".into());
    manifest.artifacts.steps = Some("steps.jsonl".into());
    if cfg.save_epoch_checkpoints {
        manifest.artifacts.epoch_checkpoints = history
            .records
            .iter()
            .map(|r| format!("checkpoints/{}/epoch_{:02}", r.segment.replace('/', "_"), r.epoch))
            .collect();
    }
    manifest.history = history.records;
    manifest.segments = history.segments;

    let final_id = cfg.sequence.last().expect("non-empty sequence");
    let eval_split = &data[final_id].dev;
    let regime = match cfg.regime {
        Regime::Sft => EvalRegime::SingleShot,
        Regime::HifeatMtl => EvalRegime::TwoPass,
    };
    let settings = EvalSettings {
        regime,
        source: cfg.source_mode,
        generation: tc.generation,
        vocab: &tc.label_vocab,
        scorers: &scorers,
    };
    let (report, preds) = evalharness::evaluate(&model, eval_split, &settings)?;
    let eval = EvalSetting {
        regime,
        source: cfg.source_mode,
        dataset_id: final_id.clone(),
        split_digest: split_digest(eval_split),
        n_examples: eval_split.len(),
        scorers: scorers.iter().map(|s| s.name().to_string()).collect(),
    };

    write(&run_dir.join("report.json"), report.to_json())?;
    write(&run_dir.join("report.csv"), report.to_csv(&manifest.setting)?)?;
    write(&run_dir.join("per_type.csv"), report.per_type_csv()?)?;
    let mut lines = String::new();
    for p in &preds {
        lines.push_str(&serde_json::to_string(p).expect("prediction serializes"));
        lines.push('\n');
    }
    write(&run_dir.join("predictions.jsonl"), lines)?;
    let data_dir = run_dir.join("data");
    fs::create_dir_all(&data_dir).map_err(|e| RunnerError::io(&data_dir, e))?;
    let eval_data = format!("data/{final_id}_dev.jsonl");
    corpus::write_dataset(run_dir.join(&eval_data), eval_split)?;

    let meta = CheckpointEvalMeta {
        eval: eval.clone(),
        generation: tc.generation,
        label_vocab: tc.label_vocab.clone(),
        schema: eval_split.schema().clone(),
    };
    model.save_checkpoint(
        &run_dir.join("checkpoints/final"),
        serde_json::to_value(&meta).expect("metadata serializes"),
    )?;

    manifest.artifacts.report_json = Some("report.json".into());
    manifest.artifacts.report_csv = Some("report.csv".into());
    manifest.artifacts.per_type_csv = Some("per_type.csv".into());
    manifest.artifacts.predictions = Some("predictions.jsonl".into());
    manifest.artifacts.eval_data = Some(eval_data);
    manifest.artifacts.final_checkpoint = Some("checkpoints/final".into());
    manifest.eval = Some(eval);
    manifest.report = Some(report);
    Ok(())
}

/// Re-evaluate a saved checkpoint on a JSONL file with the evaluation
/// settings stored alongside it.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    data_file: &Path,
) -> Result<(EvalReport, Vec<Prediction>), RunnerError> {
    let ck = read_manifest(checkpoint)?;
    let meta: CheckpointEvalMeta = serde_json::from_value(ck.metadata)
        .map_err(|e| RunnerError::Manifest(format!("checkpoint metadata: {e}")))?;
    let (model, _) = load_checkpoint(checkpoint, None)?;
    let dataset = corpus::load_dataset(data_file, &meta.schema)?;
    let scorers = meta
        .eval
        .scorers
        .iter()
        .map(|n| scorer_by_name(n))
        .collect::<Result<Vec<_>, _>>()?;
    let settings = EvalSettings {
        regime: meta.eval.regime,
        source: meta.eval.source,
        generation: meta.generation,
        vocab: &meta.label_vocab,
        scorers: &scorers,
    };
    Ok(evalharness::evaluate(&model, &dataset, &settings)?)
}

pub const ABLATION_SETTINGS: [(SourceVariant, &str); 3] = [
    (SourceVariant::Standard, "Regular"),
    (SourceVariant::HypothesisOnly, "Hyp-Only"),
    (SourceVariant::PremiseOnly, "Prem-Only"),
];

#[derive(Debug, Clone)]
pub struct AblationResult {
    pub dir: PathBuf,
    pub manifests: Vec<RunManifest>,
    /// `setting,Acc@0,Acc@50,Acc@60` with rows Regular, Hyp-Only, Prem-Only.
    pub csv: String,
}

impl AblationResult {
    pub fn reports(&self) -> Vec<&EvalReport> {
        self.manifests.iter().filter_map(|m| m.report.as_ref()).collect()
    }
}

/// Three runs that differ only in which fields reach the model, for both
/// training and evaluation. Written under one `ablation_*` directory with a
/// combined `ablation.csv`.
pub fn run_bias_ablation(base: &ExperimentConfig, out_root: &Path) -> Result<AblationResult, RunnerError> {
    base.validate()?;
    let regular = ExperimentConfig {
        source_mode: SourceVariant::Standard,
        ..base.clone()
    };
    let name = format!(
        "ablation_{}_{}_{}_{}",
        base.regime.as_str(),
        base.sequence.join("-"),
        base.seed,
        &regular.hash()[..8]
    );
    let dir = fresh_dir(out_root, &name)?;
    let mut manifests = Vec::new();
    for (mode, label) in ABLATION_SETTINGS {
        let cfg = ExperimentConfig {
            source_mode: mode,
            ..base.clone()
        };
        manifests.push(execute(&cfg, &dir, label.to_string())?);
    }
    let rows: Vec<(String, [f64; 3])> = manifests
        .iter()
        .map(|m| (m.setting.clone(), m.report.as_ref().expect("completed run").accuracies()))
        .collect();
    let csv = evalharness::accuracy_table_csv(&rows)?;
    write(&dir.join("ablation.csv"), &csv)?;
    Ok(AblationResult { dir, manifests, csv })
}
