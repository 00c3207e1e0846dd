//! Stage sequencing shared by both regimes: fixed epoch budgets, per-epoch
//! dev evaluation with the full metric stack, in-memory (and optionally
//! on-disk) epoch checkpoints, and post-hoc checkpoint selection.

pub mod hifeat;
pub mod sft;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, Label, NliExample};
use crate::evalharness::{self, EvalError, EvalRegime, EvalSettings, ExplanationScorer};
use crate::modelcore::{
    train_step, GenerationConfig, Loss, ModelError, Optimizer, OptimizerKind, ParameterStore,
    TextToTextModel,
};
use crate::promptkit::{PromptError, SourceVariant};

pub use hifeat::{
    forward_two_pass, predict_two_pass, run_hifeat, LabelSource, Phase, PhaseWeights, TwoPassBatchResult, TwoPassOutput,
};
pub use sft::run_sft;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
    #[error("invalid stage `{stage}`: {reason}")]
    InvalidStage { stage: String, reason: String },
    #[error("dataset `{0}` has an empty {1} split")]
    EmptySplit(String, &'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SelectionMetric {
    AccAt0,
    AccAt60,
    DevLoss,
}

/// One dataset in a training sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub dataset_id: String,
    pub epochs: usize,
    pub include_explanation: bool,
    pub selection_metric: SelectionMetric,
}

#[derive(Debug, Clone)]
pub struct StageData {
    pub train: Dataset,
    pub dev: Dataset,
}

pub type DataMap = BTreeMap<String, StageData>;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub seed: u64,
    pub max_grad_norm: Option<f64>,
    pub generation: GenerationConfig,
    /// Which view of each example reaches the model (ablations).
    pub source: SourceVariant,
    pub label_vocab: Vec<Label>,
    pub scorers: Vec<Arc<dyn ExplanationScorer>>,
    /// History, step log and epoch checkpoints are written here when set.
    pub artifact_dir: Option<PathBuf>,
    pub save_epoch_checkpoints: bool,
}

impl TrainConfig {
    pub fn new(scorers: Vec<Arc<dyn ExplanationScorer>>) -> Self {
        Self {
            lr: 1e-3,
            optimizer: OptimizerKind::Adam,
            batch_size: 8,
            seed: 0,
            max_grad_norm: Some(5.0),
            generation: GenerationConfig::default(),
            source: SourceVariant::Standard,
            label_vocab: Label::ALL.to_vec(),
            scorers,
            artifact_dir: None,
            save_epoch_checkpoints: false,
        }
    }

    fn eval_settings(&self, regime: EvalRegime) -> EvalSettings<'_> {
        EvalSettings {
            regime,
            source: self.source,
            generation: self.generation,
            vocab: &self.label_vocab,
            scorers: &self.scorers,
        }
    }
}

/// One epoch of one segment (a stage, or one phase of a multi-phase stage).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage_index: usize,
    pub segment: String,
    pub dataset_id: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_acc_at_0: f64,
    pub dev_acc_at_50: f64,
    pub dev_acc_at_60: f64,
    pub dev_loss: f64,
    pub param_digest: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expl_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_label: Option<f64>,
}

impl EpochRecord {
    pub fn metric(&self, metric: SelectionMetric) -> f64 {
        match metric {
            SelectionMetric::AccAt0 => self.dev_acc_at_0,
            SelectionMetric::AccAt60 => self.dev_acc_at_60,
            SelectionMetric::DevLoss => self.dev_loss,
        }
    }
}

/// One optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub segment: String,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub gradient_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expl_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w_label: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentSummary {
    pub segment: String,
    pub stage_index: usize,
    pub start_digest: String,
    pub selected_epoch: usize,
    pub selected_digest: String,
}

/// Append-only, ordered by (stage, segment, epoch).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub segments: Vec<SegmentSummary>,
}

impl TrainingHistory {
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

/// Best epoch of `segment`: argmax for accuracies, argmin for dev loss,
/// earliest epoch on ties.
pub fn select_checkpoint(
    history: &TrainingHistory,
    segment: &str,
    metric: SelectionMetric,
) -> Result<usize, TrainError> {
    let mut best: Option<(usize, f64)> = None;
    for r in history.records.iter().filter(|r| r.segment == segment) {
        let v = r.metric(metric);
        let better = match best {
            None => true,
            Some((_, b)) => match metric {
                SelectionMetric::DevLoss => v < b,
                _ => v > b,
            },
        };
        if better {
            best = Some((r.epoch, v));
        }
    }
    best.map(|(e, _)| e)
        .ok_or_else(|| TrainError::UnknownStage(segment.to_string()))
}

/// What one training example contributes to a batch.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Objective {
    Sft { include_explanation: bool },
    TwoPass { weights: PhaseWeights, label_source: hifeat::LabelSource },
}

pub(crate) struct Segment {
    pub name: String,
    pub stage_index: usize,
    pub dataset_id: String,
    pub epochs: usize,
    pub metric: SelectionMetric,
    pub objective: Objective,
    pub eval_regime: EvalRegime,
}

struct ExampleLoss {
    loss: Loss,
    label_loss: Option<f64>,
    expl_loss: Option<f64>,
}

fn example_loss<M: TextToTextModel + ?Sized>(
    model: &M,
    e: &NliExample,
    objective: Objective,
    cfg: &TrainConfig,
) -> Result<ExampleLoss, TrainError> {
    match objective {
        Objective::Sft { include_explanation } => {
            let source = crate::promptkit::serialize_source(e, crate::promptkit::SourceMode::plain(cfg.source))?;
            let target = crate::promptkit::serialize_target(e, include_explanation)?;
            Ok(ExampleLoss {
                loss: model.compute_loss(&source, &target)?,
                label_loss: None,
                expl_loss: None,
            })
        }
        Objective::TwoPass { weights, label_source } => {
            let opts = hifeat::TwoPassOptions {
                source: cfg.source,
                generation: cfg.generation,
                vocab: &cfg.label_vocab,
            };
            let out = hifeat::forward_two_pass(model, e, label_source, weights, &opts)?;
            Ok(ExampleLoss {
                loss: out.combined,
                label_loss: Some(out.result.label_loss),
                expl_loss: Some(out.result.expl_loss),
            })
        }
    }
}

/// Mix a 64-bit seed with a path of indices (splitmix64 finalizer).
pub(crate) fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    let mut x = seed;
    for p in path {
        x ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(x << 6).wrapping_add(x >> 2);
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x = z ^ (z >> 31);
    }
    x
}

struct Sinks {
    history: Option<File>,
    steps: Option<File>,
}

impl Sinks {
    fn open(cfg: &TrainConfig) -> Result<Self, TrainError> {
        let Some(dir) = &cfg.artifact_dir else {
            return Ok(Self { history: None, steps: None });
        };
        fs::create_dir_all(dir)?;
        let open = |name: &str| OpenOptions::new().create(true).append(true).open(dir.join(name));
        Ok(Self {
            history: Some(open("history.jsonl")?),
            steps: Some(open("steps.jsonl")?),
        })
    }

    fn line<T: Serialize>(file: &mut Option<File>, value: &T) -> Result<(), TrainError> {
        if let Some(f) = file {
            let mut s = serde_json::to_string(value).expect("record serializes");
            s.push('\n');
            f.write_all(s.as_bytes())?;
        }
        Ok(())
    }
}

fn segment_data<'a>(data: &'a DataMap, id: &str) -> Result<&'a StageData, TrainError> {
    let d = data.get(id).ok_or_else(|| TrainError::UnknownDataset(id.to_string()))?;
    if d.train.is_empty() {
        return Err(TrainError::EmptySplit(id.to_string(), "train"));
    }
    if d.dev.is_empty() {
        return Err(TrainError::EmptySplit(id.to_string(), "dev"));
    }
    Ok(d)
}

/// Run segments in order on one parameter store. After each segment the
/// selected epoch's parameters become the starting point of the next.
pub(crate) fn run_segments<M: TextToTextModel + ?Sized>(
    model: &mut M,
    segments: &[Segment],
    data: &DataMap,
    cfg: &TrainConfig,
) -> Result<TrainingHistory, TrainError> {
    for s in segments {
        segment_data(data, &s.dataset_id)?;
    }
    if cfg.batch_size == 0 {
        return Err(TrainError::InvalidStage {
            stage: "*".into(),
            reason: "batch_size must be >= 1".into(),
        });
    }
    cfg.generation.validate()?;
    let mut sinks = Sinks::open(cfg)?;
    let mut history = TrainingHistory::default();

    for (ordinal, seg) in segments.iter().enumerate() {
        let split = segment_data(data, &seg.dataset_id)?;
        let train = split.train.examples();
        let start_digest = model.parameters().digest();
        let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr).with_max_grad_norm(cfg.max_grad_norm);
        let mut snapshots: Vec<ParameterStore> = Vec::with_capacity(seg.epochs);

        for epoch in 0..seg.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[ordinal as u64, epoch as u64]));
            order.shuffle(&mut rng);

            let (mut loss_sum, mut label_sum, mut expl_sum) = (0.0, 0.0, 0.0);
            for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
                let mut losses = Vec::with_capacity(batch.len());
                let (mut l1, mut l2) = (0.0, 0.0);
                for &i in batch {
                    let el = example_loss(model, &train[i], seg.objective, cfg)?;
                    l1 += el.label_loss.unwrap_or(0.0);
                    l2 += el.expl_loss.unwrap_or(0.0);
                    losses.push(el.loss);
                }
                let n = batch.len() as f64;
                let result = train_step(model, Loss::mean(losses), &mut optimizer)?;
                loss_sum += result.loss_value * n;
                label_sum += l1;
                expl_sum += l2;
                let two_pass = matches!(seg.objective, Objective::TwoPass { .. });
                let w_label = match seg.objective {
                    Objective::TwoPass { weights, .. } => Some(weights.w_label()),
                    Objective::Sft { .. } => None,
                };
                let rec = StepRecord {
                    segment: seg.name.clone(),
                    epoch,
                    step,
                    loss: result.loss_value,
                    gradient_norm: result.gradient_norm,
                    label_loss: two_pass.then_some(l1 / n),
                    expl_loss: two_pass.then_some(l2 / n),
                    w_label,
                };
                Sinks::line(&mut sinks.steps, &rec)?;
                history.steps.push(rec);
            }

            let n_train = train.len() as f64;
            let (report, _) = evalharness::evaluate(model, &split.dev, &cfg.eval_settings(seg.eval_regime))?;
            let mut dev_loss = 0.0;
            for e in split.dev.examples() {
                dev_loss += example_loss(model, e, seg.objective, cfg)?.loss.value();
            }
            dev_loss /= split.dev.len() as f64;

            let (label_loss, expl_loss, w_label) = match seg.objective {
                Objective::TwoPass { weights, .. } => (
                    Some(label_sum / n_train),
                    Some(expl_sum / n_train),
                    Some(weights.w_label()),
                ),
                Objective::Sft { .. } => (None, None, None),
            };
            let record = EpochRecord {
                stage_index: seg.stage_index,
                segment: seg.name.clone(),
                dataset_id: seg.dataset_id.clone(),
                epoch,
                train_loss: loss_sum / n_train,
                dev_acc_at_0: report.acc_at_0,
                dev_acc_at_50: report.acc_at_50,
                dev_acc_at_60: report.acc_at_60,
                dev_loss,
                param_digest: model.parameters().digest(),
                label_loss,
                expl_loss,
                w_label,
            };
            Sinks::line(&mut sinks.history, &record)?;
            history.records.push(record);

            if let (Some(dir), true) = (&cfg.artifact_dir, cfg.save_epoch_checkpoints) {
                let path = dir
                    .join("checkpoints")
                    .join(seg.name.replace('/', "_"))
                    .join(format!("epoch_{epoch:02}"));
                model.save_checkpoint(&path, serde_json::json!({ "segment": seg.name, "epoch": epoch }))?;
            }
            snapshots.push(model.parameters().clone());
        }

        let selected = select_checkpoint(&history, &seg.name, seg.metric)?;
        model.parameters_mut().copy_from(&snapshots[selected]);
        history.segments.push(SegmentSummary {
            segment: seg.name.clone(),
            stage_index: seg.stage_index,
            start_digest,
            selected_epoch: selected,
            selected_digest: model.parameters().digest(),
        });
    }
    Ok(history)
}

pub(crate) fn validate_stage(stage: &Stage, data: &DataMap) -> Result<(), TrainError> {
    let d = data
        .get(&stage.dataset_id)
        .ok_or_else(|| TrainError::UnknownDataset(stage.dataset_id.clone()))?;
    let invalid = |reason: &str| TrainError::InvalidStage {
        stage: stage.dataset_id.clone(),
        reason: reason.to_string(),
    };
    if stage.epochs == 0 {
        return Err(invalid("epochs must be >= 1"));
    }
    if stage.include_explanation != d.train.schema().has_explanations {
        return Err(invalid(
            "include_explanation must match whether the schema carries explanations",
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn history(segment: &str, values: &[f64], metric: SelectionMetric) -> TrainingHistory {
        let records = values
            .iter()
            .enumerate()
            .map(|(epoch, v)| EpochRecord {
                stage_index: 0,
                segment: segment.into(),
                dataset_id: segment.into(),
                epoch,
                train_loss: 0.0,
                dev_acc_at_0: if metric == SelectionMetric::AccAt0 { *v } else { 0.0 },
                dev_acc_at_50: 0.0,
                dev_acc_at_60: if metric == SelectionMetric::AccAt60 { *v } else { 0.0 },
                dev_loss: if metric == SelectionMetric::DevLoss { *v } else { 0.0 },
                param_digest: String::new(),
                label_loss: None,
                expl_loss: None,
                w_label: None,
            })
            .collect();
        TrainingHistory {
            records,
            ..Default::default()
        }
    }

    #[test]
    fn selection_argmax_earliest_tie() {
        let h = history("figlang", &[0.2, 0.5, 0.5, 0.4], SelectionMetric::AccAt60);
        assert_eq!(select_checkpoint(&h, "figlang", SelectionMetric::AccAt60).unwrap(), 1);
    }

    #[test]
    fn selection_argmin_dev_loss() {
        let h = history("impli", &[3.0, 2.1, 2.5], SelectionMetric::DevLoss);
        assert_eq!(select_checkpoint(&h, "impli", SelectionMetric::DevLoss).unwrap(), 1);
    }

    #[test]
    fn selection_monotone_and_unknown() {
        let vals: Vec<f64> = (0..10).map(|i| i as f64 / 10.0).collect();
        let h = history("figlang", &vals, SelectionMetric::AccAt0);
        assert_eq!(select_checkpoint(&h, "figlang", SelectionMetric::AccAt0).unwrap(), 9);
        assert!(matches!(
            select_checkpoint(&h, "esnli", SelectionMetric::AccAt0),
            Err(TrainError::UnknownStage(_))
        ));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[0, 0]), derive_seed(1, &[0, 1]));
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(5, &[2, 3]), derive_seed(5, &[2, 3]));
    }
}
