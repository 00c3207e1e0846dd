//! Hierarchical feature-pipeline multi-task learning.
//!
//! Each training example runs two passes through the same parameters:
//! pass 1 predicts the label from the standard source, pass 2 generates
//! `{label} explanation: {explanation}` from a source prefixed with the
//! conditioning label. The step loss is `w_label·L1 + w_expl·L2`. The label
//! fed to pass 2 is decoded text, so no gradient flows through it.

use serde::{Deserialize, Serialize};

use super::{
    run_segments, validate_stage, DataMap, Objective, Segment, SelectionMetric, Stage, TrainConfig, TrainError,
    TrainingHistory,
};
use crate::corpus::{Label, NliExample};
use crate::evalharness::{EvalRegime, Prediction};
use crate::modelcore::{GenerationConfig, Loss, TextToTextModel};
use crate::promptkit::{self, parse_prediction, PromptError, SourceMode, SourceVariant};

/// Loss weights for one phase; `w_expl` is always `1 - w_label`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseWeights {
    w_label: f64,
}

impl PhaseWeights {
    pub fn new(w_label: f64) -> Result<Self, TrainError> {
        if !(0.0..=1.0).contains(&w_label) {
            return Err(TrainError::InvalidStage {
                stage: "phase".into(),
                reason: format!("w_label {w_label} outside [0, 1]"),
            });
        }
        Ok(Self { w_label })
    }

    /// 90% on the inference loss.
    pub fn label_heavy() -> Self {
        Self { w_label: 0.9 }
    }

    /// 90% on the explanation loss.
    pub fn explanation_heavy() -> Self {
        Self { w_label: 0.1 }
    }

    pub fn label_only() -> Self {
        Self { w_label: 1.0 }
    }

    pub fn w_label(&self) -> f64 {
        self.w_label
    }

    pub fn w_expl(&self) -> f64 {
        1.0 - self.w_label
    }
}

#[derive(Serialize, Deserialize)]
struct WeightsRepr {
    w_label: f64,
    w_expl: f64,
}

impl Serialize for PhaseWeights {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        WeightsRepr {
            w_label: self.w_label,
            w_expl: self.w_expl(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for PhaseWeights {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let r = WeightsRepr::deserialize(d)?;
        if (r.w_label + r.w_expl - 1.0).abs() > 1e-9 {
            return Err(serde::de::Error::custom("w_label + w_expl must equal 1"));
        }
        PhaseWeights::new(r.w_label).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub weights: PhaseWeights,
    pub epochs: usize,
}

impl Phase {
    /// `[(0.9 label, epochs), (0.9 explanation, epochs)]` for explanation
    /// datasets, a single label-only phase otherwise.
    pub fn default_plan(has_explanations: bool, epochs: usize) -> Vec<Phase> {
        if has_explanations {
            vec![
                Phase {
                    weights: PhaseWeights::label_heavy(),
                    epochs,
                },
                Phase {
                    weights: PhaseWeights::explanation_heavy(),
                    epochs,
                },
            ]
        } else {
            vec![Phase {
                weights: PhaseWeights::label_only(),
                epochs,
            }]
        }
    }
}

/// Where pass 2's conditioning label comes from during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    #[default]
    Gold,
    Predicted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPassBatchResult {
    pub label_loss: f64,
    pub expl_loss: f64,
    pub combined_loss: f64,
    pub w_label: f64,
    pub label_source_used: LabelSource,
    /// Label injected into pass 2; `None` when pass 2 did not run.
    pub conditioning_label: Option<Label>,
}

/// Values plus the differentiable combined loss.
#[derive(Debug, Clone)]
pub struct TwoPassOutput {
    pub result: TwoPassBatchResult,
    pub combined: Loss,
}

pub struct TwoPassOptions<'a> {
    pub source: SourceVariant,
    pub generation: GenerationConfig,
    pub vocab: &'a [Label],
}

impl Default for TwoPassOptions<'static> {
    fn default() -> Self {
        Self {
            source: SourceVariant::Standard,
            generation: GenerationConfig::default(),
            vocab: &Label::ALL,
        }
    }
}

/// Forward both passes for one example.
///
/// An example without an explanation runs pass 1 only, which is allowed
/// only when `w_expl` is zero.
pub fn forward_two_pass<M: TextToTextModel + ?Sized>(
    model: &M,
    e: &NliExample,
    label_source: LabelSource,
    weights: PhaseWeights,
    opts: &TwoPassOptions<'_>,
) -> Result<TwoPassOutput, TrainError> {
    let source = promptkit::serialize_source(e, SourceMode::plain(opts.source))?;
    let label_target = promptkit::serialize_target(e, false)?;
    let label_loss = model.compute_loss(&source, &label_target)?;
    let l1 = label_loss.value();

    if e.explanation.is_none() {
        if weights.w_expl() != 0.0 {
            return Err(PromptError::MissingExplanation.into());
        }
        let combined = Loss::weighted_sum(vec![(weights.w_label(), label_loss)]);
        return Ok(TwoPassOutput {
            result: TwoPassBatchResult {
                label_loss: l1,
                expl_loss: 0.0,
                combined_loss: combined.value(),
                w_label: weights.w_label(),
                label_source_used: label_source,
                conditioning_label: None,
            },
            combined,
        });
    }

    let conditioning = match label_source {
        LabelSource::Gold => e.label,
        LabelSource::Predicted => {
            parse_prediction(&model.generate(&source, &opts.generation), opts.vocab).label
        }
    };
    let pass2_source = promptkit::second_pass_source(e, opts.source, conditioning)?;
    let expl_target = promptkit::serialize_target(e, true)?;
    let expl_loss = model.compute_loss(&pass2_source, &expl_target)?;
    let l2 = expl_loss.value();
    let combined = Loss::weighted_sum(vec![(weights.w_label(), label_loss), (weights.w_expl(), expl_loss)]);
    Ok(TwoPassOutput {
        result: TwoPassBatchResult {
            label_loss: l1,
            expl_loss: l2,
            combined_loss: combined.value(),
            w_label: weights.w_label(),
            label_source_used: label_source,
            conditioning_label: Some(conditioning),
        },
        combined,
    })
}

/// Train through `stages`; `phase_plan[i]` lists the phases of stage `i`.
/// Multi-phase stages get one selectable segment per phase, named
/// `{dataset}/phase{k}`.
pub fn run_hifeat<M: TextToTextModel + ?Sized>(
    model: &mut M,
    stages: &[Stage],
    phase_plan: &[Vec<Phase>],
    label_source: LabelSource,
    data: &DataMap,
    cfg: &TrainConfig,
) -> Result<TrainingHistory, TrainError> {
    if phase_plan.len() != stages.len() {
        return Err(TrainError::InvalidStage {
            stage: "*".into(),
            reason: format!("{} phase lists for {} stages", phase_plan.len(), stages.len()),
        });
    }
    let mut segments = Vec::new();
    for (i, (stage, phases)) in stages.iter().zip(phase_plan).enumerate() {
        validate_stage(stage, data)?;
        let invalid = |reason: String| TrainError::InvalidStage {
            stage: stage.dataset_id.clone(),
            reason,
        };
        if phases.is_empty() {
            return Err(invalid("no phases".into()));
        }
        if stage.selection_metric == SelectionMetric::DevLoss {
            return Err(invalid("dev loss is not a selection metric under summed losses".into()));
        }
        for (k, phase) in phases.iter().enumerate() {
            if phase.epochs == 0 {
                return Err(invalid("phase epochs must be >= 1".into()));
            }
            if !stage.include_explanation && phase.weights.w_label() != 1.0 {
                return Err(invalid("explanation-free stages train pass 1 only (weights (1, 0))".into()));
            }
            let name = if phases.len() == 1 {
                stage.dataset_id.clone()
            } else {
                format!("{}/phase{}", stage.dataset_id, k + 1)
            };
            segments.push(Segment {
                name,
                stage_index: i,
                dataset_id: stage.dataset_id.clone(),
                epochs: phase.epochs,
                metric: stage.selection_metric,
                objective: Objective::TwoPass {
                    weights: phase.weights,
                    label_source,
                },
                eval_regime: EvalRegime::TwoPass,
            });
        }
    }
    run_segments(model, &segments, data, cfg)
}

pub(crate) struct TwoPassParsed {
    pub label: Label,
    pub explanation: String,
    pub parse_ok: bool,
}

pub(crate) fn predict_two_pass_with<M: TextToTextModel + ?Sized>(
    model: &M,
    e: &NliExample,
    source: SourceVariant,
    cfg: &GenerationConfig,
    vocab: &[Label],
) -> Result<TwoPassParsed, PromptError> {
    let first = parse_prediction(
        &model.generate(&promptkit::serialize_source(e, SourceMode::plain(source))?, cfg),
        vocab,
    );
    let second = parse_prediction(
        &model.generate(&promptkit::second_pass_source(e, source, first.label)?, cfg),
        vocab,
    );
    Ok(TwoPassParsed {
        label: first.label,
        explanation: second.explanation,
        parse_ok: first.parse_ok && second.parse_ok,
    })
}

/// Label from pass 1, explanation from pass 2 conditioned on that label.
/// The returned prediction is unscored (`expl_score = 0`).
pub fn predict_two_pass<M: TextToTextModel + ?Sized>(
    model: &M,
    e: &NliExample,
    cfg: &GenerationConfig,
) -> Prediction {
    let p = predict_two_pass_with(model, e, SourceVariant::Standard, cfg, &Label::ALL)
        .expect("standard and labelled sources always serialize");
    Prediction {
        label: p.label,
        explanation: p.explanation,
        parse_ok: p.parse_ok,
        expl_score: 0.0,
    }
}
