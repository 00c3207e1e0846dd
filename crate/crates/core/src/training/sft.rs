//! Sequential fine-tuning: one model trained through an ordered list of
//! dataset stages, each with its own epoch budget, target format and
//! selection metric.

use super::{run_segments, validate_stage, DataMap, Objective, Segment, Stage, TrainConfig, TrainError, TrainingHistory};
use crate::evalharness::EvalRegime;
use crate::modelcore::TextToTextModel;

/// Train `model` through `stages` in order. The model ends up holding the
/// parameters selected for the final stage.
pub fn run_sft<M: TextToTextModel + ?Sized>(
    model: &mut M,
    stages: &[Stage],
    data: &DataMap,
    cfg: &TrainConfig,
) -> Result<TrainingHistory, TrainError> {
    for stage in stages {
        validate_stage(stage, data)?;
    }
    let segments: Vec<Segment> = stages
        .iter()
        .enumerate()
        .map(|(i, stage)| Segment {
            name: stage.dataset_id.clone(),
            stage_index: i,
            dataset_id: stage.dataset_id.clone(),
            epochs: stage.epochs,
            metric: stage.selection_metric,
            objective: Objective::Sft {
                include_explanation: stage.include_explanation,
            },
            eval_regime: EvalRegime::SingleShot,
        })
        .collect();
    run_segments(model, &segments, data, cfg)
}
