//! Run manifests and cross-run comparison tables.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::RunnerError;
use crate::corpus::FigType;
use crate::evalharness::{self, EvalRegime, EvalReport};
use crate::promptkit::SourceVariant;
use crate::training::{EpochRecord, LabelSource, SegmentSummary, Stage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed { error: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSetting {
    pub regime: EvalRegime,
    pub source: SourceVariant,
    pub dataset_id: String,
    /// SHA-256 of the eval split's JSONL bytes.
    pub split_digest: String,
    pub n_examples: usize,
    pub scorers: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArtifactPaths {
    pub history: Option<String>,
    pub steps: Option<String>,
    pub report_json: Option<String>,
    pub report_csv: Option<String>,
    pub per_type_csv: Option<String>,
    pub predictions: Option<String>,
    pub eval_data: Option<String>,
    pub final_checkpoint: Option<String>,
    #[serde(default)]
    pub epoch_checkpoints: Vec<String>,
}

/// Everything needed to audit and compare a run. Paths are relative to the
/// run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub framework_version: String,
    pub run_name: String,
    /// Label used in comparison tables.
    pub setting: String,
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub status: RunStatus,
    pub templates: BTreeMap<String, String>,
    pub stages: Vec<Stage>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label_source: Option<LabelSource>,
    pub dataset_sizes: BTreeMap<String, (usize, usize)>,
    pub vocab_hash: Option<String>,
    pub history: Vec<EpochRecord>,
    pub segments: Vec<SegmentSummary>,
    pub eval: Option<EvalSetting>,
    pub report: Option<EvalReport>,
    pub artifacts: ArtifactPaths,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, RunnerError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| RunnerError::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| RunnerError::Manifest(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), RunnerError> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text).map_err(|e| RunnerError::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TypeDelta {
    pub setting: String,
    pub fig_type: FigType,
    /// Percentages.
    pub baseline: f64,
    pub value: f64,
    pub delta: String,
}

/// Settings × accuracies, plus per-type deltas against the first manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<(String, [f64; 3])>,
    pub type_deltas: Vec<TypeDelta>,
}

impl ComparisonTable {
    pub fn to_csv(&self) -> Result<String, RunnerError> {
        Ok(evalharness::accuracy_table_csv(&self.rows)?)
    }

    /// `setting,type,baseline,value,delta`.
    pub fn type_delta_csv(&self) -> Result<String, RunnerError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| RunnerError::Eval(evalharness::EvalError::Csv(e.to_string()));
        w.write_record(["setting", "type", "baseline", "value", "delta"]).map_err(csv_err)?;
        for d in &self.type_deltas {
            w.write_record([
                d.setting.as_str(),
                d.fig_type.as_str(),
                &format!("{:.2}", d.baseline),
                &format!("{:.2}", d.value),
                &d.delta,
            ])
            .map_err(csv_err)?;
        }
        Ok(evalharness::finish_csv(w)?)
    }
}

fn no_negative_zero(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v
    }
}

/// `"+5.63 (+7.8% rel)"` for 72.50 -> 78.13 (values in percent).
pub fn format_delta(baseline: f64, value: f64) -> String {
    let abs = no_negative_zero(((value - baseline) * 100.0).round() / 100.0);
    if baseline == 0.0 {
        return format!("{abs:+.2} (n/a rel)");
    }
    let rel = no_negative_zero(((value - baseline) / baseline * 1000.0).round() / 10.0);
    format!("{abs:+.2} ({rel:+.1}% rel)")
}

/// Compare completed runs over one eval split. The first manifest is the
/// baseline for per-type deltas.
pub fn emit_comparison(manifests: &[RunManifest]) -> Result<ComparisonTable, RunnerError> {
    if manifests.len() < 2 {
        return Err(RunnerError::TooFewManifests(manifests.len()));
    }
    let mut reports = Vec::with_capacity(manifests.len());
    for m in manifests {
        match (&m.status, &m.report, &m.eval) {
            (RunStatus::Completed, Some(r), Some(e)) => reports.push((m.setting.clone(), r, e)),
            _ => return Err(RunnerError::IncompleteRun(m.run_name.clone())),
        }
    }
    let base_split = &reports[0].2.split_digest;
    if let Some((setting, _, _)) = reports.iter().find(|(_, _, e)| &e.split_digest != base_split) {
        return Err(RunnerError::MismatchedEvalSplit(setting.clone()));
    }
    let rows = reports.iter().map(|(s, r, _)| (s.clone(), r.accuracies())).collect();
    let base = reports[0].1;
    let mut type_deltas = Vec::new();
    for (setting, r, _) in &reports[1..] {
        for (ty, base_acc) in &base.per_type_acc {
            if let Some(acc) = r.per_type_acc.get(ty) {
                let (b, v) = (base_acc * 100.0, acc * 100.0);
                type_deltas.push(TypeDelta {
                    setting: setting.clone(),
                    fig_type: *ty,
                    baseline: b,
                    value: v,
                    delta: format_delta(b, v),
                });
            }
        }
    }
    Ok(ComparisonTable { rows, type_deltas })
}
