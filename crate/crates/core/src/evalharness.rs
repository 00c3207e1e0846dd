//! Shared-task metrics: explanation score (mean of pluggable 0-100 scorers),
//! label accuracy gated by an explanation-score threshold (Acc@τ), and the
//! per-figurative-type breakdown, plus JSON/CSV report emission.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Dataset, FigType, Label, NliExample};
use crate::modelcore::{GenerationConfig, TextToTextModel};
use crate::promptkit::{self, parse_prediction, PromptError, SourceMode, SourceVariant};

/// Thresholds reported by the shared task.
pub const THRESHOLDS: [f64; 3] = [0.0, 50.0, 60.0];

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no explanation scorers configured")]
    NoScorers,
    #[error("reference explanation is empty")]
    EmptyReference,
    #[error("{predictions} predictions for {gold} gold examples")]
    LengthMismatch { predictions: usize, gold: usize },
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("csv error: {0}")]
    Csv(String),
}

/// Parsed model output plus its explanation score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub label: Label,
    pub explanation: String,
    pub parse_ok: bool,
    pub expl_score: f64,
}

/// Text-similarity scorer normalized to [0, 100] with `score(x, x) = 100`
/// for non-empty `x`. Scaling raw metric outputs is the adapter's job.
pub trait ExplanationScorer: Send + Sync {
    fn name(&self) -> &str;
    fn score(&self, candidate: &str, reference: &str) -> f64;
}

impl std::fmt::Debug for dyn ExplanationScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "ExplanationScorer({})", self.name())
    }
}

/// Deterministic stand-in for learned scorers: 100 × unigram F1 over
/// lowercased whitespace tokens with trailing punctuation stripped.
#[derive(Debug, Clone, Copy, Default)]
pub struct TokenF1Scorer;

fn normalized_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| t.trim_end_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

impl ExplanationScorer for TokenF1Scorer {
    fn name(&self) -> &str {
        "token_f1"
    }

    fn score(&self, candidate: &str, reference: &str) -> f64 {
        let cand = normalized_tokens(candidate);
        let refs = normalized_tokens(reference);
        if cand.is_empty() || refs.is_empty() {
            // self-identity for inputs that normalize to nothing
            return if cand.is_empty() && refs.is_empty() && !candidate.trim().is_empty() {
                100.0
            } else {
                0.0
            };
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in &refs {
            *counts.entry(t.as_str()).or_default() += 1;
        }
        let mut overlap = 0usize;
        for t in &cand {
            if let Some(c) = counts.get_mut(t.as_str()) {
                if *c > 0 {
                    *c -= 1;
                    overlap += 1;
                }
            }
        }
        if overlap == 0 {
            return 0.0;
        }
        let precision = overlap as f64 / cand.len() as f64;
        let recall = overlap as f64 / refs.len() as f64;
        100.0 * 2.0 * precision * recall / (precision + recall)
    }
}

pub fn surrogate_scorer() -> Arc<dyn ExplanationScorer> {
    Arc::new(TokenF1Scorer)
}

/// Mean of the scorers' outputs, clamped to [0, 100].
pub fn explanation_score(
    candidate: &str,
    reference: &str,
    scorers: &[Arc<dyn ExplanationScorer>],
) -> Result<f64, EvalError> {
    if scorers.is_empty() {
        return Err(EvalError::NoScorers);
    }
    if reference.trim().is_empty() {
        return Err(EvalError::EmptyReference);
    }
    let total: f64 = scorers.iter().map(|s| s.score(candidate, reference)).sum();
    Ok((total / scorers.len() as f64).clamp(0.0, 100.0))
}

fn check_aligned(preds: &[Prediction], gold: &[NliExample]) -> Result<(), EvalError> {
    if preds.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            predictions: preds.len(),
            gold: gold.len(),
        });
    }
    if gold.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    Ok(())
}

/// Fraction of examples with the correct label and `expl_score >= tau`.
pub fn acc_at(preds: &[Prediction], gold: &[NliExample], tau: f64) -> Result<f64, EvalError> {
    check_aligned(preds, gold)?;
    let hits = preds
        .iter()
        .zip(gold)
        .filter(|(p, g)| p.label == g.label && p.expl_score >= tau)
        .count();
    Ok(hits as f64 / gold.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub acc_at_0: f64,
    pub acc_at_50: f64,
    pub acc_at_60: f64,
    pub per_type_acc: BTreeMap<FigType, f64>,
    pub n_examples: usize,
    pub n_parse_failures: usize,
}

impl EvalReport {
    /// All metrics from one set of scored predictions.
    pub fn from_predictions(preds: &[Prediction], gold: &[NliExample]) -> Result<Self, EvalError> {
        Self::with_type_threshold(preds, gold, 0.0)
    }

    pub fn with_type_threshold(
        preds: &[Prediction],
        gold: &[NliExample],
        type_tau: f64,
    ) -> Result<Self, EvalError> {
        check_aligned(preds, gold)?;
        let mut per_type: BTreeMap<FigType, (usize, usize)> = BTreeMap::new();
        for (p, g) in preds.iter().zip(gold) {
            if let Some(ty) = g.fig_type {
                let entry = per_type.entry(ty).or_default();
                entry.1 += 1;
                if p.label == g.label && p.expl_score >= type_tau {
                    entry.0 += 1;
                }
            }
        }
        Ok(Self {
            acc_at_0: acc_at(preds, gold, THRESHOLDS[0])?,
            acc_at_50: acc_at(preds, gold, THRESHOLDS[1])?,
            acc_at_60: acc_at(preds, gold, THRESHOLDS[2])?,
            per_type_acc: per_type
                .into_iter()
                .map(|(ty, (hit, n))| (ty, hit as f64 / n as f64))
                .collect(),
            n_examples: gold.len(),
            n_parse_failures: preds.iter().filter(|p| !p.parse_ok).count(),
        })
    }

    pub fn accuracies(&self) -> [f64; 3] {
        [self.acc_at_0, self.acc_at_50, self.acc_at_60]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// `setting,Acc@0,Acc@50,Acc@60` with one row, values in percent.
    pub fn to_csv(&self, setting: &str) -> Result<String, EvalError> {
        accuracy_table_csv(&[(setting.to_string(), self.accuracies())])
    }

    /// `type,accuracy` in percent, one row per annotated type.
    pub fn per_type_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| EvalError::Csv(e.to_string());
        w.write_record(["type", "accuracy"]).map_err(csv_err)?;
        for (ty, acc) in &self.per_type_acc {
            w.write_record([ty.as_str(), &percent(*acc)]).map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

/// Ratio rendered as a percentage with two decimals, e.g. `0.9216 -> 92.16`.
pub fn percent(ratio: f64) -> String {
    let v = ratio * 100.0;
    format!("{:.2}", if v == 0.0 { 0.0 } else { v })
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String, EvalError> {
    let bytes = w.into_inner().map_err(|e| EvalError::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| EvalError::Csv(e.to_string()))
}

/// Accuracy table: `setting,Acc@0,Acc@50,Acc@60`.
pub fn accuracy_table_csv(rows: &[(String, [f64; 3])]) -> Result<String, EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| EvalError::Csv(e.to_string());
    w.write_record(["setting", "Acc@0", "Acc@50", "Acc@60"]).map_err(csv_err)?;
    for (setting, accs) in rows {
        w.write_record([
            setting.as_str(),
            &percent(accs[0]),
            &percent(accs[1]),
            &percent(accs[2]),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}

/// How predictions are produced from a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalRegime {
    /// One generation, parsed as `{label} explanation: {explanation}`.
    SingleShot,
    /// Label from a first generation, explanation from a second generation
    /// conditioned on that label.
    TwoPass,
}

/// Everything needed to turn a model and dataset into predictions.
pub struct EvalSettings<'a> {
    pub regime: EvalRegime,
    pub source: SourceVariant,
    pub generation: GenerationConfig,
    pub vocab: &'a [Label],
    pub scorers: &'a [Arc<dyn ExplanationScorer>],
}

/// Unscored prediction from one example.
pub fn predict<M: TextToTextModel + ?Sized>(
    model: &M,
    e: &NliExample,
    settings: &EvalSettings<'_>,
) -> Result<Prediction, EvalError> {
    let (label, explanation, parse_ok) = match settings.regime {
        EvalRegime::SingleShot => {
            let source = promptkit::serialize_source(e, SourceMode::plain(settings.source))?;
            let parsed = parse_prediction(&model.generate(&source, &settings.generation), settings.vocab);
            (parsed.label, parsed.explanation, parsed.parse_ok)
        }
        EvalRegime::TwoPass => {
            let p = crate::training::hifeat::predict_two_pass_with(
                model,
                e,
                settings.source,
                &settings.generation,
                settings.vocab,
            )?;
            (p.label, p.explanation, p.parse_ok)
        }
    };
    Ok(Prediction {
        label,
        explanation,
        parse_ok,
        expl_score: 0.0,
    })
}

/// Fill `expl_score` against the gold explanation. Examples without a gold
/// explanation score 0, so they only count toward Acc@0.
pub fn score_prediction(
    p: &mut Prediction,
    gold: &NliExample,
    scorers: &[Arc<dyn ExplanationScorer>],
) -> Result<(), EvalError> {
    p.expl_score = match gold.explanation.as_deref() {
        Some(reference) if !reference.trim().is_empty() => explanation_score(&p.explanation, reference, scorers)?,
        _ => 0.0,
    };
    Ok(())
}

/// Generate, parse and score every example, then aggregate.
pub fn evaluate<M: TextToTextModel + ?Sized>(
    model: &M,
    dataset: &Dataset,
    settings: &EvalSettings<'_>,
) -> Result<(EvalReport, Vec<Prediction>), EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyEvalSet);
    }
    if settings.scorers.is_empty() {
        return Err(EvalError::NoScorers);
    }
    let mut preds = Vec::with_capacity(dataset.len());
    for e in dataset.examples() {
        let mut p = predict(model, e, settings)?;
        score_prediction(&mut p, e, settings.scorers)?;
        preds.push(p);
    }
    let report = EvalReport::from_predictions(&preds, dataset.examples())?;
    Ok((report, preds))
}
