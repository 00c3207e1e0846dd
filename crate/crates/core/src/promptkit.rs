//! Source/target text templates and the inverse parser for generated text.
//!
//! The wire format is frozen:
//!
//! ```text
//! source: figurative hypothesis: <hypothesis>  premise: <premise>
//! target: <label> explanation: <explanation>
//! ```
//!
//! Note the two spaces before `premise:`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Label, NliExample};

pub const HYPOTHESIS_PREFIX: &str = "figurative hypothesis: ";
pub const PREMISE_SEPARATOR: &str = "  premise: ";
pub const PREMISE_PREFIX: &str = "premise: ";
pub const EXPLANATION_SEPARATOR: &str = " explanation: ";

pub const SOURCE_TEMPLATE: &str = "figurative hypothesis: {hypothesis}  premise: {premise}";
pub const SECOND_PASS_TEMPLATE: &str = "{label} figurative hypothesis: {hypothesis}  premise: {premise}";
pub const TARGET_TEMPLATE: &str = "{label} explanation: {explanation}";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("second-pass source requested without an injected label")]
    MissingLabel,
    #[error("target with explanation requested but the example has none")]
    MissingExplanation,
}

/// Which fields of an example reach the model input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SourceVariant {
    #[default]
    Standard,
    HypothesisOnly,
    PremiseOnly,
    SecondPassWithLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceMode {
    pub variant: SourceVariant,
    pub injected_label: Option<Label>,
}

impl SourceMode {
    pub const STANDARD: SourceMode = SourceMode::plain(SourceVariant::Standard);
    pub const HYPOTHESIS_ONLY: SourceMode = SourceMode::plain(SourceVariant::HypothesisOnly);
    pub const PREMISE_ONLY: SourceMode = SourceMode::plain(SourceVariant::PremiseOnly);

    pub const fn plain(variant: SourceVariant) -> Self {
        Self {
            variant,
            injected_label: None,
        }
    }

    pub const fn second_pass(label: Label) -> Self {
        Self {
            variant: SourceVariant::SecondPassWithLabel,
            injected_label: Some(label),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub source_text: String,
    pub target_text: String,
}

fn standard(e: &NliExample) -> String {
    format!("{HYPOTHESIS_PREFIX}{}{PREMISE_SEPARATOR}{}", e.hypothesis, e.premise)
}

pub fn serialize_source(e: &NliExample, mode: SourceMode) -> Result<String, PromptError> {
    Ok(match mode.variant {
        SourceVariant::Standard => standard(e),
        SourceVariant::HypothesisOnly => format!("{HYPOTHESIS_PREFIX}{}", e.hypothesis),
        SourceVariant::PremiseOnly => format!("{PREMISE_PREFIX}{}", e.premise),
        SourceVariant::SecondPassWithLabel => {
            let label = mode.injected_label.ok_or(PromptError::MissingLabel)?;
            format!("{label} {}", standard(e))
        }
    })
}

/// Pass-2 input: the label prepended to whatever base view of the example
/// the run uses. With `base = Standard` this is exactly the
/// `SecondPassWithLabel` source.
pub fn second_pass_source(e: &NliExample, base: SourceVariant, label: Label) -> Result<String, PromptError> {
    match base {
        SourceVariant::Standard | SourceVariant::SecondPassWithLabel => {
            serialize_source(e, SourceMode::second_pass(label))
        }
        other => Ok(format!("{label} {}", serialize_source(e, SourceMode::plain(other))?)),
    }
}

pub fn serialize_target(e: &NliExample, include_explanation: bool) -> Result<String, PromptError> {
    if !include_explanation {
        return Ok(e.label.to_string());
    }
    let explanation = e.explanation.as_deref().ok_or(PromptError::MissingExplanation)?;
    Ok(format!("{}{EXPLANATION_SEPARATOR}{explanation}", e.label))
}

pub fn serialize_pair(
    e: &NliExample,
    mode: SourceMode,
    include_explanation: bool,
) -> Result<PromptPair, PromptError> {
    Ok(PromptPair {
        source_text: serialize_source(e, mode)?,
        target_text: serialize_target(e, include_explanation)?,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedOutput {
    pub label: Label,
    pub explanation: String,
    pub parse_ok: bool,
}

/// Total inverse of the target template. Never fails; unrecognized text
/// falls back to the first vocabulary label with `parse_ok = false`.
pub fn parse_prediction(generated: &str, vocab: &[Label]) -> ParsedOutput {
    let fallback = || ParsedOutput {
        label: vocab.first().copied().unwrap_or(Label::Entailment),
        explanation: generated.to_string(),
        parse_ok: false,
    };
    for &label in vocab {
        let name = label.as_str();
        let Some(head) = generated.get(..name.len()) else {
            continue;
        };
        if !head.eq_ignore_ascii_case(name) {
            continue;
        }
        let rest = &generated[name.len()..];
        if let Some(explanation) = rest.strip_prefix(EXPLANATION_SEPARATOR) {
            return ParsedOutput {
                label,
                explanation: explanation.to_string(),
                parse_ok: true,
            };
        }
        // generation joins tokens with single spaces, so an empty explanation
        // arrives without the trailing separator space
        if rest == EXPLANATION_SEPARATOR.trim_end() || rest.trim().is_empty() {
            return ParsedOutput {
                label,
                explanation: String::new(),
                parse_ok: true,
            };
        }
    }
    fallback()
}
