//! JSONL loading, validation, truncation and dev splitting for the three
//! dataset families: FigLang-style (explanations + figurative types),
//! eSNLI-style (explanations only) and IMPLI-style (labels only).

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: malformed JSON record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: missing required field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: field `{field}` is empty")]
    EmptyField { line: usize, field: &'static str },
    #[error("line {line}: label `{label}` is outside the label vocabulary")]
    UnknownLabel { line: usize, label: String },
    #[error("line {line}: unknown figurative type `{value}`")]
    UnknownFigType { line: usize, value: String },
    #[error("dataset file contains no records")]
    EmptyFile,
    #[error("split would leave the {side} side empty ({n} examples, dev fraction {fraction})")]
    DegenerateSplit {
        side: &'static str,
        n: usize,
        fraction: f64,
    },
    #[error("dev fraction {0} outside [0, 1)")]
    InvalidFraction(f64),
    #[error("dataset `{0}` carries no figurative-type annotations")]
    SchemaMismatch(String),
    #[error("example violates schema `{schema}`: {reason}")]
    SchemaViolation { schema: String, reason: String },
}

/// NLI gold label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    Entailment,
    Contradiction,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Entailment, Label::Contradiction];

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Entailment => "Entailment",
            Label::Contradiction => "Contradiction",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FigType {
    Metaphor,
    Simile,
    Idiom,
    CreativeParaphrase,
    Sarcasm,
}

impl FigType {
    pub const ALL: [FigType; 5] = [
        FigType::Metaphor,
        FigType::Simile,
        FigType::Idiom,
        FigType::CreativeParaphrase,
        FigType::Sarcasm,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FigType::Metaphor => "Metaphor",
            FigType::Simile => "Simile",
            FigType::Idiom => "Idiom",
            FigType::CreativeParaphrase => "CreativeParaphrase",
            FigType::Sarcasm => "Sarcasm",
        }
    }
}

impl fmt::Display for FigType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FigType {
    type Err = ();

    /// Accepts the canonical names plus the lowercase / spaced spellings
    /// found in the public FigLang release ("creative paraphrase", "idioms").
    fn from_str(s: &str) -> Result<Self, ()> {
        let key: String = s
            .chars()
            .filter(|c| !c.is_whitespace() && *c != '_' && *c != '-')
            .collect::<String>()
            .to_lowercase();
        match key.as_str() {
            "metaphor" => Ok(FigType::Metaphor),
            "simile" => Ok(FigType::Simile),
            "idiom" | "idioms" => Ok(FigType::Idiom),
            "creativeparaphrase" => Ok(FigType::CreativeParaphrase),
            "sarcasm" => Ok(FigType::Sarcasm),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliExample {
    pub premise: String,
    pub hypothesis: String,
    pub label: Label,
    pub explanation: Option<String>,
    pub fig_type: Option<FigType>,
    pub source_dataset: String,
}

/// Which fields a dataset family carries and how raw label strings map onto
/// [`Label`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub name: String,
    pub has_explanations: bool,
    pub has_fig_types: bool,
    pub label_vocabulary: Vec<Label>,
    /// Extra raw-label aliases, e.g. `"non-entailment" -> Contradiction`.
    #[serde(default)]
    pub label_map: BTreeMap<String, Label>,
}

impl DatasetSchema {
    pub fn figlang() -> Self {
        Self {
            name: "figlang".into(),
            has_explanations: true,
            has_fig_types: true,
            label_vocabulary: Label::ALL.to_vec(),
            label_map: BTreeMap::new(),
        }
    }

    pub fn esnli() -> Self {
        Self {
            name: "esnli".into(),
            has_explanations: true,
            has_fig_types: false,
            label_vocabulary: Label::ALL.to_vec(),
            label_map: BTreeMap::new(),
        }
    }

    pub fn impli() -> Self {
        let mut label_map = BTreeMap::new();
        label_map.insert("non-entailment".to_string(), Label::Contradiction);
        Self {
            name: "impli".into(),
            has_explanations: false,
            has_fig_types: false,
            label_vocabulary: Label::ALL.to_vec(),
            label_map,
        }
    }

    /// Resolve a raw label: explicit aliases first, then a case-insensitive
    /// match against the vocabulary.
    pub fn resolve_label(&self, raw: &str) -> Option<Label> {
        let raw = raw.trim();
        if let Some(label) = self.label_map.get(raw) {
            return Some(*label);
        }
        self.label_vocabulary
            .iter()
            .copied()
            .find(|l| l.as_str().eq_ignore_ascii_case(raw))
    }

    fn check(&self, e: &NliExample) -> Result<(), String> {
        if e.premise.trim().is_empty() || e.hypothesis.trim().is_empty() {
            return Err("premise and hypothesis must be non-empty".into());
        }
        if !self.label_vocabulary.contains(&e.label) {
            return Err(format!("label {} not in vocabulary", e.label));
        }
        if self.has_explanations
            && e.explanation.as_deref().is_none_or(|x| x.trim().is_empty())
        {
            return Err("explanation required".into());
        }
        if self.has_fig_types != e.fig_type.is_some() {
            return Err("fig_type presence disagrees with schema".into());
        }
        Ok(())
    }
}

/// An ordered, schema-validated list of examples. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    examples: Vec<NliExample>,
    schema: DatasetSchema,
}

impl Dataset {
    pub fn new(schema: DatasetSchema, examples: Vec<NliExample>) -> Result<Self, CorpusError> {
        for e in &examples {
            schema.check(e).map_err(|reason| CorpusError::SchemaViolation {
                schema: schema.name.clone(),
                reason,
            })?;
        }
        Ok(Self { examples, schema })
    }

    pub fn empty(schema: DatasetSchema) -> Self {
        Self {
            examples: Vec::new(),
            schema,
        }
    }

    pub fn examples(&self) -> &[NliExample] {
        &self.examples
    }

    pub fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    fn with_examples(&self, examples: Vec<NliExample>) -> Self {
        Self {
            examples,
            schema: self.schema.clone(),
        }
    }

    /// Serialize to the JSONL wire format.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.examples {
            out.push_str(&record_line(e));
            out.push('\n');
        }
        out
    }
}

#[derive(Deserialize)]
struct RawRecord {
    premise: Option<String>,
    hypothesis: Option<String>,
    label: Option<String>,
    explanation: Option<String>,
    fig_type: Option<String>,
}

#[derive(Serialize)]
struct WireRecord<'a> {
    premise: &'a str,
    hypothesis: &'a str,
    label: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    explanation: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    fig_type: Option<&'a str>,
}

fn record_line(e: &NliExample) -> String {
    let wire = WireRecord {
        premise: &e.premise,
        hypothesis: &e.hypothesis,
        label: e.label.as_str(),
        explanation: e.explanation.as_deref(),
        fig_type: e.fig_type.map(FigType::as_str),
    };
    serde_json::to_string(&wire).expect("string-only record always serializes")
}

fn required(
    value: Option<String>,
    line: usize,
    field: &'static str,
) -> Result<String, CorpusError> {
    match value {
        None => Err(CorpusError::MissingField { line, field }),
        Some(v) if v.trim().is_empty() => Err(CorpusError::EmptyField { line, field }),
        Some(v) => Ok(v),
    }
}

/// Parse JSONL text under `schema`. Line numbers in errors are 1-based.
pub fn parse_dataset(text: &str, schema: &DatasetSchema) -> Result<Dataset, CorpusError> {
    let mut examples = Vec::new();
    for (idx, raw_line) in text.lines().enumerate() {
        if raw_line.trim().is_empty() {
            continue;
        }
        examples.push(parse_record(raw_line, idx + 1, schema)?);
    }
    if examples.is_empty() {
        return Err(CorpusError::EmptyFile);
    }
    Ok(Dataset {
        examples,
        schema: schema.clone(),
    })
}

fn parse_record(line_text: &str, line: usize, schema: &DatasetSchema) -> Result<NliExample, CorpusError> {
    let raw: RawRecord = serde_json::from_str(line_text).map_err(|e| CorpusError::Malformed {
        line,
        message: e.to_string(),
    })?;
    let premise = required(raw.premise, line, "premise")?;
    let hypothesis = required(raw.hypothesis, line, "hypothesis")?;
    let raw_label = required(raw.label, line, "label")?;
    let label = schema
        .resolve_label(&raw_label)
        .ok_or(CorpusError::UnknownLabel {
            line,
            label: raw_label,
        })?;
    let explanation = if schema.has_explanations {
        Some(required(raw.explanation, line, "explanation")?)
    } else {
        None
    };
    let fig_type = if schema.has_fig_types {
        let value = required(raw.fig_type, line, "fig_type")?;
        Some(
            value
                .parse::<FigType>()
                .map_err(|_| CorpusError::UnknownFigType { line, value })?,
        )
    } else {
        None
    };
    Ok(NliExample {
        premise,
        hypothesis,
        label,
        explanation,
        fig_type,
        source_dataset: schema.name.clone(),
    })
}

pub fn load_dataset(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Dataset, CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = std::fs::File::open(path).map_err(io_err)?;
    let mut text = String::new();
    for line in BufReader::new(file).lines() {
        text.push_str(&line.map_err(io_err)?);
        text.push('\n');
    }
    parse_dataset(&text, schema)
}

pub fn write_dataset(path: impl AsRef<Path>, d: &Dataset) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = std::fs::File::create(path).map_err(io_err)?;
    file.write_all(d.to_jsonl().as_bytes()).map_err(io_err)
}

/// First `min(|d|, target_size)` examples, original order.
pub fn truncate(d: &Dataset, target_size: usize) -> Dataset {
    d.with_examples(d.examples.iter().take(target_size).cloned().collect())
}

/// Seeded random subset of `target_size` examples, kept in original order.
pub fn truncate_sample(d: &Dataset, target_size: usize, seed: u64) -> Dataset {
    if target_size >= d.len() {
        return d.clone();
    }
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut keep = idx[..target_size].to_vec();
    keep.sort_unstable();
    d.with_examples(keep.into_iter().map(|i| d.examples[i].clone()).collect())
}

/// Uniform random (unstratified) dev split; both halves keep file order.
pub fn split_dev(d: &Dataset, dev_fraction: f64, seed: u64) -> Result<(Dataset, Dataset), CorpusError> {
    if !(0.0..1.0).contains(&dev_fraction) {
        return Err(CorpusError::InvalidFraction(dev_fraction));
    }
    if dev_fraction == 0.0 {
        return Ok((d.clone(), d.with_examples(Vec::new())));
    }
    let n = d.len();
    let n_dev = (dev_fraction * n as f64).round() as usize;
    if n_dev == 0 {
        return Err(CorpusError::DegenerateSplit {
            side: "dev",
            n,
            fraction: dev_fraction,
        });
    }
    if n_dev >= n {
        return Err(CorpusError::DegenerateSplit {
            side: "train",
            n,
            fraction: dev_fraction,
        });
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut in_dev = vec![false; n];
    for &i in &idx[..n_dev] {
        in_dev[i] = true;
    }
    let (dev, train): (Vec<_>, Vec<_>) = d
        .examples
        .iter()
        .zip(in_dev)
        .partition(|(_, is_dev)| *is_dev);
    Ok((
        d.with_examples(train.into_iter().map(|(e, _)| e.clone()).collect()),
        d.with_examples(dev.into_iter().map(|(e, _)| e.clone()).collect()),
    ))
}

pub fn group_by_fig_type(d: &Dataset) -> Result<BTreeMap<FigType, Dataset>, CorpusError> {
    if !d.schema.has_fig_types {
        return Err(CorpusError::SchemaMismatch(d.schema.name.clone()));
    }
    let mut groups: BTreeMap<FigType, Vec<NliExample>> = BTreeMap::new();
    for e in &d.examples {
        let ty = e.fig_type.expect("schema guarantees fig_type");
        groups.entry(ty).or_default().push(e.clone());
    }
    Ok(groups
        .into_iter()
        .map(|(ty, examples)| (ty, d.with_examples(examples)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIGLANG_3: &str = r#"{"premise":"I respectfully disagree.","hypothesis":"I beg to differ.","label":"Entailment","explanation":"To beg to differ is to disagree with someone.","fig_type":"Idiom"}
{"premise":"She was calm.","hypothesis":"She was like a kitten in a den of coyotes.","label":"Contradiction","explanation":"A kitten in a den of coyotes would be scared and not calm.","fig_type":"Simile"}
{"premise":"He ran fast.","hypothesis":"He ran like the wind.","label":"Entailment","explanation":"The wind is fast.","fig_type":"Simile"}
"#;

    fn example(i: usize, ty: Option<FigType>) -> NliExample {
        NliExample {
            premise: format!("premise {i}"),
            hypothesis: format!("hypothesis {i}"),
            label: if i % 2 == 0 { Label::Entailment } else { Label::Contradiction },
            explanation: Some(format!("because {i}")),
            fig_type: ty,
            source_dataset: "figlang".into(),
        }
    }

    fn esnli_of(n: usize) -> Dataset {
        let examples = (0..n).map(|i| NliExample { source_dataset: "esnli".into(), ..example(i, None) }).collect();
        Dataset::new(DatasetSchema::esnli(), examples).unwrap()
    }

    #[test]
    fn loads_three_figlang_records() {
        let d = parse_dataset(FIGLANG_3, &DatasetSchema::figlang()).unwrap();
        assert_eq!(d.len(), 3);
        assert_eq!(d.examples()[1].fig_type, Some(FigType::Simile));
        assert_eq!(d.examples()[0].premise, "I respectfully disagree.");
    }

    #[test]
    fn neutral_is_unknown_label() {
        let text = r#"{"premise":"a","hypothesis":"b","label":"neutral","explanation":"c","fig_type":"Idiom"}"#;
        let err = parse_dataset(text, &DatasetSchema::figlang()).unwrap_err();
        assert!(matches!(err, CorpusError::UnknownLabel { line: 1, ref label } if label == "neutral"));
    }

    #[test]
    fn impli_ignores_explanation_and_requires_label() {
        let ok = r#"{"premise":"He kicked the bucket.","hypothesis":"He died.","label":"entailment","explanation":"ignored"}
{"premise":"She spilled the beans.","hypothesis":"She kept quiet.","label":"non-entailment"}
"#;
        let d = parse_dataset(ok, &DatasetSchema::impli()).unwrap();
        let expected = vec![
            NliExample {
                premise: "He kicked the bucket.".into(),
                hypothesis: "He died.".into(),
                label: Label::Entailment,
                explanation: None,
                fig_type: None,
                source_dataset: "impli".into(),
            },
            NliExample {
                premise: "She spilled the beans.".into(),
                hypothesis: "She kept quiet.".into(),
                label: Label::Contradiction,
                explanation: None,
                fig_type: None,
                source_dataset: "impli".into(),
            },
        ];
        assert_eq!(d.examples(), expected.as_slice());

        let missing = "{\"premise\":\"a\",\"hypothesis\":\"b\",\"label\":\"entailment\"}\n{\"premise\":\"a\",\"hypothesis\":\"b\"}\n";
        let err = parse_dataset(missing, &DatasetSchema::impli()).unwrap_err();
        assert!(matches!(err, CorpusError::MissingField { line: 2, field: "label" }));
    }

    #[test]
    fn load_from_file_and_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("fig.jsonl");
        std::fs::write(&path, FIGLANG_3).unwrap();
        assert_eq!(load_dataset(&path, &DatasetSchema::figlang()).unwrap().len(), 3);

        std::fs::write(&path, "\n\n").unwrap();
        assert!(matches!(
            load_dataset(&path, &DatasetSchema::figlang()),
            Err(CorpusError::EmptyFile)
        ));
        assert!(matches!(
            load_dataset(dir.path().join("missing.jsonl"), &DatasetSchema::figlang()),
            Err(CorpusError::Io { .. })
        ));
    }

    #[test]
    fn whitespace_only_fields_rejected() {
        let text = r#"{"premise":"   ","hypothesis":"b","label":"Entailment","explanation":"c","fig_type":"Idiom"}"#;
        assert!(matches!(
            parse_dataset(text, &DatasetSchema::figlang()),
            Err(CorpusError::EmptyField { field: "premise", .. })
        ));
        let text = r#"{"premise":"a","hypothesis":"b","label":"Entailment","explanation":" ","fig_type":"Idiom"}"#;
        assert!(matches!(
            parse_dataset(text, &DatasetSchema::esnli()),
            Err(CorpusError::EmptyField { field: "explanation", .. })
        ));
    }

    #[test]
    fn figlang_requires_fig_type() {
        let text = r#"{"premise":"a","hypothesis":"b","label":"Entailment","explanation":"c"}"#;
        assert!(matches!(
            parse_dataset(text, &DatasetSchema::figlang()),
            Err(CorpusError::MissingField { field: "fig_type", .. })
        ));
        let text = r#"{"premise":"a","hypothesis":"b","label":"Entailment","explanation":"c","fig_type":"pun"}"#;
        assert!(matches!(
            parse_dataset(text, &DatasetSchema::figlang()),
            Err(CorpusError::UnknownFigType { .. })
        ));
    }

    #[test]
    fn writer_is_byte_stable_and_ordered() {
        let d = parse_dataset(FIGLANG_3, &DatasetSchema::figlang()).unwrap();
        assert_eq!(d.to_jsonl(), FIGLANG_3);
        let again = parse_dataset(&d.to_jsonl(), &DatasetSchema::figlang()).unwrap();
        assert_eq!(again, d);
    }

    #[test]
    fn truncate_prefix_semantics() {
        let d = esnli_of(5);
        let t = truncate(&d, 3);
        assert_eq!(t.examples(), &d.examples()[..3]);
        assert_eq!(truncate(&esnli_of(3), 5), esnli_of(3));
        assert_eq!(truncate(&d, 5), d);
        assert_eq!(d.len(), 5);
        assert!(truncate(&d, 0).is_empty());
    }

    #[test]
    fn truncate_sample_keeps_order_and_size() {
        let d = esnli_of(20);
        let t = truncate_sample(&d, 7, 3);
        assert_eq!(t.len(), 7);
        let positions: Vec<usize> = t
            .examples()
            .iter()
            .map(|e| d.examples().iter().position(|x| x == e).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(truncate_sample(&d, 7, 3), t);
    }

    #[test]
    fn split_ten_percent() {
        let d = esnli_of(100);
        let (train, dev) = split_dev(&d, 0.1, 7).unwrap();
        assert_eq!((train.len(), dev.len()), (90, 10));
        assert!(dev.examples().iter().all(|e| !train.examples().contains(e)));
        let (train2, dev2) = split_dev(&d, 0.1, 7).unwrap();
        assert_eq!(train, train2);
        assert_eq!(dev, dev2);
    }

    #[test]
    fn split_zero_fraction_and_degenerate() {
        let d = esnli_of(4);
        let (train, dev) = split_dev(&d, 0.0, 99).unwrap();
        assert_eq!(train, d);
        assert!(dev.is_empty());
        assert!(matches!(
            split_dev(&esnli_of(1), 0.5, 1),
            Err(CorpusError::DegenerateSplit { .. })
        ));
        assert!(matches!(
            split_dev(&esnli_of(4), 0.1, 1),
            Err(CorpusError::DegenerateSplit { side: "dev", .. })
        ));
        assert!(matches!(split_dev(&d, 1.0, 1), Err(CorpusError::InvalidFraction(_))));
    }

    #[test]
    fn grouping_counts() {
        let examples = vec![
            example(0, Some(FigType::Idiom)),
            example(1, Some(FigType::Simile)),
            example(2, Some(FigType::Idiom)),
        ];
        let d = Dataset::new(DatasetSchema::figlang(), examples).unwrap();
        let g = group_by_fig_type(&d).unwrap();
        let sizes: Vec<(FigType, usize)> = g.iter().map(|(k, v)| (*k, v.len())).collect();
        assert_eq!(sizes, vec![(FigType::Simile, 1), (FigType::Idiom, 2)]);
        assert_eq!(g[&FigType::Idiom].examples()[1], d.examples()[2]);

        let single = Dataset::new(DatasetSchema::figlang(), vec![example(0, Some(FigType::Sarcasm))]).unwrap();
        assert_eq!(group_by_fig_type(&single).unwrap().len(), 1);

        assert!(matches!(group_by_fig_type(&esnli_of(3)), Err(CorpusError::SchemaMismatch(_))));
    }

    #[test]
    fn grouping_matches_hand_count_on_mixed_fixture() {
        use FigType::*;
        let types = [Metaphor, Simile, Idiom, Idiom, Sarcasm, CreativeParaphrase, Simile, Idiom, Sarcasm, Metaphor];
        let d = Dataset::new(
            DatasetSchema::figlang(),
            types.iter().enumerate().map(|(i, t)| example(i, Some(*t))).collect(),
        )
        .unwrap();
        let g = group_by_fig_type(&d).unwrap();
        // hand count: Metaphor 2, Simile 2, Idiom 3, CreativeParaphrase 1, Sarcasm 2
        let expected = [(Metaphor, 2), (Simile, 2), (Idiom, 3), (CreativeParaphrase, 1), (Sarcasm, 2)];
        for (ty, n) in expected {
            assert_eq!(g[&ty].len(), n, "{ty}");
        }
        assert_eq!(g.values().map(Dataset::len).sum::<usize>(), 10);
    }

    #[test]
    fn dataset_new_enforces_schema() {
        let bad = NliExample { fig_type: None, ..example(0, None) };
        assert!(Dataset::new(DatasetSchema::figlang(), vec![bad]).is_err());
    }
}
