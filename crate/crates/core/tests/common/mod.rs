//! Synthetic corpora shared by the integration and acceptance suites.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use xferbench::corpus::{self, Dataset, DatasetSchema, FigType, Label, NliExample};
use xferbench::evalharness::surrogate_scorer;
use xferbench::modelcore::{ToyConfig, ToySeq2Seq, Vocabulary};
use xferbench::promptkit::{self, SourceMode};
use xferbench::runner::DataPaths;
use xferbench::training::{DataMap, StageData, TrainConfig};

pub fn figlang(premise: &str, hypothesis: &str, label: Label, explanation: &str, ty: FigType) -> NliExample {
    NliExample {
        premise: premise.into(),
        hypothesis: hypothesis.into(),
        label,
        explanation: Some(explanation.into()),
        fig_type: Some(ty),
        source_dataset: "figlang".into(),
    }
}

pub fn impli(premise: &str, hypothesis: &str, label: Label) -> NliExample {
    NliExample {
        premise: premise.into(),
        hypothesis: hypothesis.into(),
        label,
        explanation: None,
        fig_type: None,
        source_dataset: "impli".into(),
    }
}

pub fn esnli(premise: &str, hypothesis: &str, label: Label, explanation: &str) -> NliExample {
    NliExample {
        premise: premise.into(),
        hypothesis: hypothesis.into(),
        label,
        explanation: Some(explanation.into()),
        fig_type: None,
        source_dataset: "esnli".into(),
    }
}

pub fn dataset(schema: DatasetSchema, examples: Vec<NliExample>) -> Dataset {
    Dataset::new(schema, examples).expect("fixture matches schema")
}

const SUBJECTS: [&str; 8] = ["the storm", "her voice", "his plan", "the city", "our team", "the old car", "my boss", "the river"];
const IMAGES: [&str; 8] = ["a lion", "silk", "a house of cards", "a beehive", "a well oiled machine", "a tortoise", "a volcano", "a mirror"];
const READINGS: [&str; 8] = ["fierce", "soft", "fragile", "busy", "efficient", "slow", "angry", "calm"];
const OPPOSITES: [&str; 8] = ["gentle", "harsh", "sturdy", "quiet", "clumsy", "fast", "pleased", "rough"];

/// 16 figurative pairs with short label-specific explanations.
pub fn memorization_fixture() -> Dataset {
    let mut out = Vec::new();
    for i in 0..8 {
        let hyp = format!("{} was like {}", SUBJECTS[i], IMAGES[i]);
        let ty = FigType::ALL[i % FigType::ALL.len()];
        out.push(figlang(
            &format!("{} was {}", SUBJECTS[i], READINGS[i]),
            &hyp,
            Label::Entailment,
            &format!("{} is {} so it fits", IMAGES[i], READINGS[i]),
            ty,
        ));
        out.push(figlang(
            &format!("{} was {}", SUBJECTS[i], OPPOSITES[i]),
            &hyp,
            Label::Contradiction,
            &format!("{} is {} not {}", IMAGES[i], READINGS[i], OPPOSITES[i]),
            ty,
        ));
    }
    dataset(DatasetSchema::figlang(), out)
}

const FILLERS: [&str; 12] = ["red", "blue", "green", "tall", "small", "round", "old", "new", "warm", "cold", "dark", "bright"];

fn fillers(rng: &mut ChaCha8Rng, n: usize) -> Vec<&'static str> {
    (0..n).map(|_| *FILLERS.choose(rng).unwrap()).collect()
}

/// Cue words whose label is fixed across both stages of the transfer fixture.
pub fn transfer_cues() -> Vec<(String, Label)> {
    (0..12)
        .map(|i| (format!("cue{i}"), if i % 2 == 0 { Label::Entailment } else { Label::Contradiction }))
        .collect()
}

fn cue_example(rng: &mut ChaCha8Rng, cue: &str) -> (String, String) {
    let f = fillers(rng, 4);
    (
        format!("the {} thing was {}", f[0], f[1]),
        format!("it seemed {} {} {}", f[2], cue, f[3]),
    )
}

fn expl_for(label: Label) -> &'static str {
    match label {
        Label::Entailment => "the cue agrees with the premise",
        Label::Contradiction => "the cue clashes with the premise",
    }
}

/// Stage A (label-only) covers every cue; stage B trains on cues 0..4 and
/// is evaluated on cues 4..12, which only stage A teaches.
pub fn transfer_fixture(seed: u64) -> (DataMap, DataMap) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cues = transfer_cues();
    let mut a_train = Vec::new();
    for _ in 0..6 {
        for (cue, label) in &cues {
            let (p, h) = cue_example(&mut rng, cue);
            a_train.push(impli(&p, &h, *label));
        }
    }
    let mut a_dev = Vec::new();
    for (cue, label) in &cues {
        let (p, h) = cue_example(&mut rng, cue);
        a_dev.push(impli(&p, &h, *label));
    }
    let mut b_train = Vec::new();
    for _ in 0..6 {
        for (i, (cue, label)) in cues.iter().take(4).enumerate() {
            let (p, h) = cue_example(&mut rng, cue);
            b_train.push(figlang(&p, &h, *label, expl_for(*label), FigType::ALL[i % 5]));
        }
    }
    let mut b_dev = Vec::new();
    for _ in 0..2 {
        for (i, (cue, label)) in cues.iter().enumerate().skip(4) {
            let (p, h) = cue_example(&mut rng, cue);
            b_dev.push(figlang(&p, &h, *label, expl_for(*label), FigType::ALL[i % 5]));
        }
    }
    let a = StageData {
        train: dataset(DatasetSchema::impli(), a_train),
        dev: dataset(DatasetSchema::impli(), a_dev),
    };
    let b = StageData {
        train: dataset(DatasetSchema::figlang(), b_train),
        dev: dataset(DatasetSchema::figlang(), b_dev),
    };
    let both: DataMap = [("impli".to_string(), a), ("figlang".to_string(), b.clone())].into();
    let b_only: DataMap = [("figlang".to_string(), b)].into();
    (both, b_only)
}

fn xor_label(h: bool, p: bool) -> Label {
    if h != p {
        Label::Contradiction
    } else {
        Label::Entailment
    }
}

fn xor_block(rng: &mut ChaCha8Rng, out: &mut Vec<NliExample>) {
    let hf = fillers(rng, 2);
    let pf = fillers(rng, 2);
    for h in [false, true] {
        for p in [false, true] {
            let label = xor_label(h, p);
            let hyp = format!("{} {} {}", hf[0], if h { "sun" } else { "moon" }, hf[1]);
            let prem = format!("{} {} {}", pf[0], if p { "day" } else { "night" }, pf[1]);
            let expl = match label {
                Label::Entailment => "the two signs match",
                Label::Contradiction => "the two signs differ",
            };
            out.push(figlang(&prem, &hyp, label, expl, FigType::Metaphor));
        }
    }
}

/// Label = XOR of one hypothesis token and one premise token. Each block
/// holds the four combinations over one hypothesis/premise filler pair, so
/// every hypothesis text and every premise text occurs with both labels.
pub fn xor_fixture(seed: u64, train_blocks: usize, dev_blocks: usize) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    for _ in 0..train_blocks {
        xor_block(&mut rng, &mut train);
    }
    let mut dev = Vec::new();
    for _ in 0..dev_blocks {
        xor_block(&mut rng, &mut dev);
    }
    (dataset(DatasetSchema::figlang(), train), dataset(DatasetSchema::figlang(), dev))
}

/// Small corpora for all three families, written as JSONL.
pub fn write_toy_corpora(dir: &Path, seed: u64) -> BTreeMap<String, DataPaths> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fig = Vec::new();
    let mut es = Vec::new();
    let mut im = Vec::new();
    for i in 0..32 {
        let j = rng.gen_range(0..8);
        let label = if i % 2 == 0 { Label::Entailment } else { Label::Contradiction };
        let reading = if label == Label::Entailment { READINGS[j] } else { OPPOSITES[j] };
        let hyp = format!("{} was like {}", SUBJECTS[j], IMAGES[j]);
        let prem = format!("{} was {}", SUBJECTS[j], reading);
        let expl = format!("{} is {}", IMAGES[j], READINGS[j]);
        fig.push(figlang(&prem, &hyp, label, &expl, FigType::ALL[j % 5]));
        es.push(esnli(&prem, &format!("{} seemed {}", SUBJECTS[j], READINGS[j]), label, &expl));
        im.push(impli(&prem, &hyp, label));
    }
    let mut paths = BTreeMap::new();
    for (id, schema, examples) in [
        ("figlang", DatasetSchema::figlang(), fig),
        ("esnli", DatasetSchema::esnli(), es),
        ("impli", DatasetSchema::impli(), im),
    ] {
        let path = dir.join(format!("{id}.jsonl"));
        corpus::write_dataset(&path, &dataset(schema, examples)).unwrap();
        paths.insert(
            id.to_string(),
            DataPaths {
                train: path,
                dev: None,
            },
        );
    }
    paths
}

/// Vocabulary over every source and target in `data`.
pub fn vocab_for(data: &DataMap) -> Vocabulary {
    let mut texts = vec!["Entailment".to_string(), "Contradiction".to_string(), "explanation:".to_string()];
    for d in data.values() {
        for e in d.train.examples().iter().chain(d.dev.examples()) {
            texts.push(promptkit::serialize_source(e, SourceMode::STANDARD).unwrap());
            if e.explanation.is_some() {
                texts.push(promptkit::serialize_target(e, true).unwrap());
            }
        }
    }
    Vocabulary::build(texts.iter().map(String::as_str))
}

pub fn toy_model(data: &DataMap, d_model: usize, seed: u64) -> ToySeq2Seq {
    let cfg = ToyConfig {
        d_model,
        seed,
        ..ToyConfig::default()
    };
    ToySeq2Seq::new(cfg, vocab_for(data))
}

/// Fast settings for fixture-scale training: greedy decoding, short outputs.
pub fn fast_train_config(lr: f64, batch_size: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(vec![surrogate_scorer()]);
    cfg.lr = lr;
    cfg.batch_size = batch_size;
    cfg.seed = seed;
    cfg.generation.num_beams = 1;
    cfg.generation.max_output_tokens = 16;
    cfg
}

pub fn train_as_dev(d: &Dataset) -> StageData {
    StageData {
        train: d.clone(),
        dev: d.clone(),
    }
}
