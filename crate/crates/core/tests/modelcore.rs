use proptest::prelude::*;

use xferbench::modelcore::checkpoint::{load_checkpoint, save_checkpoint};
use xferbench::modelcore::{
    train_step, GenerationConfig, Loss, ModelError, Optimizer, ParamId, TextToTextModel, ToyConfig, ToySeq2Seq,
    Vocabulary,
};

const SOURCE: &str = "premise: the storm was fierce hypothesis: the storm was like a lion";
const TARGET: &str = "Entailment explanation: a lion is fierce";

fn model(d_model: usize, seed: u64) -> ToySeq2Seq {
    let vocab = Vocabulary::build([SOURCE, TARGET, "Contradiction calm river"]);
    ToySeq2Seq::new(
        ToyConfig {
            d_model,
            seed,
            ..ToyConfig::default()
        },
        vocab,
    )
}

fn loss_at(m: &ToySeq2Seq) -> f64 {
    m.compute_loss(SOURCE, TARGET).unwrap().value()
}

#[test]
fn gradients_match_finite_differences() {
    let mut m = model(8, 3);
    let grads = m.compute_loss(SOURCE, TARGET).unwrap().backward();
    let mut picked: Vec<(ParamId, usize, f64)> = Vec::new();
    let ids: Vec<ParamId> = m.parameters().iter().map(|(id, _, _)| id).collect();
    'outer: for id in ids {
        if let Some(g) = grads.get(id) {
            for (i, gi) in g.iter().enumerate() {
                if gi.abs() > 1e-6 {
                    picked.push((id, i, *gi));
                    if picked.len() >= 12 {
                        break 'outer;
                    }
                    break;
                }
            }
        }
    }
    assert!(picked.len() >= 10, "only {} parameters with gradient", picked.len());
    let h = 1e-5;
    for (id, i, analytic) in picked {
        let orig = m.parameters().get(id).data[i];
        m.parameters_mut().get_mut(id).data_mut()[i] = orig + h;
        let up = loss_at(&m);
        m.parameters_mut().get_mut(id).data_mut()[i] = orig - h;
        let down = loss_at(&m);
        m.parameters_mut().get_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let rel = (numeric - analytic).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-4, "{}[{i}]: analytic {analytic} numeric {numeric}", m.parameters().name(id));
    }
}

#[test]
fn repeated_steps_memorize_one_pair() {
    let mut m = model(16, 0);
    let start = loss_at(&m);
    let mut opt = Optimizer::adam(0.01);
    for _ in 0..200 {
        let loss = m.compute_loss(SOURCE, TARGET).unwrap();
        train_step(&mut m, loss, &mut opt).unwrap();
    }
    let end = loss_at(&m);
    assert!(end <= 0.1 * start, "loss {start} -> {end}");
    assert_eq!(m.generate(SOURCE, &GenerationConfig { num_beams: 1, ..Default::default() }), TARGET);
}

#[test]
fn one_sgd_step_descends() {
    let mut m = model(16, 1);
    let before = loss_at(&m);
    let loss = m.compute_loss(SOURCE, TARGET).unwrap();
    let r = train_step(&mut m, loss, &mut Optimizer::sgd(1e-3)).unwrap();
    assert_eq!(r.loss_value, before);
    assert!(r.gradient_norm > 0.0);
    assert!(loss_at(&m) < before);
}

#[test]
fn non_finite_loss_is_rejected_without_update() {
    let mut m = model(8, 0);
    let digest = m.parameters().digest();
    let err = train_step(&mut m, Loss::constant(f64::NAN), &mut Optimizer::adam(0.1)).unwrap_err();
    assert!(matches!(err, ModelError::NonFiniteLoss(v) if v.is_nan()));
    assert_eq!(m.parameters().digest(), digest);
}

#[test]
fn empty_target_is_rejected() {
    let m = model(8, 0);
    assert!(matches!(m.compute_loss(SOURCE, "  "), Err(ModelError::EmptyTarget)));
}

#[test]
fn same_seed_same_weights() {
    assert_eq!(model(8, 5).parameters().digest(), model(8, 5).parameters().digest());
    assert_ne!(model(8, 5).parameters().digest(), model(8, 6).parameters().digest());
}

#[test]
fn checkpoint_roundtrip_preserves_outputs() {
    let mut m = model(16, 2);
    let mut opt = Optimizer::adam(0.01);
    for _ in 0..20 {
        let loss = m.compute_loss(SOURCE, TARGET).unwrap();
        train_step(&mut m, loss, &mut opt).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&m, dir.path(), serde_json::json!({"note": "x"})).unwrap();
    let (back, manifest) = load_checkpoint(dir.path(), Some(&m.vocab().hash())).unwrap();
    assert_eq!(manifest.metadata["note"], "x");
    assert_eq!(back.parameters().digest(), m.parameters().digest());
    assert_eq!(loss_at(&back), loss_at(&m));
    for beams in [1, 4] {
        let g = GenerationConfig { num_beams: beams, ..Default::default() };
        assert_eq!(back.generate(SOURCE, &g), m.generate(SOURCE, &g));
    }
    assert!(matches!(
        load_checkpoint(dir.path(), Some("not-the-hash")),
        Err(ModelError::VocabularyMismatch { .. })
    ));
}

#[test]
fn invalid_generation_config() {
    assert!(GenerationConfig { num_beams: 0, ..Default::default() }.validate().is_err());
    assert!(GenerationConfig { max_output_tokens: 0, ..Default::default() }.validate().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generation_is_bounded_and_deterministic(
        words in prop::collection::vec("[a-z]{1,6}", 0..30),
        beams in prop::sample::select(vec![1usize, 4]),
        max_out in 1usize..12,
    ) {
        let m = model(8, 4);
        let src = words.join(" ");
        let cfg = GenerationConfig { num_beams: beams, max_output_tokens: max_out, seed: 0 };
        let out = m.generate(&src, &cfg);
        prop_assert!(out.split_whitespace().count() <= max_out);
        prop_assert_eq!(out, m.generate(&src, &cfg));
    }
}
