//! The trainable text-to-text model contract, the optimizer step shared by
//! both trainers, and the self-contained toy encoder-decoder backend.

pub mod checkpoint;
pub mod graph;
pub mod params;
pub mod toy;
pub mod vocab;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use graph::{Gradients, Loss};
pub use params::{ParamId, ParameterStore, Tensor};
pub use toy::{ToyConfig, ToySeq2Seq};
pub use vocab::Vocabulary;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("target text is empty")]
    EmptyTarget,
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
    #[error("gradient for parameter `{0}` has the wrong size")]
    GradientShape(String),
    #[error("invalid generation config: {0}")]
    InvalidGenerationConfig(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("vocabulary hash mismatch: checkpoint {checkpoint}, corpus {corpus}")]
    VocabularyMismatch { checkpoint: String, corpus: String },
    #[error("unsupported backend `{0}`")]
    UnsupportedBackend(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub num_beams: usize,
    pub max_output_tokens: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            num_beams: 4,
            max_output_tokens: 64,
            seed: 0,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.num_beams == 0 {
            return Err(ModelError::InvalidGenerationConfig("num_beams must be >= 1".into()));
        }
        if self.max_output_tokens == 0 {
            return Err(ModelError::InvalidGenerationConfig(
                "max_output_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// A conditional text generator whose weights live in one [`ParameterStore`].
///
/// Every loss returned by [`compute_loss`](Self::compute_loss) reads the
/// store directly, so several losses computed in one step (e.g. the two
/// passes of a hierarchical forward) differentiate into the same parameters.
pub trait TextToTextModel {
    fn backend_id(&self) -> &str;

    fn parameters(&self) -> &ParameterStore;

    fn parameters_mut(&mut self) -> &mut ParameterStore;

    /// Mean per-token negative log-likelihood of `target` given `source`.
    fn compute_loss(&self, source: &str, target: &str) -> Result<Loss, ModelError>;

    /// Deterministic decoding; output has at most `cfg.max_output_tokens`
    /// whitespace tokens.
    fn generate(&self, source: &str, cfg: &GenerationConfig) -> String;

    /// Persist weights and metadata; backends without a disk format refuse.
    fn save_checkpoint(&self, dir: &Path, metadata: serde_json::Value) -> Result<(), ModelError> {
        let _ = (dir, metadata);
        Err(ModelError::UnsupportedBackend(format!(
            "{} has no checkpoint format",
            self.backend_id()
        )))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainStepResult {
    pub loss_value: f64,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// First-order optimizer. State (Adam moments) lives here, not in the model,
/// so a fresh optimizer resets it.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    /// Clip the global gradient norm before updating.
    pub max_grad_norm: Option<f64>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    moments: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            max_grad_norm: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr)
    }

    pub fn adam(lr: f64) -> Self {
        Self::new(OptimizerKind::Adam, lr)
    }

    pub fn with_max_grad_norm(mut self, clip: Option<f64>) -> Self {
        self.max_grad_norm = clip;
        self
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    fn apply(&mut self, params: &mut ParameterStore, grads: &Gradients, scale: f64) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (id, g) in &grads.by_param {
                    let lr = self.lr * scale;
                    let data = params.get_mut(*id).data_mut();
                    data.iter_mut().zip(g).for_each(|(p, gi)| *p -= lr * gi);
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2) = (self.beta1, self.beta2);
                let bias1 = 1.0 - b1.powi(self.t as i32);
                let bias2 = 1.0 - b2.powi(self.t as i32);
                for (id, g) in &grads.by_param {
                    let (m, v) = self
                        .moments
                        .entry(*id)
                        .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
                    let data = params.get_mut(*id).data_mut();
                    for i in 0..g.len() {
                        let gi = g[i] * scale;
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        let mhat = m[i] / bias1;
                        let vhat = v[i] / bias2;
                        data[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
                    }
                }
            }
        }
    }
}

/// Differentiate `loss`, update every contributing parameter of `model`,
/// and report the loss and the (pre-clipping) global gradient norm.
pub fn train_step<M: TextToTextModel + ?Sized>(
    model: &mut M,
    loss: Loss,
    optimizer: &mut Optimizer,
) -> Result<TrainStepResult, ModelError> {
    let loss_value = loss.value();
    if !loss_value.is_finite() {
        return Err(ModelError::NonFiniteLoss(loss_value));
    }
    let grads = loss.backward();
    drop(loss);
    let gradient_norm = grads.global_norm();
    if !gradient_norm.is_finite() {
        return Err(ModelError::NonFiniteLoss(gradient_norm));
    }
    for (id, g) in &grads.by_param {
        if model.parameters().get(*id).len() != g.len() {
            return Err(ModelError::GradientShape(model.parameters().name(*id).to_string()));
        }
    }
    let scale = match optimizer.max_grad_norm {
        Some(clip) if gradient_norm > clip => clip / gradient_norm,
        _ => 1.0,
    };
    optimizer.apply(model.parameters_mut(), &grads, scale);
    Ok(TrainStepResult {
        loss_value,
        gradient_norm,
    })
}
