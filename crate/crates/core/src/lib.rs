//! Cross-task knowledge transfer experiments for text-to-text models:
//! sequential fine-tuning and hierarchical feature-pipeline multi-task
//! learning on figurative-language NLI with explanations.

pub mod corpus;
pub mod evalharness;
pub mod modelcore;
pub mod promptkit;
pub mod runner;
pub mod training;
