//! Data generation, templating, model, training and evaluation for the
//! think / no-think fusion experiments.

pub mod checkpoint;
pub mod eval;
pub mod model;
pub mod pipeline;
pub mod taskgen;
pub mod templating;
pub mod tokenizer;
