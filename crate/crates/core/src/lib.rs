pub mod baselines;
pub mod cli;
pub mod composite;
pub mod error;
pub mod eval;
pub mod explain;
pub mod latent;
pub mod model;
pub mod relevance;
pub mod rules;
pub mod tape;
pub mod tensor;

pub use composite::Composite;
pub use error::{Error, Result};
pub use relevance::{backprop_relevance, RelevanceInit, RelevanceStore};
pub use rules::Rule;
pub use tape::{OpKind, Params, Tape};
pub use tensor::Tensor;
