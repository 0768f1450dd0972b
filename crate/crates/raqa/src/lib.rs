//! Retrieval-augmented question answering at desk scale: a dense dual-encoder
//! retriever trained jointly with a closed-vocabulary answer scorer, plus the
//! contrastive pretraining stage, a marginal-likelihood baseline, exact top-K
//! inner-product search, joint decoding, the full metric suite, and a
//! synthetic benchmark generator. Everything is deterministic given a seed and
//! all gradients are hand-derived and finite-difference checked.

pub mod dataio;
pub mod dpr;
pub mod encoder;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod index;
pub mod inference;
pub mod joint;
pub mod matrix;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod synth;

pub use error::{Error, Result};
