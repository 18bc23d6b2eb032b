//! Self-supervised pre-training for text-attributed graphs.
//!
//! A small masked language model encodes each node's text; a graph attention
//! network propagates the resulting `[CLS]` vectors over personalized
//! PageRank neighborhoods. Training combines masked-token reconstruction
//! (conditioned on the propagated `[CLS]`) with a latent regression onto an
//! exponential-moving-average target network.

pub mod autograd;
pub mod config;
pub mod embed;
pub mod error;
pub mod eval;
pub mod gnn;
pub mod graph_store;
pub mod instruct;
pub mod lm;
pub mod model;
pub mod optim;
pub mod params;
pub mod ppr;
pub mod pretrain;
pub mod seeding;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
