//! Single-process simulator for a federated neural collaborative filtering
//! recommender in which clients contribute locally perturbed interaction data.
//!
//! Clients hold their raw interactions and a private user embedding. The only
//! things that ever cross the client/server boundary are a one-shot upload of
//! an exponential-mechanism perturbed item set and, each round, updated copies
//! of the shared public parameters (item embeddings, MLP weights, output
//! layer). The server trains an auxiliary model on the perturbed data and uses
//! it to augment client training sets and to drive contrastive alignment of
//! the public parameters.
//!
//! Modules:
//! - [`data`]: rating file ingest, train/test splitting, negative sampling,
//!   word vectors, and a synthetic dataset generator.
//! - [`model`]: embeddings + MLP scoring, losses, hand-written gradients, Adam.
//! - [`privacy`]: item similarity models and the exponential replacement
//!   mechanism, with a verifier for the privacy bound.
//! - [`protocol`]: client/server state and the round loop.
//! - [`eval`]: top-k ranking metrics.
//! - [`config`]: experiment configuration, defaults, and validation.
//! - [`output`]: metrics CSV, run summaries, checkpoints.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod output;
pub mod privacy;
pub mod protocol;
pub mod rng;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
