//! Task affinity scores from empirical Fisher information, and a few-shot
//! learning pipeline that uses them to pick related training classes.
//!
//! The crate is organised bottom-up:
//!
//! - [`nnet`]: dense feed-forward networks with exact backpropagation.
//! - [`fisher`]: diagonal empirical Fisher matrices and the affinity score.
//! - [`matching`]: class centroids and minimum-cost label matching.
//! - [`tasks`]: datasets, source/target tasks and episode sampling.
//! - [`pipeline`]: whole-classification training, affinity ranking and
//!   episodic fine-tuning.
//! - [`theorem`]: a harness checking that the score computed at averaged SGD
//!   iterates converges on strongly convex problems.
//! - [`config`]: JSON run configurations consumed by the `tas` binary.

pub mod config;
pub mod error;
pub mod fisher;
pub mod io;
pub mod matching;
pub mod nnet;
pub mod pipeline;
pub mod rng;
pub mod tasks;
pub mod theorem;

pub use error::{Error, Result};
