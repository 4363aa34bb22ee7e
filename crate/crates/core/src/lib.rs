//! Open intent classification.
//!
//! Stage 1 trains a sentence encoder whose unit-norm embeddings are shaped by
//! a K-center contrastive loss mixed with cross-entropy. Stage 2 freezes the
//! encoder and learns one spherical decision boundary per known class, with
//! radii adjusted by expanding/shrinking against negative instances. At
//! inference an utterance outside every boundary is labelled open.

pub mod boundary;
pub mod cli;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod losses;
pub mod optim;
pub mod rng;
pub mod stage1;
pub mod synthetic;

pub use error::{Error, Result};
