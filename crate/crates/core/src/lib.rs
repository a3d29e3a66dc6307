//! Insertion-based sequence transduction (InDIGO, Insertion Transformer,
//! KERMIT) with joint CTC training, at toy scale on synthetic speech-like
//! data.

pub mod ctc;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod models;
pub mod numerics;
pub mod sequence;
pub mod synthdata;
pub use error::{Error, Result};
