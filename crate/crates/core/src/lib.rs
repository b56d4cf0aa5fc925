//! Instruction-driven visual token sparsification with typed parallel
//! action-chunk decoding, built on a small deterministic tensor engine.
//!
//! Pipeline stages, in data-flow order:
//!
//! * [`scene`] synthesises manipulation episodes and stores them as SVT1.
//! * [`encoders`] embed patches and instructions into two transformer towers.
//! * [`id_pruner`] keeps instruction-relevant semantic tokens (cue + anchor).
//! * [`sa_pruner`] compresses the spatial stream onto aggregation tokens.
//! * [`fuser`] exchanges features between towers and builds the token set Z.
//! * [`decoder`] decodes a whole action chunk in one bidirectional pass.
//! * [`efficiency`] counts tokens and FLOPs and times the pipeline.

pub mod config;
pub mod decoder;
pub mod dump;
pub mod efficiency;
pub mod encoders;
pub mod error;
pub mod fuser;
pub mod id_pruner;
pub mod model;
pub mod numerics;
pub mod sa_pruner;
pub mod scene;
pub mod svt;
pub mod train;

pub use error::{Error, FormatError, Result};
