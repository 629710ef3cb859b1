//! Occupancy prediction from multi-view, multi-frame features through a
//! pair of latent spaces: a dense BEV query grid and a small set of
//! instance queries that exchange information by bidirectional
//! cross-attention sharing one logit matrix per head.

pub mod attention;
pub mod error;
pub mod geometry;
pub mod temporal;
pub mod numerics;
pub mod model_pipeline;
pub mod occ_head;
pub mod rayiou;
pub mod scene_gen;

pub use error::{Error, Result};
