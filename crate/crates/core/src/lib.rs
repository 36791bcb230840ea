//! Time-to-collision forecasting from short video clips.
//!
//! The model pairs a hierarchical spatial encoder over frames with a
//! decomposition-aware temporal transformer over the resulting embedding
//! sequence. Everything here is `no_std` + `alloc`; file formats and the
//! command line live in the companion `collidenet` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

mod error;

pub mod datagen;
pub mod decomposition;
pub mod diagnostics;
pub mod harness;
pub mod numerics;
pub mod params;
pub mod segment_attention;
pub mod spatial;
pub mod stationarity;
pub mod temporal;

pub use error::{Error, Result};
