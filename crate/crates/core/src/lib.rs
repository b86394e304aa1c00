//! Staged visual product retrieval: global-embedding pruning, product
//! segmentation, and local-feature re-ranking with geometric verification.

pub mod catalog;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod matching;
pub mod pipeline;
pub mod raster;
pub mod remote;
pub mod segmentation;
pub mod synthesis;

pub use error::{Error, ErrorClass, Result, Stage};
