//! Decomposed 4D feature fields over linearly moving Gaussian primitives.
//!
//! Per-primitive instance features are learned from per-image instance masks
//! whose labels carry no identity across frames or views. Training visits
//! frames in temporal order so that features propagate through primitives that
//! are shared by neighbouring frames; inference clusters the learned features
//! into 4D instances and filters members by motion and position cues.

pub mod contrastive;
pub mod error;
pub mod eval;
pub mod harness;
pub mod hdbscan;
pub mod hungarian;
pub mod inference;
pub mod mapio;
pub mod model;
pub mod optim;
pub mod raster;
pub mod regularizers;
pub mod spatial;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use model::{GaussianPrimitive, Scene};
pub use raster::{Camera, FeatureMap, RenderOutput, SegmentationMap};
