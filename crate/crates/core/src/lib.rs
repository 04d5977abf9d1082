//! Sparse-to-dense hypercolumn matching for 6-DoF visual localization.
//!
//! A query is localized in two stages: its global descriptor is ranked
//! against a reference database, then for each of the top-ranked references
//! every reference keypoint descriptor is correlated exhaustively against the
//! query's dense feature grid. Accepted peaks become 2D-3D correspondences
//! for P3P inside RANSAC, and the neighbor with the most inliers wins.

pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod matching;
pub mod pipeline;
pub mod pose;
pub mod retrieval;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
