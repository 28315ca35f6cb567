//! Query generation, distance-modulated self-attention and multi-scale hybrid
//! sampling for sparse query-based multi-view 3D object detection.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: pinhole cameras, projection, lifting of 2D detections, ego motion.
//! * [`queries`]: global, adaptive and composite query construction.
//! * [`temporal`]: the L×S memory queue and ego-motion state propagation.
//! * [`attention`]: adaptive self-attention and its distance kernels.
//! * [`sampling`]: hybrid 3D sampling points, feature pyramids, deformable aggregation, FFN.
//! * [`pipeline`]: decoder stacking, heads, synthetic scenes, metrics, gradient checks.
//!
//! Embeddings and feature maps are stored as `f32`; every computation is carried
//! out in `f64`.

pub mod attention;
pub mod error;
pub mod geometry;
pub mod linear;
pub mod pipeline;
pub mod queries;
pub mod sampling;
pub mod temporal;
pub mod verify;

pub use error::{Error, Result};
