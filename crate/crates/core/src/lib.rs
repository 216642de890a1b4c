//! Differentiable whole-body 3D pose and mesh recovery at toy scale.
//!
//! A body network predicts 3D joint heatmaps, pools per-joint features at
//! the soft-argmax joint positions and regresses joint rotations; hand and
//! face networks work on crops of the high-resolution image, and the
//! knuckle (MCP) features of both hands feed back into the body rotation
//! regressor. Everything runs on a small reverse-mode tape in `f64`.

pub mod ablation;
pub mod autodiff;
pub mod body_model;
pub mod diagnostics;
pub mod error;
pub mod grid_ops;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod pose2pose;
pub mod rotations;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
