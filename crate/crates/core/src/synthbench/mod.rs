//! Synthetic road-scene generation with exact ground truth, plus the
//! evaluation harness.
//!
//! The renderer projects the world through its own rotation-matrix pinhole
//! camera (ray casting per pixel, matrix projection for boxes) and shares no
//! code with the `ipm` inverse mapping; agreement between the two is the
//! master geometric check for both.

mod eval;
mod scene;

pub use eval::{evaluate, load_corpus, EvalReport, PipelineFrameOutput};
pub use scene::{
    gen_corpus, measure_seed_stats, render, toy_car_model, vary_for_frame, DashPattern,
    GroundTruth, LaneLineSpec, Projector, SceneSpec, ShadowSpec, VehicleSpec, VehicleTruth,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),
    #[error("{path}: {msg}")]
    Io { path: String, msg: String },
    #[error("corpus misaligned: {truths} truths vs {outputs} outputs")]
    Misaligned { truths: usize, outputs: usize },
}
