//! Lane-relative vehicle localization from a single forward camera.
//!
//! The pipeline stages are:
//!
//! 1. **imgcore** – image buffers, Lab color conversion, separable convolution.
//! 2. **ipm** – inverse perspective mapping between pixels and the ground plane.
//! 3. **lanefeat** – illuminant-robust lane-mark features from steerable
//!    Gaussian derivative filters on the bird's-eye grid.
//! 4. **lanefit** – column clustering, gap interpolation, RANSAC cubic fitting
//!    and ego-lane localization.
//! 5. **roadseg** – 3-class Gaussian-mixture road segmentation and boundary
//!    extraction, with vanishing-point extension beyond the IPM range.
//! 6. **detect** – HOG pyramid plus deformable root/part scoring with
//!    generalized distance transforms, and lane assignment of detections.
//! 7. **motion** – pyramidal sparse optical flow, per-detection mobility and
//!    GPS combination into per-frame position records.
//! 8. **synthbench** – synthetic road-scene generator with exact ground truth
//!    and the benchmark harness.
//! 9. **pipeline** – per-sequence orchestration and overlay rendering.

pub mod detect;
pub mod imgcore;
pub mod ipm;
pub mod lanefeat;
pub mod lanefit;
pub mod motion;
pub mod pipeline;
pub mod roadseg;
pub mod synthbench;
