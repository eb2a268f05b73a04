//! Vehicle/obstacle detection: HOG feature pyramid, deformable root+part
//! scoring with generalized distance transforms, greedy NMS, and lane
//! assignment of detections.
//!
//! Detection runs on the perspective image. Part filters live one octave
//! below their root level, i.e. at twice the root's spatial resolution.

mod gdt;
mod hog;
mod model;

pub use gdt::{gdt_2d, Deformation};
pub use hog::{hog, HogFeature, BLOCK_DIM, DEFAULT_CELL, ORIENT_BINS};
pub use model::{DetectorModel, PartFilter};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgcore::{resize_bilinear, ImageF};
use crate::ipm::{pixel_to_ground, CameraRig, IpmError};
use crate::lanefit::LaneSet;

#[derive(Debug, Error)]
pub enum DetectError {
    #[error("image {0}x{1} smaller than 2x2 cells at cell size {2}")]
    ImageTooSmall(usize, usize, usize),
    #[error("deformation cost must be convex: d2 = {d2}, d4 = {d4}")]
    NonConvexDeformation { d2: f64, d4: f64 },
    #[error("model file {path}: {msg}")]
    ModelFormat { path: String, msg: String },
    #[error("model expects {expected} feature values per block, pyramid has {got}")]
    FeatureDimMismatch { expected: usize, got: usize },
    #[error("detection bottom edge at row {row:.1} is above the horizon")]
    AboveHorizon { row: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<IpmError> for DetectError {
    fn from(e: IpmError) -> Self {
        match e {
            IpmError::AboveHorizon { row, .. } => DetectError::AboveHorizon { row },
            other => DetectError::AboveHorizon {
                row: match other {
                    _ => f64::NAN,
                },
            },
        }
    }
}

/// Position of a detection relative to the ego vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelativePosition {
    Front,
    Left,
    Right,
}

/// One detected object in input-image pixel coordinates.
#[derive(Debug, Clone)]
pub struct Detection {
    /// (x, y, w, h), input pixels.
    pub bbox: (f32, f32, f32, f32),
    pub score: f32,
    /// Pyramid level the detection came from.
    pub level: usize,
    /// Ground point of the bbox bottom-center, set by [`assign_lane`].
    pub ground: Option<(f64, f64)>,
    /// Lane interval index, set by [`assign_lane`] when inside the lane set.
    pub lane_index: Option<usize>,
    pub relative_position: Option<RelativePosition>,
}

/// One pyramid level: HOG features of the image resized by `scale`.
#[derive(Debug, Clone)]
pub struct PyramidLevel {
    /// Input-to-level scale factor (level pixels per input pixel).
    pub scale: f64,
    pub feature: HogFeature,
}

#[derive(Debug, Clone)]
pub struct HogPyramid {
    pub levels: Vec<PyramidLevel>,
    pub cell: usize,
    /// Levels per octave.
    pub interval: usize,
}

/// Build the HOG pyramid. Level 0 holds the 2x-upsampled input (so parts can
/// be placed at twice the root resolution); each further level shrinks by
/// `2^(1/interval)` until the image falls below `min_cells` cells.
pub fn build_pyramid(
    img: &ImageF,
    cell: usize,
    interval: usize,
    min_cells: usize,
) -> Result<HogPyramid, DetectError> {
    assert!(interval >= 1 && cell >= 2 && min_cells >= 2);
    let gray = if img.channels() == 1 {
        img.clone()
    } else {
        img.channel(0)
    };
    let step = 2f64.powf(1.0 / interval as f64);
    let min_px = (min_cells * cell) as f64;
    let base = 2.0 * gray.width().min(gray.height()) as f64;
    if base < min_px {
        return Err(DetectError::ImageTooSmall(img.width(), img.height(), cell));
    }
    let n_levels = (interval as f64 * (base / min_px).log2()).floor() as usize + 1;

    let sizes: Vec<(f64, usize, usize)> = (0..n_levels)
        .map(|l| {
            let scale = 2.0 / step.powi(l as i32);
            (
                scale,
                (gray.width() as f64 * scale).round() as usize,
                (gray.height() as f64 * scale).round() as usize,
            )
        })
        .collect();

    let levels: Result<Vec<PyramidLevel>, DetectError> = sizes
        .par_iter()
        .map(|&(scale, w, h)| {
            let resized = resize_bilinear(&gray, w.max(1), h.max(1));
            let feature = hog(&resized, cell)?;
            Ok(PyramidLevel { scale, feature })
        })
        .collect();
    Ok(HogPyramid {
        levels: levels?,
        cell,
        interval,
    })
}

/// Dense cross-correlation of a filter over a HOG block grid. Returns a
/// (positions_y x positions_x) score grid; empty when the filter does not fit.
fn correlate(feature: &HogFeature, weights: &[f32], fw: usize, fh: usize) -> (Vec<f64>, usize, usize) {
    let (bx, by) = (feature.blocks_x(), feature.blocks_y());
    if bx < fw || by < fh {
        return (Vec::new(), 0, 0);
    }
    let (ox, oy) = (bx - fw + 1, by - fh + 1);
    let mut out = vec![0.0f64; ox * oy];
    for py in 0..oy {
        for px in 0..ox {
            let mut acc = 0.0f64;
            for fy in 0..fh {
                let feat_row = feature.block_run(px, py + fy, fw);
                let w_row = &weights[fy * fw * BLOCK_DIM..(fy + 1) * fw * BLOCK_DIM];
                for i in 0..fw * BLOCK_DIM {
                    acc += w_row[i] as f64 * feat_row[i] as f64;
                }
            }
            out[py * ox + px] = acc;
        }
    }
    (out, ox, oy)
}

/// Score the model over the pyramid and return thresholded detections after
/// greedy NMS (IoU 0.5), sorted by descending score (ties by x then y).
pub fn score_and_detect(
    pyr: &HogPyramid,
    model: &DetectorModel,
    threshold_override: Option<f32>,
) -> Result<Vec<Detection>, DetectError> {
    model.validate().map_err(|msg| DetectError::ModelFormat {
        path: "<memory>".into(),
        msg,
    })?;
    let threshold = threshold_override.unwrap_or(model.threshold);
    let start_level = if model.parts.is_empty() {
        0
    } else {
        pyr.interval
    };

    let per_level: Vec<Vec<Detection>> = (start_level..pyr.levels.len())
        .into_par_iter()
        .map(|l| {
            let level = &pyr.levels[l];
            let (root_scores, ox, oy) =
                correlate(&level.feature, &model.root, model.root_w, model.root_h);
            if root_scores.is_empty() {
                return Vec::new();
            }

            // Part score envelopes at twice the root resolution.
            let mut part_envelopes = Vec::new();
            for part in &model.parts {
                let pf = &pyr.levels[l - pyr.interval].feature;
                let (scores, pw, ph) = correlate(pf, &part.weights, part.w, part.h);
                if scores.is_empty() {
                    part_envelopes.push(None);
                    continue;
                }
                let (env, _args) = gdt_2d(&scores, pw, ph, &part.deformation)
                    .expect("deformation validated at load");
                part_envelopes.push(Some((env, pw, ph)));
            }

            let mut dets = Vec::new();
            for py in 0..oy {
                for px in 0..ox {
                    let mut total = root_scores[py * ox + px] + model.bias as f64;
                    for (part, env) in model.parts.iter().zip(&part_envelopes) {
                        let Some((env, pw, ph)) = env else {
                            total = f64::NEG_INFINITY;
                            break;
                        };
                        let ix = ((2 * px) as i64 + part.anchor.0 as i64).clamp(0, *pw as i64 - 1);
                        let iy = ((2 * py) as i64 + part.anchor.1 as i64).clamp(0, *ph as i64 - 1);
                        total += env[iy as usize * pw + ix as usize];
                    }
                    if total as f32 >= threshold {
                        let cell = pyr.cell as f64;
                        let scale = level.scale;
                        let x = px as f64 * cell / scale;
                        let y = py as f64 * cell / scale;
                        let w = (model.root_w + 1) as f64 * cell / scale;
                        let h = (model.root_h + 1) as f64 * cell / scale;
                        dets.push(Detection {
                            bbox: (x as f32, y as f32, w as f32, h as f32),
                            score: total as f32,
                            level: l,
                            ground: None,
                            lane_index: None,
                            relative_position: None,
                        });
                    }
                }
            }
            dets
        })
        .collect();

    let mut all: Vec<Detection> = per_level.into_iter().flatten().collect();
    Ok(nms(&mut all, 0.5))
}

fn iou(a: &(f32, f32, f32, f32), b: &(f32, f32, f32, f32)) -> f32 {
    let x1 = a.0.max(b.0);
    let y1 = a.1.max(b.1);
    let x2 = (a.0 + a.2).min(b.0 + b.2);
    let y2 = (a.1 + a.3).min(b.1 + b.3);
    let inter = (x2 - x1).max(0.0) * (y2 - y1).max(0.0);
    let union = a.2 * a.3 + b.2 * b.3 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Greedy non-maximum suppression. Candidates are ordered by (score desc,
/// x, y) first, so the result is deterministic.
pub fn nms(candidates: &mut [Detection], iou_thresh: f32) -> Vec<Detection> {
    candidates.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.bbox.0.total_cmp(&b.bbox.0))
            .then(a.bbox.1.total_cmp(&b.bbox.1))
    });
    let mut keep: Vec<Detection> = Vec::new();
    for det in candidates.iter() {
        if keep.iter().all(|k| iou(&k.bbox, &det.bbox) <= iou_thresh) {
            keep.push(det.clone());
        }
    }
    keep
}

/// Locate the detection on the ground plane and in the lane set. The ground
/// point is the bbox bottom-center mapped through the inverse perspective;
/// a bottom edge above the horizon leaves the detection unassigned.
pub fn assign_lane(
    det: &mut Detection,
    lanes: &LaneSet,
    rig: &CameraRig,
) -> Result<(), DetectError> {
    let col = (det.bbox.0 + det.bbox.2 / 2.0) as f64;
    let row = (det.bbox.1 + det.bbox.3) as f64;
    let (x, y) = pixel_to_ground(rig, row, col).map_err(|e| match e {
        IpmError::AboveHorizon { row, .. } => DetectError::AboveHorizon { row },
        _ => DetectError::AboveHorizon { row },
    })?;
    det.ground = Some((x, y));

    let ys: Vec<f64> = lanes.curves.iter().map(|c| c.eval_clamped(x)).collect();
    det.lane_index = None;
    for i in 0..ys.len().saturating_sub(1) {
        if ys[i] < y && y <= ys[i + 1] {
            det.lane_index = Some(i);
            break;
        }
    }

    // Ego-lane center (fallback: the camera axis) for the left/right call.
    let y_ego_center = match lanes.ego_index {
        Some(i) if i + 1 < ys.len() => (ys[i] + ys[i + 1]) / 2.0,
        _ => 0.0,
    };
    det.relative_position = Some(match (det.lane_index, lanes.ego_index) {
        (Some(li), Some(ei)) if li == ei => RelativePosition::Front,
        _ => {
            if y - y_ego_center > 0.0 {
                RelativePosition::Left
            } else {
                RelativePosition::Right
            }
        }
    });
    Ok(())
}
