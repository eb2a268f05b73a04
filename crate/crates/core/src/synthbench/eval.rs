//! Benchmark evaluation against synthetic ground truth, reported in the
//! corpus-table layout (#Frame, #detectedAll, #Boundary, CorrectRate,
//! False Positive, CorrectBoundary).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scene::GroundTruth;
use super::SceneError;
use crate::lanefit::LaneSet;

/// Matching tolerances; documented in every report so the numbers are
/// interpretable without reading the code.
pub const LANE_MATCH_RMS_M: f64 = 0.3;
pub const EGO_OFFSET_TOL_M: f64 = 0.3;
pub const BOUNDARY_TOL_M: f64 = 0.5;
const EVAL_X_MIN: f64 = 5.0;
const EVAL_X_MAX: f64 = 45.0;
const EVAL_STEP: f64 = 1.0;
const MIN_OVERLAP_M: f64 = 3.0;

fn definitions() -> String {
    format!(
        "ego-lane correct: predicted ego boundaries match the true ego boundaries \
(RMS < {LANE_MATCH_RMS_M} m over the shared domain, {EVAL_X_MIN}-{EVAL_X_MAX} m) and \
|lateral offset error| < {EGO_OFFSET_TOL_M} m; lane true-positive: fitted curve within \
{LANE_MATCH_RMS_M} m RMS of a truth line; false positive: unmatched fitted curves / total \
fitted; boundary correct: mean |error| < {BOUNDARY_TOL_M} m on both road edges"
    )
}

/// Per-frame pipeline output consumed by the evaluator.
#[derive(Debug, Clone, Default)]
pub struct PipelineFrameOutput {
    pub lanes: Option<LaneSet>,
    /// Left/right boundary polylines in ground coordinates.
    pub boundary: Option<(Vec<(f64, f64)>, Vec<(f64, f64)>)>,
}

/// Corpus-level metrics in the layout of the evaluation table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub database: String,
    pub frames: usize,
    pub detected_all: usize,
    pub boundary_detected: usize,
    pub correct_rate_pct: f64,
    pub false_positive_pct: f64,
    pub correct_boundary_pct: f64,
    /// Human-readable matching criteria.
    pub definitions: String,
}

impl EvalReport {
    /// Fixed-width table with the evaluation column names.
    pub fn table(&self) -> String {
        let header = format!(
            "{:<16} {:>7} {:>13} {:>10} {:>12} {:>15} {:>16}\n",
            "Database", "#Frame", "#detectedAll", "#Boundary", "CorrectRate", "False Positive",
            "CorrectBoundary"
        );
        let row = format!(
            "{:<16} {:>7} {:>13} {:>10} {:>11.2}% {:>14.2}% {:>15.2}%\n",
            self.database,
            self.frames,
            self.detected_all,
            self.boundary_detected,
            self.correct_rate_pct,
            self.false_positive_pct,
            self.correct_boundary_pct
        );
        format!("{header}{row}")
    }
}

/// RMS lateral distance between a fitted curve and a truth line over the
/// intersection of the evaluation range and the curve's domain.
fn curve_rms(curve: &crate::lanefit::LaneCurve, line: &[f64; 4]) -> Option<f64> {
    let lo = curve.domain.0.max(EVAL_X_MIN);
    let hi = curve.domain.1.min(EVAL_X_MAX);
    if hi - lo < MIN_OVERLAP_M {
        return None;
    }
    let mut acc = 0.0f64;
    let mut n = 0usize;
    let mut x = lo;
    while x <= hi + 1e-9 {
        let d = curve.eval(x) - GroundTruth::eval_line(line, x);
        acc += d * d;
        n += 1;
        x += EVAL_STEP;
    }
    Some((acc / n as f64).sqrt())
}

/// Greedy truth-line/fitted-curve matching by ascending RMS.
/// Returns per-truth matched curve index and the matched flags per curve.
fn match_curves(lanes: &LaneSet, truth: &GroundTruth) -> (Vec<Option<usize>>, Vec<bool>) {
    let mut pairs = Vec::new();
    for (t, line) in truth.lane_lines.iter().enumerate() {
        for (c, curve) in lanes.curves.iter().enumerate() {
            if let Some(rms) = curve_rms(curve, line) {
                if rms < LANE_MATCH_RMS_M {
                    pairs.push((rms, t, c));
                }
            }
        }
    }
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut truth_match = vec![None; truth.lane_lines.len()];
    let mut curve_used = vec![false; lanes.curves.len()];
    for (_, t, c) in pairs {
        if truth_match[t].is_none() && !curve_used[c] {
            truth_match[t] = Some(c);
            curve_used[c] = true;
        }
    }
    (truth_match, curve_used)
}

fn boundary_mean_error(polyline: &[(f64, f64)], line: &[f64; 4]) -> Option<f64> {
    let pts: Vec<&(f64, f64)> = polyline
        .iter()
        .filter(|(x, _)| (EVAL_X_MIN..=EVAL_X_MAX).contains(x))
        .collect();
    if pts.len() < 5 {
        return None;
    }
    let sum: f64 = pts
        .iter()
        .map(|(x, y)| (y - GroundTruth::eval_line(line, *x)).abs())
        .sum();
    Some(sum / pts.len() as f64)
}

/// Score pipeline outputs against aligned ground truths.
pub fn evaluate(
    truths: &[GroundTruth],
    outputs: &[PipelineFrameOutput],
    database: &str,
) -> Result<EvalReport, SceneError> {
    if truths.len() != outputs.len() {
        return Err(SceneError::Misaligned {
            truths: truths.len(),
            outputs: outputs.len(),
        });
    }
    let frames = truths.len();
    let mut detected_all = 0usize;
    let mut boundary_detected = 0usize;
    let mut ego_correct = 0usize;
    let mut fitted_total = 0usize;
    let mut fitted_unmatched = 0usize;

    for (truth, out) in truths.iter().zip(outputs) {
        let Some(lanes) = &out.lanes else {
            continue;
        };
        let (truth_match, curve_used) = match_curves(lanes, truth);
        fitted_total += lanes.curves.len();
        fitted_unmatched += curve_used.iter().filter(|u| !**u).count();
        if truth_match.iter().all(Option::is_some) {
            detected_all += 1;
        }

        // Ego-lane correctness: both ego boundaries matched to the true ego
        // boundaries, offset within tolerance.
        if let (Some(pred_ego), Some(true_ego)) = (lanes.ego_index, truth.ego_interval) {
            let offset_ok =
                (lanes.lateral_offset - truth.ego_lateral_offset_m).abs() < EGO_OFFSET_TOL_M;
            let boundary_ok = [0usize, 1].iter().all(|side| {
                let curve = &lanes.curves[pred_ego + side];
                let line = &truth.lane_lines[true_ego + side];
                curve_rms(curve, line).is_some_and(|rms| rms < LANE_MATCH_RMS_M)
            });
            if offset_ok && boundary_ok {
                ego_correct += 1;
            }
        }

        if let Some((left, right)) = &out.boundary {
            let l = boundary_mean_error(left, &truth.road_left);
            let r = boundary_mean_error(right, &truth.road_right);
            if let (Some(l), Some(r)) = (l, r) {
                if l < BOUNDARY_TOL_M && r < BOUNDARY_TOL_M {
                    boundary_detected += 1;
                }
            }
        }
    }

    let pct = |num: usize, den: usize| {
        if den == 0 {
            0.0
        } else {
            100.0 * num as f64 / den as f64
        }
    };
    Ok(EvalReport {
        database: database.to_string(),
        frames,
        detected_all,
        boundary_detected,
        correct_rate_pct: pct(ego_correct, frames),
        false_positive_pct: pct(fitted_unmatched, fitted_total),
        correct_boundary_pct: pct(boundary_detected, frames),
        definitions: definitions(),
    })
}

/// Load a corpus directory: sorted frame paths and parsed truths.
pub fn load_corpus(dir: &Path) -> Result<Vec<(PathBuf, GroundTruth)>, SceneError> {
    let frames_dir = dir.join("frames");
    let truth_dir = dir.join("truth");
    let err = |path: &Path, msg: String| SceneError::Io {
        path: path.display().to_string(),
        msg,
    };
    let mut frame_paths: Vec<PathBuf> = std::fs::read_dir(&frames_dir)
        .map_err(|e| err(&frames_dir, e.to_string()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("ppm") | Some("png")
            )
        })
        .collect();
    frame_paths.sort();

    let mut out = Vec::with_capacity(frame_paths.len());
    for frame in frame_paths {
        let stem = frame
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| err(&frame, "bad frame filename".into()))?;
        let truth_path = truth_dir.join(format!("{stem}.json"));
        let text = std::fs::read_to_string(&truth_path)
            .map_err(|e| err(&truth_path, e.to_string()))?;
        let truth: GroundTruth =
            serde_json::from_str(&text).map_err(|e| err(&truth_path, e.to_string()))?;
        out.push((frame, truth));
    }
    if out.is_empty() {
        return Err(err(&frames_dir, "corpus contains no frames".into()));
    }
    Ok(out)
}
