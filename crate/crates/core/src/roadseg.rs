//! Three-class Gaussian-mixture segmentation of the bird's-eye grid into
//! road / surroundings / obstacle.
//!
//! The model starts from predefined per-class statistics (a config file, not
//! k-means), is refined by EM on Lab samples, and classifies cells by the
//! unnormalized posterior score `p(c) * exp(-sum (x-m)^2 / (2 sigma^2))` with
//! ties broken toward the lower class index. Road boundaries come from
//! per-row runs of road cells after majority smoothing; beyond the grid range
//! the boundary is extended toward the lane vanishing point.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ipm::{ground_to_pixel, CameraRig, GroundGrid};
use crate::lanefit::LaneSet;

#[derive(Debug, Error)]
pub enum SegError {
    #[error("seed stats: {0}")]
    BadSeedStats(String),
    #[error("need at least {need} samples for EM, got {got}")]
    TooFewSamples { got: usize, need: usize },
    #[error("road boundary unavailable: only {road_rows} of {rows} rows have a road run")]
    BoundaryUnavailable { road_rows: usize, rows: usize },
    #[error("vanishing-point extension needs at least 2 curves, got {0}")]
    TooFewCurves(usize),
    #[error("projected lane tangents are near-parallel (max angle {max_angle_deg:.3} deg)")]
    NearParallel { max_angle_deg: f64 },
    #[error("lane tangent could not be projected into the image")]
    ProjectionFailed,
}

pub const N_CLASSES: usize = 3;
const VAR_FLOOR: f64 = 1e-6;
const FREEZE_MIN_EFFECTIVE: f64 = 10.0;

/// Segmentation classes, ordered for tie-breaking (road wins ties).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadClass {
    Road = 0,
    Scene = 1,
    Obstacle = 2,
}

impl RoadClass {
    pub const ALL: [RoadClass; 3] = [RoadClass::Road, RoadClass::Scene, RoadClass::Obstacle];

    pub fn name(self) -> &'static str {
        match self {
            RoadClass::Road => "road",
            RoadClass::Scene => "scene",
            RoadClass::Obstacle => "obstacle",
        }
    }
}

/// Diagonal Gaussian statistics for one class in Lab space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mean: [f64; 3],
    pub var: [f64; 3],
    pub prior: f64,
}

/// 3-class diagonal GMM with its EM history.
#[derive(Debug, Clone)]
pub struct GmmModel {
    pub classes: [ClassStats; N_CLASSES],
    pub iterations: usize,
    pub loglik_trace: Vec<f64>,
    /// Classes that collapsed below 10 effective samples and kept their
    /// previous statistics.
    pub frozen: [bool; N_CLASSES],
}

/// Initialize the model exactly from supplied statistics; no data touched.
/// Zero variances are floored to 1e-6 (with a warning), negative variances
/// rejected, priors normalized to sum 1.
pub fn init_from_priors(stats: [ClassStats; N_CLASSES]) -> Result<GmmModel, SegError> {
    let mut classes = stats;
    let prior_sum: f64 = classes.iter().map(|c| c.prior).sum();
    if !(prior_sum > 0.0) {
        return Err(SegError::BadSeedStats(format!(
            "priors must be positive, sum = {prior_sum}"
        )));
    }
    for (i, c) in classes.iter_mut().enumerate() {
        for (ch, v) in c.var.iter_mut().enumerate() {
            if *v < 0.0 {
                return Err(SegError::BadSeedStats(format!(
                    "class {i} channel {ch}: negative variance {v}"
                )));
            }
            if *v < VAR_FLOOR {
                log::warn!(
                    "class {} channel {ch}: variance {v} floored to {VAR_FLOOR}",
                    RoadClass::ALL[i].name()
                );
                *v = VAR_FLOOR;
            }
        }
        c.prior /= prior_sum;
    }
    Ok(GmmModel {
        classes,
        iterations: 0,
        loglik_trace: Vec::new(),
        frozen: [false; N_CLASSES],
    })
}

#[inline]
fn log_gauss(stats: &ClassStats, x: &[f64; 3]) -> f64 {
    let mut acc = 0.0;
    for ch in 0..3 {
        let d = x[ch] - stats.mean[ch];
        acc += d * d / stats.var[ch] + (2.0 * std::f64::consts::PI * stats.var[ch]).ln();
    }
    -0.5 * acc
}

/// Standard EM refinement on Lab samples: normalized-Gaussian E-step,
/// weighted-moment M-step with the variance floor. Stops when the relative
/// log-likelihood change drops below `tol` or after `max_iters` iterations.
/// The log-likelihood is non-decreasing across iterations.
pub fn em_refine(
    model: &GmmModel,
    samples: &[[f64; 3]],
    max_iters: usize,
    tol: f64,
) -> Result<GmmModel, SegError> {
    if samples.len() < 100 {
        return Err(SegError::TooFewSamples {
            got: samples.len(),
            need: 100,
        });
    }
    let n = samples.len();
    let mut out = model.clone();
    out.loglik_trace.clear();
    out.frozen = [false; N_CLASSES];

    let mut resp = vec![[0.0f64; N_CLASSES]; n];
    let mut prev_ll = f64::NEG_INFINITY;
    for iter in 0..max_iters {
        // E-step.
        let mut loglik = 0.0f64;
        for (s, r) in samples.iter().zip(resp.iter_mut()) {
            let mut logp = [0.0f64; N_CLASSES];
            for k in 0..N_CLASSES {
                logp[k] = out.classes[k].prior.max(1e-300).ln() + log_gauss(&out.classes[k], s);
            }
            let m = logp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for k in 0..N_CLASSES {
                r[k] = (logp[k] - m).exp();
                z += r[k];
            }
            for k in 0..N_CLASSES {
                r[k] /= z;
            }
            loglik += m + z.ln();
        }
        out.loglik_trace.push(loglik);
        out.iterations = iter + 1;

        // M-step.
        for k in 0..N_CLASSES {
            let nk: f64 = resp.iter().map(|r| r[k]).sum();
            out.classes[k].prior = nk / n as f64;
            if nk < FREEZE_MIN_EFFECTIVE {
                if !out.frozen[k] {
                    log::warn!(
                        "class {} collapsed to {nk:.1} effective samples; statistics frozen",
                        RoadClass::ALL[k].name()
                    );
                }
                out.frozen[k] = true;
                continue;
            }
            let mut mean = [0.0f64; 3];
            for (s, r) in samples.iter().zip(&resp) {
                for ch in 0..3 {
                    mean[ch] += r[k] * s[ch];
                }
            }
            for m in &mut mean {
                *m /= nk;
            }
            let mut var = [0.0f64; 3];
            for (s, r) in samples.iter().zip(&resp) {
                for ch in 0..3 {
                    let d = s[ch] - mean[ch];
                    var[ch] += r[k] * d * d;
                }
            }
            for v in &mut var {
                *v = (*v / nk).max(VAR_FLOOR);
            }
            out.classes[k].mean = mean;
            out.classes[k].var = var;
        }

        if prev_ll.is_finite() && (loglik - prev_ll).abs() < tol * loglik.abs() {
            break;
        }
        prev_ll = loglik;
    }
    Ok(out)
}

/// Per-class unnormalized posterior score in log space:
/// `ln p(c) - sum (x-m)^2 / (2 sigma^2)`. The Gaussian normalizer is omitted
/// deliberately; classification is by argmax, ties toward lower class index.
pub fn class_log_scores(model: &GmmModel, pixel: &[f64; 3]) -> [f64; N_CLASSES] {
    let mut scores = [0.0f64; N_CLASSES];
    for k in 0..N_CLASSES {
        let c = &model.classes[k];
        let mut q = 0.0;
        for ch in 0..3 {
            let d = pixel[ch] - c.mean[ch];
            q += d * d / (2.0 * c.var[ch]);
        }
        scores[k] = c.prior.max(1e-300).ln() - q;
    }
    scores
}

/// Bayesian classification of a single Lab pixel.
pub fn classify(model: &GmmModel, pixel: &[f64; 3]) -> RoadClass {
    let scores = class_log_scores(model, pixel);
    let mut best = 0usize;
    for k in 1..N_CLASSES {
        if scores[k] > scores[best] {
            best = k;
        }
    }
    RoadClass::ALL[best]
}

// ── Label map ─────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellLabel {
    Road,
    Scene,
    Obstacle,
    Invalid,
}

impl From<RoadClass> for CellLabel {
    fn from(c: RoadClass) -> Self {
        match c {
            RoadClass::Road => CellLabel::Road,
            RoadClass::Scene => CellLabel::Scene,
            RoadClass::Obstacle => CellLabel::Obstacle,
        }
    }
}

/// Per-cell segmentation of the bird's-eye grid.
#[derive(Debug, Clone)]
pub struct RoadLabelMap {
    rows: usize,
    cols: usize,
    labels: Vec<CellLabel>,
    x_max: f64,
    y_max: f64,
    resolution: f64,
}

impl RoadLabelMap {
    pub fn from_labels(
        rows: usize,
        cols: usize,
        labels: Vec<CellLabel>,
        x_max: f64,
        y_max: f64,
        resolution: f64,
    ) -> Self {
        assert_eq!(labels.len(), rows * cols);
        Self {
            rows,
            cols,
            labels,
            x_max,
            y_max,
            resolution,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn label(&self, row: usize, col: usize) -> CellLabel {
        self.labels[row * self.cols + col]
    }

    #[inline]
    pub fn x_of_row(&self, row: usize) -> f64 {
        self.x_max - (row as f64 + 0.5) * self.resolution
    }

    #[inline]
    pub fn y_of_col(&self, col: usize) -> f64 {
        self.y_max - (col as f64 + 0.5) * self.resolution
    }

    #[inline]
    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    /// Continuous row/col lookup for a ground point; None outside the grid.
    pub fn label_at_ground(&self, x: f64, y: f64) -> Option<CellLabel> {
        let r = ((self.x_max - x) / self.resolution - 0.5).round();
        let c = ((self.y_max - y) / self.resolution - 0.5).round();
        if r < 0.0 || c < 0.0 || r as usize >= self.rows || c as usize >= self.cols {
            return None;
        }
        Some(self.label(r as usize, c as usize))
    }
}

/// Classify every valid cell of a 3-channel Lab grid.
pub fn segment_grid(model: &GmmModel, grid: &GroundGrid) -> RoadLabelMap {
    assert_eq!(grid.cells.channels(), 3, "segmentation expects Lab cells");
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut labels = vec![CellLabel::Invalid; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let l = grid.cells.get(c, r, 0);
            if l.is_nan() {
                continue;
            }
            let px = [
                l as f64,
                grid.cells.get(c, r, 1) as f64,
                grid.cells.get(c, r, 2) as f64,
            ];
            labels[r * cols + c] = classify(model, &px).into();
        }
    }
    RoadLabelMap {
        rows,
        cols,
        labels,
        x_max: grid.x_max,
        y_max: grid.y_max,
        resolution: grid.resolution,
    }
}

// ── Boundary extraction ───────────────────────────────────────────────────────

const MIN_RUN: usize = 3;
const MIN_ROAD_ROW_FRACTION: f64 = 0.3;
const MEDIAN_WINDOW: usize = 5;

fn median_filter(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = values.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            let mut w: Vec<f64> = values[lo..hi].to_vec();
            w.sort_by(f64::total_cmp);
            w[w.len() / 2]
        })
        .collect()
}

/// Left/right road-edge polylines in ground coordinates, ordered by
/// increasing x. Uses 3x3 majority smoothing of the road mask, then per-row
/// leftmost/rightmost runs of at least 3 road cells, then a median filter
/// over each polyline.
pub fn extract_boundary(
    map: &RoadLabelMap,
) -> Result<(Vec<(f64, f64)>, Vec<(f64, f64)>), SegError> {
    let (rows, cols) = (map.rows, map.cols);
    // 3x3 majority vote on the binary road mask.
    let mut smooth = vec![false; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let mut road = 0usize;
            let mut total = 0usize;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let (rr, cc) = (r as i64 + dr, c as i64 + dc);
                    if rr < 0 || cc < 0 || rr >= rows as i64 || cc >= cols as i64 {
                        continue;
                    }
                    total += 1;
                    if map.label(rr as usize, cc as usize) == CellLabel::Road {
                        road += 1;
                    }
                }
            }
            smooth[r * cols + c] = 2 * road > total;
        }
    }

    // Per row: leftmost and rightmost runs of >= MIN_RUN road cells.
    let mut xs = Vec::new();
    let mut left_y = Vec::new();
    let mut right_y = Vec::new();
    for r in (0..rows).rev() {
        let mut runs: Vec<(usize, usize)> = Vec::new();
        let mut start: Option<usize> = None;
        for c in 0..=cols {
            let road = c < cols && smooth[r * cols + c];
            match (road, start) {
                (true, None) => start = Some(c),
                (false, Some(s)) => {
                    if c - s >= MIN_RUN {
                        runs.push((s, c - 1));
                    }
                    start = None;
                }
                _ => {}
            }
        }
        if let (Some(first), Some(last)) = (runs.first(), runs.last()) {
            xs.push(map.x_of_row(r));
            left_y.push(map.y_of_col(first.0));
            right_y.push(map.y_of_col(last.1));
        }
    }
    if (xs.len() as f64) < MIN_ROAD_ROW_FRACTION * rows as f64 {
        return Err(SegError::BoundaryUnavailable {
            road_rows: xs.len(),
            rows,
        });
    }
    let left_y = median_filter(&left_y, MEDIAN_WINDOW);
    let right_y = median_filter(&right_y, MEDIAN_WINDOW);
    let left = xs.iter().copied().zip(left_y).collect();
    let right = xs.iter().copied().zip(right_y).collect();
    Ok((left, right))
}

// ── Vanishing-point extension ─────────────────────────────────────────────────

/// Image-space extension of the road boundary beyond the IPM range.
#[derive(Debug, Clone)]
pub struct VpExtension {
    /// Least-squares intersection of the projected lane tangents, pixels.
    pub vp_px: (f64, f64),
    /// One segment per lane curve: from its far-range image point toward the
    /// vanishing point.
    pub segments: Vec<((f64, f64), (f64, f64))>,
}

/// Least-squares intersection of 2D lines given as (point, unit direction).
pub(crate) fn intersect_lines_least_squares(
    lines: &[((f64, f64), (f64, f64))],
) -> Option<(f64, f64)> {
    // Minimize sum |(I - d d^T)(p - q_i)|^2 -> A p = b.
    let mut a = [[0.0f64; 2]; 2];
    let mut b = [0.0f64; 2];
    for ((qx, qy), (dx, dy)) in lines {
        let m = [
            [1.0 - dx * dx, -dx * dy],
            [-dx * dy, 1.0 - dy * dy],
        ];
        for i in 0..2 {
            for j in 0..2 {
                a[i][j] += m[i][j];
            }
            b[i] += m[i][0] * qx + m[i][1] * qy;
        }
    }
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if det.abs() < 1e-12 {
        return None;
    }
    Some((
        (b[0] * a[1][1] - b[1] * a[0][1]) / det,
        (b[1] * a[0][0] - b[0] * a[1][0]) / det,
    ))
}

/// Abscissa where the lane tangents are taken for the extension.
pub const VP_TANGENT_X: f64 = 45.0;
const VP_MIN_ANGLE_DEG: f64 = 0.5;

/// Project each lane tangent at x = 45 m into the image and intersect the
/// projected lines in the least-squares sense. Fails when fewer than two
/// curves are available or the projected lines are near-parallel.
pub fn vanishing_point_extend(lanes: &LaneSet, rig: &CameraRig) -> Result<VpExtension, SegError> {
    if lanes.curves.len() < 2 {
        return Err(SegError::TooFewCurves(lanes.curves.len()));
    }
    let mut lines = Vec::new();
    let mut far_points = Vec::new();
    for curve in &lanes.curves {
        let x0 = VP_TANGENT_X;
        let y0 = curve.eval(x0);
        let slope = curve.slope(x0);
        // Two points on the ground tangent, projected into the image.
        let p1 = ground_to_pixel(rig, x0, y0).map_err(|_| SegError::ProjectionFailed)?;
        let p2 = ground_to_pixel(rig, x0 + 30.0, y0 + 30.0 * slope)
            .map_err(|_| SegError::ProjectionFailed)?;
        // Image coordinates as (x=col, y=row).
        let q1 = (p1.1, p1.0);
        let q2 = (p2.1, p2.0);
        let (mut dx, mut dy) = (q2.0 - q1.0, q2.1 - q1.1);
        let norm = (dx * dx + dy * dy).sqrt();
        if norm < 1e-9 {
            return Err(SegError::ProjectionFailed);
        }
        dx /= norm;
        dy /= norm;
        lines.push((q1, (dx, dy)));
        far_points.push(q1);
    }

    let mut max_angle = 0.0f64;
    for i in 0..lines.len() {
        for j in i + 1..lines.len() {
            let (d1, d2) = (lines[i].1, lines[j].1);
            let cross = (d1.0 * d2.1 - d1.1 * d2.0).abs();
            max_angle = max_angle.max(cross.asin().to_degrees());
        }
    }
    if max_angle < VP_MIN_ANGLE_DEG {
        return Err(SegError::NearParallel {
            max_angle_deg: max_angle,
        });
    }

    let vp_px = intersect_lines_least_squares(&lines).ok_or(SegError::NearParallel {
        max_angle_deg: max_angle,
    })?;
    let segments = far_points.into_iter().map(|p| (p, vp_px)).collect();
    Ok(VpExtension { vp_px, segments })
}

// ── Seed-stats file ───────────────────────────────────────────────────────────

/// Load per-class seed statistics from a text file: one record per line,
/// `class L_mean a_mean b_mean L_var a_var b_var prior`, classes `road`,
/// `scene`, `obstacle` each exactly once. `#` starts a comment.
pub fn load_seed_stats(path: &Path) -> Result<[ClassStats; N_CLASSES], SegError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| SegError::BadSeedStats(format!("{}: {e}", path.display())))?;
    let mut found: [Option<ClassStats>; N_CLASSES] = [None; N_CLASSES];
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(SegError::BadSeedStats(format!(
                "line {}: expected 8 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let idx = match fields[0] {
            "road" => 0,
            "scene" => 1,
            "obstacle" => 2,
            other => {
                return Err(SegError::BadSeedStats(format!(
                    "line {}: unknown class {other:?}",
                    lineno + 1
                )))
            }
        };
        if found[idx].is_some() {
            return Err(SegError::BadSeedStats(format!(
                "duplicate record for class {:?}",
                fields[0]
            )));
        }
        let mut nums = [0.0f64; 7];
        for (i, f) in fields[1..].iter().enumerate() {
            nums[i] = f.parse().map_err(|_| {
                SegError::BadSeedStats(format!("line {}: bad number {f:?}", lineno + 1))
            })?;
        }
        found[idx] = Some(ClassStats {
            mean: [nums[0], nums[1], nums[2]],
            var: [nums[3], nums[4], nums[5]],
            prior: nums[6],
        });
    }
    match found {
        [Some(a), Some(b), Some(c)] => Ok([a, b, c]),
        _ => Err(SegError::BadSeedStats(
            "file must define road, scene and obstacle".into(),
        )),
    }
}

/// Write seed statistics in the format read by [`load_seed_stats`].
pub fn save_seed_stats(path: &Path, stats: &[ClassStats; N_CLASSES]) -> std::io::Result<()> {
    let mut out = String::from("# class L_mean a_mean b_mean L_var a_var b_var prior\n");
    for (k, s) in stats.iter().enumerate() {
        out.push_str(&format!(
            "{} {:.6} {:.6} {:.6} {:.6e} {:.6e} {:.6e} {:.6}\n",
            RoadClass::ALL[k].name(),
            s.mean[0],
            s.mean[1],
            s.mean[2],
            s.var[0],
            s.var[1],
            s.var[2],
            s.prior
        ));
    }
    std::fs::write(path, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn seed_stats() -> [ClassStats; N_CLASSES] {
        [
            ClassStats {
                mean: [0.38, 0.0, 0.0],
                var: [0.002, 4.0, 4.0],
                prior: 0.5,
            },
            ClassStats {
                mean: [0.45, -25.0, 25.0],
                var: [0.01, 50.0, 50.0],
                prior: 0.3,
            },
            ClassStats {
                mean: [0.55, 5.0, -20.0],
                var: [0.02, 100.0, 100.0],
                prior: 0.2,
            },
        ]
    }

    #[test]
    fn init_is_identity_on_supplied_stats() {
        let model = init_from_priors(seed_stats()).unwrap();
        assert_eq!(model.classes, seed_stats());
        assert!((model.classes.iter().map(|c| c.prior).sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn init_normalizes_priors_and_floors_variance() {
        let mut stats = seed_stats();
        stats[0].prior = 5.0;
        stats[1].prior = 3.0;
        stats[2].prior = 2.0;
        stats[1].var[2] = 0.0;
        let model = init_from_priors(stats).unwrap();
        assert!((model.classes[0].prior - 0.5).abs() < 1e-12);
        assert_eq!(model.classes[1].var[2], VAR_FLOOR);
    }

    #[test]
    fn init_rejects_negative_variance() {
        let mut stats = seed_stats();
        stats[2].var[0] = -1.0;
        assert!(matches!(
            init_from_priors(stats),
            Err(SegError::BadSeedStats(_))
        ));
    }

    #[test]
    fn em_fixed_point_for_samples_at_means() {
        // Equal-count samples exactly at the three well-separated means:
        // means and priors reproduce themselves after one iteration (the
        // degenerate sample variance collapses to the floor by design).
        let stats = [
            ClassStats {
                mean: [0.0, 0.0, 0.0],
                var: [0.01, 0.01, 0.01],
                prior: 1.0 / 3.0,
            },
            ClassStats {
                mean: [1.0, 10.0, 0.0],
                var: [0.01, 0.01, 0.01],
                prior: 1.0 / 3.0,
            },
            ClassStats {
                mean: [2.0, 0.0, 10.0],
                var: [0.01, 0.01, 0.01],
                prior: 1.0 / 3.0,
            },
        ];
        let model = init_from_priors(stats).unwrap();
        let mut samples = Vec::new();
        for k in 0..3 {
            for _ in 0..50 {
                samples.push(model.classes[k].mean);
            }
        }
        let refined = em_refine(&model, &samples, 1, 1e-4).unwrap();
        for k in 0..3 {
            for ch in 0..3 {
                assert!(
                    (refined.classes[k].mean[ch] - model.classes[k].mean[ch]).abs() < 1e-9,
                    "mean moved"
                );
            }
            assert!((refined.classes[k].prior - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn em_recovers_1d_mixture_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let truth = [0.0, 0.5, 1.0];
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut samples = Vec::new();
        for _ in 0..3000 {
            let k = rng.random_range(0..3);
            samples.push([truth[k] + noise.sample(&mut rng), 0.0, 0.0]);
        }
        // Offset initialization; EM must pull the means back.
        let stats = [
            ClassStats {
                mean: [0.1, 0.0, 0.0],
                var: [0.02, 1.0, 1.0],
                prior: 1.0 / 3.0,
            },
            ClassStats {
                mean: [0.4, 0.0, 0.0],
                var: [0.02, 1.0, 1.0],
                prior: 1.0 / 3.0,
            },
            ClassStats {
                mean: [0.9, 0.0, 0.0],
                var: [0.02, 1.0, 1.0],
                prior: 1.0 / 3.0,
            },
        ];
        let model = init_from_priors(stats).unwrap();
        let refined = em_refine(&model, &samples, 50, 1e-6).unwrap();
        let mut got: Vec<f64> = refined.classes.iter().map(|c| c.mean[0]).collect();
        got.sort_by(f64::total_cmp);
        for (g, t) in got.iter().zip(truth) {
            assert!((g - t).abs() < 0.02, "mean {g:.4} vs truth {t}");
        }
    }

    #[test]
    fn em_loglik_monotone_on_random_initializations() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let samples: Vec<[f64; 3]> = (0..500)
            .map(|_| {
                [
                    rng.random_range(0.0..1.0),
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-30.0..30.0),
                ]
            })
            .collect();
        for trial in 0..20 {
            let stats: [ClassStats; 3] = std::array::from_fn(|_| ClassStats {
                mean: [
                    rng.random_range(0.0..1.0),
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-30.0..30.0),
                ],
                var: [
                    rng.random_range(0.01..0.1),
                    rng.random_range(1.0..100.0),
                    rng.random_range(1.0..100.0),
                ],
                prior: rng.random_range(0.1..1.0),
            });
            let model = init_from_priors(stats).unwrap();
            let refined = em_refine(&model, &samples, 30, 1e-9).unwrap();
            for w in refined.loglik_trace.windows(2) {
                assert!(
                    w[1] >= w[0] - 1e-7 * w[0].abs().max(1.0),
                    "trial {trial}: log-likelihood decreased {} -> {}",
                    w[0],
                    w[1]
                );
            }
        }
    }

    #[test]
    fn em_rejects_tiny_sample_sets() {
        let model = init_from_priors(seed_stats()).unwrap();
        let samples = vec![[0.5, 0.0, 0.0]; 99];
        assert!(matches!(
            em_refine(&model, &samples, 10, 1e-4),
            Err(SegError::TooFewSamples { got: 99, need: 100 })
        ));
    }

    #[test]
    fn classify_road_mean_is_road() {
        let mut stats = seed_stats();
        for s in &mut stats {
            s.prior = 1.0 / 3.0;
            s.var = [0.01, 10.0, 10.0];
        }
        let model = init_from_priors(stats).unwrap();
        assert_eq!(classify(&model, &model.classes[0].mean.clone()), RoadClass::Road);
    }

    #[test]
    fn classify_ties_break_to_road() {
        let same = ClassStats {
            mean: [0.5, 0.0, 0.0],
            var: [0.01, 1.0, 1.0],
            prior: 1.0 / 3.0,
        };
        let model = init_from_priors([same, same, same]).unwrap();
        assert_eq!(classify(&model, &[0.9, 3.0, -2.0]), RoadClass::Road);
    }

    #[test]
    fn classify_matches_direct_score_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..10 {
            let stats: [ClassStats; 3] = std::array::from_fn(|_| ClassStats {
                mean: [
                    rng.random_range(0.0..1.0),
                    rng.random_range(-30.0..30.0),
                    rng.random_range(-30.0..30.0),
                ],
                var: [
                    rng.random_range(0.01..0.2),
                    rng.random_range(1.0..50.0),
                    rng.random_range(1.0..50.0),
                ],
                prior: rng.random_range(0.1..1.0),
            });
            let model = init_from_priors(stats).unwrap();
            for _ in 0..100 {
                let px = [
                    rng.random_range(0.0..1.0),
                    rng.random_range(-40.0..40.0),
                    rng.random_range(-40.0..40.0),
                ];
                // Direct evaluation of the printed score per class.
                let mut oracle = 0usize;
                let mut best = f64::NEG_INFINITY;
                for (k, c) in model.classes.iter().enumerate() {
                    let mut q = 0.0;
                    for ch in 0..3 {
                        q += (px[ch] - c.mean[ch]).powi(2) / (2.0 * c.var[ch]);
                    }
                    let score = c.prior * (-q).exp();
                    if score > best {
                        best = score;
                        oracle = k;
                    }
                }
                assert_eq!(classify(&model, &px), RoadClass::ALL[oracle]);
            }
        }
    }

    fn rect_road_map(rows: usize, cols: usize, half_width: f64) -> RoadLabelMap {
        let resolution = 0.1;
        let y_max = cols as f64 * resolution / 2.0;
        let mut labels = vec![CellLabel::Scene; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let y = y_max - (c as f64 + 0.5) * resolution;
                if y.abs() <= half_width {
                    labels[r * cols + c] = CellLabel::Road;
                }
            }
        }
        RoadLabelMap::from_labels(rows, cols, labels, rows as f64 * resolution, y_max, resolution)
    }

    #[test]
    fn boundary_of_rectangular_road() {
        let map = rect_road_map(100, 200, 3.5);
        let (left, right) = extract_boundary(&map).unwrap();
        assert_eq!(left.len(), 100);
        for (x, y) in &left {
            assert!((y - 3.5).abs() <= 0.1, "left boundary {y:.2} at x {x:.1}");
        }
        for (_, y) in &right {
            assert!((y + 3.5).abs() <= 0.1, "right boundary {y:.2}");
        }
        // Ordered by increasing x.
        assert!(left.windows(2).all(|w| w[1].0 > w[0].0));
    }

    #[test]
    fn boundary_robust_to_salt_and_pepper() {
        let clean = rect_road_map(100, 200, 3.5);
        let mut noisy_labels: Vec<CellLabel> = (0..100 * 200)
            .map(|i| clean.label(i / 200, i % 200))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        for l in noisy_labels.iter_mut() {
            if rng.random_bool(0.05) {
                *l = match *l {
                    CellLabel::Road => CellLabel::Scene,
                    _ => CellLabel::Road,
                };
            }
        }
        let noisy = RoadLabelMap::from_labels(100, 200, noisy_labels, 10.0, 10.0, 0.1);
        let (left_c, right_c) = extract_boundary(&clean).unwrap();
        let (left_n, right_n) = extract_boundary(&noisy).unwrap();
        let tol = 0.1 + 1e-9; // one cell
        let close = |a: &[(f64, f64)], b: &[(f64, f64)]| {
            let mut bad = 0usize;
            for ((_, ya), (_, yb)) in a.iter().zip(b) {
                if (ya - yb).abs() > tol {
                    bad += 1;
                }
            }
            bad
        };
        assert!(close(&left_c, &left_n) <= 2, "left boundary perturbed");
        assert!(close(&right_c, &right_n) <= 2, "right boundary perturbed");
    }

    #[test]
    fn boundary_unavailable_on_all_scene() {
        let labels = vec![CellLabel::Scene; 50 * 60];
        let map = RoadLabelMap::from_labels(50, 60, labels, 5.0, 3.0, 0.1);
        assert!(matches!(
            extract_boundary(&map),
            Err(SegError::BoundaryUnavailable { .. })
        ));
    }

    // Analytic vanishing point from the rotation-matrix pinhole model: the
    // image of the point at infinity along direction (1, slope, 0).
    fn analytic_vp(rig: &CameraRig, slope: f64) -> (f64, f64) {
        let (st, ct) = rig.theta.sin_cos();
        let (sg, cg) = rig.gamma.sin_cos();
        let rz = |v: [f64; 3]| [v[0] * cg - v[1] * sg, v[0] * sg + v[1] * cg, v[2]];
        let forward = rz([ct, 0.0, -st]);
        let right = rz([0.0, -1.0, 0.0]);
        let down = rz([-st, 0.0, -ct]);
        let norm = (1.0 + slope * slope).sqrt();
        let d = [1.0 / norm, slope / norm, 0.0];
        let dot = |a: [f64; 3], b: [f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        let dz = dot(d, forward);
        let x_img = dot(d, right) / dz;
        let y_img = dot(d, down) / dz;
        let (delta, omega) = crate::ipm::derive_half_angles(rig);
        let row = (1.0 + y_img / delta.tan()) * (rig.rows - 1) as f64 / 2.0;
        let col = (1.0 + x_img / omega.tan()) * (rig.cols - 1) as f64 / 2.0;
        (col, row)
    }

    fn straight_lane_set(offsets: &[f64], slope: f64) -> LaneSet {
        let curves = offsets
            .iter()
            .map(|&y0| crate::lanefit::LaneCurve {
                y0,
                a: slope,
                b: 0.0,
                c: 0.0,
                support: 30,
                domain: (3.0, 45.0),
                inliers: Vec::new(),
            })
            .collect();
        LaneSet {
            curves,
            ego_index: Some(0),
            lateral_offset: 0.0,
            partial: false,
        }
    }

    #[test]
    fn vanishing_point_matches_analytic_for_parallel_lines() {
        let rig = CameraRig::new(1.55, 0.12, 0.0, 0.6, 440, 680).unwrap();
        for slope in [0.0, 0.03, -0.05] {
            let lanes = straight_lane_set(&[-1.85, 1.85], slope);
            let ext = vanishing_point_extend(&lanes, &rig).unwrap();
            let truth = analytic_vp(&rig, slope);
            let err = ((ext.vp_px.0 - truth.0).powi(2) + (ext.vp_px.1 - truth.1).powi(2)).sqrt();
            assert!(err < 1.0, "VP error {err:.3} px at slope {slope}");
            assert_eq!(ext.segments.len(), 2);
        }
    }

    #[test]
    fn vanishing_point_single_curve_skipped() {
        let rig = CameraRig::new(1.55, 0.12, 0.0, 0.6, 440, 680).unwrap();
        let lanes = straight_lane_set(&[1.85], 0.0);
        assert!(matches!(
            vanishing_point_extend(&lanes, &rig),
            Err(SegError::TooFewCurves(1))
        ));
    }

    #[test]
    fn vp_least_squares_tolerates_pixel_noise() {
        let rig = CameraRig::new(1.55, 0.12, 0.0, 0.6, 440, 680).unwrap();
        let truth = analytic_vp(&rig, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        // Three lines through the true VP, perturbed by +-0.5 px at two
        // sample points each.
        let mut lines = Vec::new();
        for angle in [0.4f64, 1.1, 1.9] {
            let d = (angle.cos(), angle.sin());
            let far = (truth.0 + 300.0 * d.0, truth.1 + 300.0 * d.1);
            let p1 = (
                truth.0 + rng.random_range(-0.5..0.5),
                truth.1 + rng.random_range(-0.5..0.5),
            );
            let p2 = (
                far.0 + rng.random_range(-0.5..0.5),
                far.1 + rng.random_range(-0.5..0.5),
            );
            let (mut dx, mut dy) = (p2.0 - p1.0, p2.1 - p1.1);
            let n = (dx * dx + dy * dy).sqrt();
            dx /= n;
            dy /= n;
            lines.push((p1, (dx, dy)));
        }
        let vp = intersect_lines_least_squares(&lines).unwrap();
        let err = ((vp.0 - truth.0).powi(2) + (vp.1 - truth.1).powi(2)).sqrt();
        assert!(err < 3.0, "VP error {err:.3} px");
    }

    #[test]
    fn seed_stats_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gmm_seed.txt");
        save_seed_stats(&path, &seed_stats()).unwrap();
        let loaded = load_seed_stats(&path).unwrap();
        for (a, b) in loaded.iter().zip(seed_stats()) {
            for ch in 0..3 {
                assert!((a.mean[ch] - b.mean[ch]).abs() < 1e-6);
                assert!((a.var[ch] - b.var[ch]).abs() < 1e-9);
            }
            assert!((a.prior - b.prior).abs() < 1e-6);
        }
        std::fs::write(&path, "road 0 0 0 1 1 1 0.5\nscene 0 0 0 1 1 1 0.5\n").unwrap();
        assert!(matches!(
            load_seed_stats(&path),
            Err(SegError::BadSeedStats(_))
        ));
    }

    #[test]
    fn classify_argmax_invariant_under_shared_scale() {
        // Multiplying all class scores by a positive constant is a uniform
        // shift in log space; the argmax cannot move.
        let model = init_from_priors(seed_stats()).unwrap();
        let px = [0.41, -3.0, 2.0];
        let base = class_log_scores(&model, &px);
        let shift = 3.7f64.ln();
        let shifted: Vec<f64> = base.iter().map(|s| s + shift).collect();
        let argmax = |s: &[f64]| {
            let mut b = 0;
            for k in 1..s.len() {
                if s[k] > s[b] {
                    b = k;
                }
            }
            b
        };
        assert_eq!(argmax(&base), argmax(&shifted));
    }
}
