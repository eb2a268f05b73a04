//! From feature mask to fitted lane curves.
//!
//! Flagged cells are grouped by a sliding lateral histogram, densified across
//! dash gaps with a natural cubic spline, and fitted per group with RANSAC
//! against the cubic road model `Y = y0 + aX + bX^2 + cX^3`. The assembled
//! lane set localizes the ego vehicle (interval containing y = 0) and reports
//! the lateral offset from the lane centerline; the departure angle comes
//! from the median ground-frame optical flow (lambda = vy / vx).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ipm::{pixel_to_ground, CameraRig};
use crate::lanefeat::{FeatureMask, LanePoint};
use crate::motion::FlowField;

#[derive(Debug, Error)]
pub enum FitError {
    #[error("need at least {need} points, got {got}")]
    TooFewPoints { got: usize, need: usize },
    #[error("best consensus has {support} points, below the minimum {need}")]
    LowSupport { support: usize, need: usize },
    #[error("degenerate sample: could not solve for curve coefficients")]
    SingularFit,
    #[error("no lane curves to assemble")]
    NoLanes,
    #[error("need at least {need} reliable flow vectors on road cells, got {got}")]
    InsufficientFlow { got: usize, need: usize },
    #[error("forward velocity {vx:.4} m/frame below threshold; departure undefined")]
    Stationary { vx: f64 },
}

/// Cubic lane model in ground coordinates with its supporting inliers.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LaneCurve {
    /// Lateral offset at x = 0, meters.
    pub y0: f64,
    pub a: f64,
    /// 1/m.
    pub b: f64,
    /// 1/m^2.
    pub c: f64,
    /// Inlier count.
    pub support: usize,
    /// Forward extent of the supporting points, meters.
    pub domain: (f64, f64),
    #[serde(skip)]
    pub inliers: Vec<LanePoint>,
}

impl LaneCurve {
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.y0 + self.a * x + self.b * x * x + self.c * x * x * x
    }

    /// Evaluate with the abscissa clamped into the supported domain.
    #[inline]
    pub fn eval_clamped(&self, x: f64) -> f64 {
        self.eval(x.clamp(self.domain.0, self.domain.1))
    }

    /// dY/dX at `x`.
    #[inline]
    pub fn slope(&self, x: f64) -> f64 {
        self.a + 2.0 * self.b * x + 3.0 * self.c * x * x
    }
}

/// Fitted lane lines ordered left-to-right by `y0` plus the ego localization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LaneSet {
    /// At most 8 curves, strictly increasing in y0.
    pub curves: Vec<LaneCurve>,
    /// Index of the lane interval containing y = 0 (interval i lies between
    /// curves i and i+1). None when y = 0 falls outside the fitted curves.
    pub ego_index: Option<usize>,
    /// Meters from the ego-lane centerline (positive = vehicle left of it).
    pub lateral_offset: f64,
    /// Set when only one side of the ego lane is available; the offset is
    /// then relative to that boundary.
    pub partial: bool,
}

/// Abscissa at which ego interval membership and offsets are evaluated.
pub const EGO_EVAL_X: f64 = 5.0;
/// Abscissa at which curve separation is measured for merging.
pub const MERGE_EVAL_X: f64 = 10.0;

/// RANSAC configuration. Deterministic given `seed`.
#[derive(Debug, Clone, Copy)]
pub struct FitParams {
    pub iters: usize,
    /// Inlier distance tolerance, meters (about one lane-mark width).
    pub tol_m: f64,
    pub seed: u64,
    /// Pin c = 0 and fit a parabola instead of the full cubic.
    pub pin_parabola: bool,
    /// Minimum consensus size for a curve to be accepted.
    pub min_support: usize,
}

impl Default for FitParams {
    fn default() -> Self {
        Self {
            iters: 500,
            tol_m: 0.15,
            seed: 7,
            pin_parabola: false,
            min_support: 10,
        }
    }
}

// ── Column clustering ─────────────────────────────────────────────────────────

const CLUSTER_WINDOW_M: f64 = 1.0;
const CLUSTER_STRIDE_M: f64 = 0.25;
const CLUSTER_SPREAD_M: f64 = 1.5;

/// Group flagged cells by a sliding-window histogram over the lateral
/// coordinate. At most `max_groups` groups survive, by descending size.
pub fn cluster_columns(mask: &FeatureMask, max_groups: usize) -> Vec<Vec<LanePoint>> {
    cluster_points(&mask.points(), max_groups)
}

/// Point-list form of [`cluster_columns`].
pub fn cluster_points(points: &[LanePoint], max_groups: usize) -> Vec<Vec<LanePoint>> {
    if points.is_empty() {
        return Vec::new();
    }
    let y_lo = points.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
    let y_hi = points.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
    let n_windows = ((y_hi - y_lo) / CLUSTER_STRIDE_M).ceil() as usize + 1;
    let center = |w: usize| y_lo + w as f64 * CLUSTER_STRIDE_M;

    let mut assigned = vec![false; points.len()];
    let mut groups: Vec<Vec<LanePoint>> = Vec::new();
    loop {
        // Histogram over unassigned points.
        let mut best_w = 0usize;
        let mut best_count = 0usize;
        for w in 0..n_windows {
            let cw = center(w);
            let count = points
                .iter()
                .enumerate()
                .filter(|(i, p)| !assigned[*i] && (p.y - cw).abs() <= CLUSTER_WINDOW_M / 2.0)
                .count();
            if count > best_count {
                best_count = count;
                best_w = w;
            }
        }
        if best_count == 0 {
            break;
        }
        let cw = center(best_w);
        let mut group = Vec::with_capacity(best_count);
        for (i, p) in points.iter().enumerate() {
            if !assigned[i] && (p.y - cw).abs() <= CLUSTER_SPREAD_M / 2.0 {
                assigned[i] = true;
                group.push(*p);
            }
        }
        groups.push(group);
    }
    groups.sort_by(|a, b| b.len().cmp(&a.len()));
    groups.truncate(max_groups);
    groups
}

// ── Gap interpolation ─────────────────────────────────────────────────────────

const INTERP_MIN_POINTS: usize = 4;
const INTERP_MIN_SPAN_M: f64 = 5.0;
const INTERP_BIN_M: f64 = 0.25;
const INTERP_GAP_M: f64 = 0.5;
const INTERP_STEP_M: f64 = 0.25;

/// Natural cubic spline through given knots (second derivative zero at the
/// ends). Knots must be strictly increasing.
struct CubicSpline {
    t: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl CubicSpline {
    fn fit(t: Vec<f64>, y: Vec<f64>) -> Self {
        let n = t.len();
        assert!(n >= 2);
        let mut m = vec![0.0f64; n];
        if n > 2 {
            // Tridiagonal system for interior second derivatives.
            let k = n - 2;
            let mut diag = vec![0.0f64; k];
            let mut lower = vec![0.0f64; k];
            let mut upper = vec![0.0f64; k];
            let mut rhs = vec![0.0f64; k];
            for i in 0..k {
                let h0 = t[i + 1] - t[i];
                let h1 = t[i + 2] - t[i + 1];
                lower[i] = h0 / 6.0;
                diag[i] = (h0 + h1) / 3.0;
                upper[i] = h1 / 6.0;
                rhs[i] = (y[i + 2] - y[i + 1]) / h1 - (y[i + 1] - y[i]) / h0;
            }
            // Thomas algorithm.
            for i in 1..k {
                let w = lower[i] / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
            }
        }
        Self { t, y, m }
    }

    fn eval(&self, x: f64) -> f64 {
        let n = self.t.len();
        let i = match self.t.binary_search_by(|v| v.total_cmp(&x)) {
            Ok(i) => i.min(n - 2),
            Err(i) => i.clamp(1, n - 1) - 1,
        };
        let (t0, t1) = (self.t[i], self.t[i + 1]);
        let h = t1 - t0;
        let (a, b) = ((t1 - x) / h, (x - t0) / h);
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

/// Densify a point group across dash gaps with a natural cubic spline through
/// per-bin lateral medians. Groups below 4 points or spanning under 5 m pass
/// through unchanged; original points are always retained.
pub fn interpolate_gaps(group: &[LanePoint]) -> Vec<LanePoint> {
    if group.len() < INTERP_MIN_POINTS {
        return group.to_vec();
    }
    let x_lo = group.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let x_hi = group.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    if x_hi - x_lo < INTERP_MIN_SPAN_M {
        return group.to_vec();
    }

    // Per-bin lateral medians, bins along x.
    let n_bins = ((x_hi - x_lo) / INTERP_BIN_M).ceil() as usize + 1;
    let mut bins: Vec<Vec<&LanePoint>> = vec![Vec::new(); n_bins];
    for p in group {
        let b = (((p.x - x_lo) / INTERP_BIN_M) as usize).min(n_bins - 1);
        bins[b].push(p);
    }
    let mut knots_t = Vec::new();
    let mut knots_y = Vec::new();
    for bin in &bins {
        if bin.is_empty() {
            continue;
        }
        let mut ys: Vec<f64> = bin.iter().map(|p| p.y).collect();
        ys.sort_by(f64::total_cmp);
        let median = if ys.len() % 2 == 0 {
            0.5 * (ys[ys.len() / 2 - 1] + ys[ys.len() / 2])
        } else {
            ys[ys.len() / 2]
        };
        let x_mean = bin.iter().map(|p| p.x).sum::<f64>() / bin.len() as f64;
        knots_t.push(x_mean);
        knots_y.push(median);
    }
    if knots_t.len() < 2 {
        return group.to_vec();
    }
    let spline = CubicSpline::fit(knots_t.clone(), knots_y);

    let mut out = group.to_vec();
    for w in knots_t.windows(2) {
        let gap = w[1] - w[0];
        if gap > INTERP_GAP_M {
            let steps = (gap / INTERP_STEP_M).floor() as usize;
            for s in 1..=steps {
                let x = w[0] + s as f64 * INTERP_STEP_M;
                if x < w[1] - 1e-9 {
                    out.push(LanePoint {
                        x,
                        y: spline.eval(x),
                    });
                }
            }
        }
    }
    out
}

// ── RANSAC fitting ────────────────────────────────────────────────────────────

/// Gaussian elimination with partial pivoting for small dense systems.
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0f64; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    Some(x)
}

/// Exact polynomial through `deg+1` points (Vandermonde solve).
fn solve_minimal(pts: &[LanePoint], deg: usize) -> Option<[f64; 4]> {
    let n = deg + 1;
    let a: Vec<Vec<f64>> = pts
        .iter()
        .take(n)
        .map(|p| (0..n).map(|k| p.x.powi(k as i32)).collect())
        .collect();
    let b: Vec<f64> = pts.iter().take(n).map(|p| p.y).collect();
    let sol = solve_linear(a, b)?;
    let mut out = [0.0f64; 4];
    out[..n].copy_from_slice(&sol);
    Some(out)
}

/// Least-squares polynomial fit in a centered/scaled basis, expanded back to
/// raw coefficients. Keeps the normal equations well conditioned out to 45 m.
fn polyfit_ls(pts: &[LanePoint], deg: usize) -> Option<[f64; 4]> {
    let n = deg + 1;
    let mu = pts.iter().map(|p| p.x).sum::<f64>() / pts.len() as f64;
    let var = pts.iter().map(|p| (p.x - mu).powi(2)).sum::<f64>() / pts.len() as f64;
    let scale = var.sqrt().max(1e-6);

    let mut ata = vec![vec![0.0f64; n]; n];
    let mut atb = vec![0.0f64; n];
    for p in pts {
        let s = (p.x - mu) / scale;
        let mut pow = [1.0f64; 4];
        for k in 1..n {
            pow[k] = pow[k - 1] * s;
        }
        for i in 0..n {
            for j in 0..n {
                ata[i][j] += pow[i] * pow[j];
            }
            atb[i] += pow[i] * p.y;
        }
    }
    let beta = solve_linear(ata, atb)?;

    // Expand sum_k beta_k ((x-mu)/scale)^k into raw powers of x.
    let mut raw = [0.0f64; 4];
    for (k, &bk) in beta.iter().enumerate() {
        // (x - mu)^k / scale^k via binomial expansion.
        let mut binom = 1.0f64;
        for j in 0..=k {
            // C(k, j) * x^j * (-mu)^(k-j)
            raw[j] += bk / scale.powi(k as i32) * binom * (-mu).powi((k - j) as i32);
            binom = binom * (k - j) as f64 / (j + 1) as f64;
        }
    }
    Some(raw)
}

fn count_inliers(pts: &[LanePoint], coef: &[f64; 4], tol: f64) -> usize {
    pts.iter()
        .filter(|p| {
            let y = coef[0] + coef[1] * p.x + coef[2] * p.x * p.x + coef[3] * p.x * p.x * p.x;
            (p.y - y).abs() <= tol
        })
        .count()
}

/// Robust cubic fit by random minimal samples; the winning consensus set is
/// re-estimated by least squares. Deterministic for a given seed; ties in
/// consensus size keep the earliest iteration's sample.
pub fn ransac_fit(points: &[LanePoint], params: &FitParams) -> Result<LaneCurve, FitError> {
    let deg = if params.pin_parabola { 2 } else { 3 };
    let minimal = deg + 1;
    if points.len() < minimal {
        return Err(FitError::TooFewPoints {
            got: points.len(),
            need: minimal,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best_coef: Option<[f64; 4]> = None;
    let mut best_count = 0usize;
    for _ in 0..params.iters {
        let idx = rand::seq::index::sample(&mut rng, points.len(), minimal);
        let sample: Vec<LanePoint> = idx.iter().map(|i| points[i]).collect();
        // Distinct abscissae required for interpolation.
        let mut degenerate = false;
        for i in 0..sample.len() {
            for j in i + 1..sample.len() {
                if (sample[i].x - sample[j].x).abs() < 1e-9 {
                    degenerate = true;
                }
            }
        }
        if degenerate {
            continue;
        }
        let Some(coef) = solve_minimal(&sample, deg) else {
            continue;
        };
        let count = count_inliers(points, &coef, params.tol_m);
        if count > best_count {
            best_count = count;
            best_coef = Some(coef);
        }
    }

    let coef = best_coef.ok_or(FitError::SingularFit)?;
    if best_count < params.min_support {
        return Err(FitError::LowSupport {
            support: best_count,
            need: params.min_support,
        });
    }

    let inliers: Vec<LanePoint> = points
        .iter()
        .filter(|p| {
            let y = coef[0] + coef[1] * p.x + coef[2] * p.x * p.x + coef[3] * p.x * p.x * p.x;
            (p.y - y).abs() <= params.tol_m
        })
        .copied()
        .collect();
    let refined = polyfit_ls(&inliers, deg).ok_or(FitError::SingularFit)?;
    let x_lo = inliers.iter().map(|p| p.x).fold(f64::INFINITY, f64::min);
    let x_hi = inliers.iter().map(|p| p.x).fold(f64::NEG_INFINITY, f64::max);
    Ok(LaneCurve {
        y0: refined[0],
        a: refined[1],
        b: refined[2],
        c: refined[3],
        support: inliers.len(),
        domain: (x_lo, x_hi),
        inliers,
    })
}

// ── Lane assembly ─────────────────────────────────────────────────────────────

/// Sort curves left-to-right, drop near-duplicates (separation below
/// `min_separation_m` at x = 10, keeping the higher support), locate the ego
/// interval and the lateral offset at x = 5.
pub fn assemble_lanes(
    mut curves: Vec<LaneCurve>,
    max_lanes: usize,
    min_separation_m: f64,
) -> Result<LaneSet, FitError> {
    if curves.is_empty() {
        return Err(FitError::NoLanes);
    }
    curves.sort_by(|a, b| {
        b.support
            .cmp(&a.support)
            .then(a.y0.total_cmp(&b.y0))
    });
    curves.truncate(max_lanes);
    curves.sort_by(|a, b| a.y0.total_cmp(&b.y0));

    // Adjacent-pair separation sweep; the 0.6 m duplicate merge falls out of
    // the same rule since min_separation_m >= 0.6.
    loop {
        let mut removed = false;
        for i in 0..curves.len().saturating_sub(1) {
            let sep =
                (curves[i + 1].eval_clamped(MERGE_EVAL_X) - curves[i].eval_clamped(MERGE_EVAL_X))
                    .abs();
            if sep < min_separation_m {
                let drop = if curves[i].support >= curves[i + 1].support {
                    i + 1
                } else {
                    i
                };
                curves.remove(drop);
                removed = true;
                break;
            }
        }
        if !removed {
            break;
        }
    }

    let ys: Vec<f64> = curves.iter().map(|c| c.eval_clamped(EGO_EVAL_X)).collect();
    let mut ego_index = None;
    for i in 0..ys.len().saturating_sub(1) {
        if ys[i] < 0.0 && ys[i + 1] >= 0.0 {
            ego_index = Some(i);
            break;
        }
    }
    let (lateral_offset, partial) = match ego_index {
        Some(i) => (-(ys[i] + ys[i + 1]) / 2.0, false),
        None => {
            // y = 0 outside the fitted set: report relative to the nearest
            // boundary curve and flag the frame partial.
            let nearest = ys
                .iter()
                .copied()
                .min_by(|a, b| a.abs().total_cmp(&b.abs()))
                .unwrap();
            (-nearest, true)
        }
    };

    Ok(LaneSet {
        curves,
        ego_index,
        lateral_offset,
        partial,
    })
}

// ── Departure angle ───────────────────────────────────────────────────────────

/// Minimum reliable ground-frame flow vectors for a departure estimate.
pub const DEPARTURE_MIN_SAMPLES: usize = 50;
/// Below this forward speed (m/frame) the ratio vy/vx is meaningless.
pub const DEPARTURE_MIN_VX: f64 = 0.01;

/// Ego drift state from Eq-style ratio lambda = vy / vx.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct DepartureState {
    /// vy / vx; positive means drift toward +y (left).
    pub lambda: f64,
    /// atan(lambda), radians.
    pub angle_rad: f64,
    /// Ego forward velocity estimate, m/frame (positive when driving).
    pub vx: f64,
    /// Ego lateral velocity estimate, m/frame.
    pub vy: f64,
    /// Reliable flow vectors that entered the medians.
    pub samples: usize,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 0 {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    } else {
        values[n / 2]
    }
}

/// Estimate the lane-departure state from optical flow on road-classified
/// cells. Static road points appear to move against the ego motion, so the
/// ego velocity is the negated component-wise median of the ground-frame
/// displacements; the ratio vy/vx is unchanged by the negation.
pub fn departure_angle(flow: &FlowField, rig: &CameraRig) -> Result<DepartureState, FitError> {
    let mut dxs = Vec::new();
    let mut dys = Vec::new();
    for v in flow.vectors.iter().filter(|v| v.reliable) {
        let Ok(g1) = pixel_to_ground(rig, v.pos.1 as f64, v.pos.0 as f64) else {
            continue;
        };
        let Ok(g2) = pixel_to_ground(
            rig,
            (v.pos.1 + v.disp.1) as f64,
            (v.pos.0 + v.disp.0) as f64,
        ) else {
            continue;
        };
        dxs.push(g2.0 - g1.0);
        dys.push(g2.1 - g1.1);
    }
    if dxs.len() < DEPARTURE_MIN_SAMPLES {
        return Err(FitError::InsufficientFlow {
            got: dxs.len(),
            need: DEPARTURE_MIN_SAMPLES,
        });
    }
    let samples = dxs.len();
    let vx = -median(&mut dxs);
    let vy = -median(&mut dys);
    if vx.abs() < DEPARTURE_MIN_VX {
        return Err(FitError::Stationary { vx });
    }
    let lambda = vy / vx;
    Ok(DepartureState {
        lambda,
        angle_rad: lambda.atan(),
        vx,
        vy,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ipm::ground_to_pixel;
    use crate::motion::FlowVector;

    fn pts_on(coef: [f64; 4], xs: impl IntoIterator<Item = f64>) -> Vec<LanePoint> {
        xs.into_iter()
            .map(|x| LanePoint {
                x,
                y: coef[0] + coef[1] * x + coef[2] * x * x + coef[3] * x * x * x,
            })
            .collect()
    }

    fn ridge(y: f64, n: usize) -> Vec<LanePoint> {
        (0..n)
            .map(|i| LanePoint {
                x: 5.0 + i as f64 * 0.5,
                y,
            })
            .collect()
    }

    #[test]
    fn cluster_two_ridges() {
        let mut pts = ridge(-1.75, 40);
        pts.extend(ridge(1.75, 40));
        let groups = cluster_points(&pts, 8);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].len(), 40);
        assert_eq!(groups[1].len(), 40);
    }

    #[test]
    fn cluster_empty_mask() {
        assert!(cluster_points(&[], 8).is_empty());
    }

    #[test]
    fn cluster_caps_at_max_groups() {
        let mut pts = Vec::new();
        for i in 0..9 {
            // Sizes 12..20 so the cap keeps the largest eight.
            pts.extend(ridge(-8.0 + i as f64 * 2.0, 12 + i));
        }
        let groups = cluster_points(&pts, 8);
        assert_eq!(groups.len(), 8);
        assert!(groups.iter().all(|g| g.len() >= 13), "smallest group kept");
    }

    #[test]
    fn cluster_groups_have_bounded_spread() {
        let mut pts = ridge(0.0, 30);
        pts.extend(ridge(0.6, 30));
        for g in cluster_points(&pts, 8) {
            let lo = g.iter().map(|p| p.y).fold(f64::INFINITY, f64::min);
            let hi = g.iter().map(|p| p.y).fold(f64::NEG_INFINITY, f64::max);
            assert!(hi - lo <= 1.5 + 1e-9);
        }
    }

    #[test]
    fn interpolate_fills_dash_gaps_close_to_generator() {
        let coef = [1.0, 0.01, 2e-4, -1e-6];
        // 2 m dashes with 4 m gaps.
        let mut pts = Vec::new();
        let mut x = 5.0;
        while x < 40.0 {
            if (x - 5.0) % 6.0 < 2.0 {
                pts.extend(pts_on(coef, [x]));
            }
            x += 0.1;
        }
        let dense = interpolate_gaps(&pts);
        assert!(dense.len() > pts.len(), "gaps were not filled");
        for p in &dense {
            let y = coef[0] + coef[1] * p.x + coef[2] * p.x * p.x + coef[3] * p.x * p.x * p.x;
            assert!(
                (p.y - y).abs() < 0.05,
                "filled point ({:.2},{:.3}) deviates {:.3}",
                p.x,
                p.y,
                (p.y - y).abs()
            );
        }
    }

    #[test]
    fn interpolate_dense_group_unchanged() {
        let pts = pts_on([0.0, 0.05, 0.0, 0.0], (0..40).map(|i| 5.0 + i as f64 * 0.25));
        let out = interpolate_gaps(&pts);
        assert_eq!(out.len(), pts.len());
    }

    #[test]
    fn interpolate_tiny_group_passes_through() {
        let pts = pts_on([0.0, 0.0, 0.0, 0.0], [1.0, 2.0, 3.0]);
        assert_eq!(interpolate_gaps(&pts).len(), 3);
        // 4 points but short span: also unchanged.
        let short = pts_on([0.0, 0.0, 0.0, 0.0], [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(interpolate_gaps(&short).len(), 4);
    }

    #[test]
    fn ransac_recovers_exact_line() {
        let pts = pts_on([2.0, 0.1, 0.0, 0.0], (0..30).map(|i| 2.0 + i as f64));
        let curve = ransac_fit(&pts, &FitParams::default()).unwrap();
        assert!((curve.y0 - 2.0).abs() < 1e-9);
        assert!((curve.a - 0.1).abs() < 1e-9);
        assert!(curve.b.abs() < 1e-9);
        assert!(curve.c.abs() < 1e-9);
        assert_eq!(curve.support, 30);
    }

    #[test]
    fn ransac_too_few_points() {
        let pts = pts_on([0.0, 1.0, 0.0, 0.0], [1.0, 2.0, 3.0]);
        assert!(matches!(
            ransac_fit(&pts, &FitParams::default()),
            Err(FitError::TooFewPoints { got: 3, need: 4 })
        ));
    }

    #[test]
    fn ransac_low_support_rejected() {
        let pts = pts_on([0.0, 0.0, 0.0, 0.0], [1.0, 3.0, 5.0, 7.0, 9.0]);
        assert!(matches!(
            ransac_fit(&pts, &FitParams::default()),
            Err(FitError::LowSupport { support: 5, .. })
        ));
    }

    #[test]
    fn ransac_deterministic_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut pts = pts_on([1.0, -0.02, 3e-4, 0.0], (0..60).map(|i| 3.0 + 0.6 * i as f64));
        for p in pts.iter_mut() {
            p.y += rng.random_range(-0.05..0.05);
        }
        for _ in 0..15 {
            pts.push(LanePoint {
                x: rng.random_range(3.0..40.0),
                y: rng.random_range(-5.0..5.0),
            });
        }
        let params = FitParams {
            seed: 42,
            ..Default::default()
        };
        let c1 = ransac_fit(&pts, &params).unwrap();
        let c2 = ransac_fit(&pts, &params).unwrap();
        assert_eq!(c1.y0.to_bits(), c2.y0.to_bits());
        assert_eq!(c1.a.to_bits(), c2.a.to_bits());
        assert_eq!(c1.b.to_bits(), c2.b.to_bits());
        assert_eq!(c1.c.to_bits(), c2.c.to_bits());
        assert_eq!(c1.support, c2.support);
    }

    // Exhaustive consensus oracle over every 4-point subset.
    fn exhaustive_consensus(pts: &[LanePoint], tol: f64) -> (usize, Vec<usize>) {
        let n = pts.len();
        let mut best = 0usize;
        let mut best_set = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    for l in k + 1..n {
                        let sample = [pts[i], pts[j], pts[k], pts[l]];
                        let mut ok = true;
                        for a in 0..4 {
                            for b in a + 1..4 {
                                if (sample[a].x - sample[b].x).abs() < 1e-9 {
                                    ok = false;
                                }
                            }
                        }
                        if !ok {
                            continue;
                        }
                        let Some(coef) = solve_minimal(&sample, 3) else {
                            continue;
                        };
                        let members: Vec<usize> = (0..n)
                            .filter(|&m| {
                                let p = pts[m];
                                let y = coef[0]
                                    + coef[1] * p.x
                                    + coef[2] * p.x * p.x
                                    + coef[3] * p.x * p.x * p.x;
                                (p.y - y).abs() <= tol
                            })
                            .collect();
                        if members.len() > best {
                            best = members.len();
                            best_set = members;
                        }
                    }
                }
            }
        }
        (best, best_set)
    }

    #[test]
    fn ransac_matches_exhaustive_consensus_on_small_instance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let coef = [0.5, 0.03, -4e-4, 1e-6];
        let mut pts = Vec::new();
        for i in 0..14 {
            let x = 4.0 + i as f64 * 2.6;
            let mut p = pts_on(coef, [x])[0];
            p.y += rng.random_range(-0.03..0.03);
            pts.push(p);
        }
        for _ in 0..6 {
            pts.push(LanePoint {
                x: rng.random_range(4.0..40.0),
                y: rng.random_range(-5.0..5.0),
            });
        }
        let params = FitParams {
            seed: 3,
            min_support: 4,
            ..Default::default()
        };
        let curve = ransac_fit(&pts, &params).unwrap();
        let (oracle_count, oracle_set) = exhaustive_consensus(&pts, params.tol_m);
        assert_eq!(curve.support, oracle_count, "consensus count mismatch");
        let got: Vec<usize> = (0..pts.len())
            .filter(|&i| curve.inliers.iter().any(|q| q == &pts[i]))
            .collect();
        assert_eq!(got, oracle_set, "inlier sets differ");
    }

    #[test]
    fn refit_matches_normal_equations_oracle() {
        use nalgebra::{DMatrix, DVector};
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coef = [1.2, -0.01, 1e-4, -2e-6];
        let mut pts = Vec::new();
        for i in 0..50 {
            let x = 3.0 + 0.8 * i as f64;
            let mut p = pts_on(coef, [x])[0];
            p.y += rng.random_range(-0.04..0.04);
            pts.push(p);
        }
        let curve = ransac_fit(&pts, &FitParams::default()).unwrap();

        // Independent oracle: SVD least squares on the raw Vandermonde of the
        // returned inlier set.
        let n = curve.inliers.len();
        let a = DMatrix::from_fn(n, 4, |r, c| curve.inliers[r].x.powi(c as i32));
        let b = DVector::from_fn(n, |r, _| curve.inliers[r].y);
        let sol = a.svd(true, true).solve(&b, 1e-14).unwrap();
        assert!((curve.y0 - sol[0]).abs() < 1e-9, "y0 {} vs {}", curve.y0, sol[0]);
        assert!((curve.a - sol[1]).abs() < 1e-9);
        assert!((curve.b - sol[2]).abs() < 1e-9);
        assert!((curve.c - sol[3]).abs() < 1e-9);
    }

    #[test]
    fn parabola_mode_pins_cubic_term() {
        let pts = pts_on([1.0, 0.02, 5e-4, 0.0], (0..40).map(|i| 2.0 + i as f64));
        let params = FitParams {
            pin_parabola: true,
            ..Default::default()
        };
        let curve = ransac_fit(&pts, &params).unwrap();
        assert_eq!(curve.c, 0.0);
        assert!((curve.b - 5e-4).abs() < 1e-9);
    }

    fn line(y0: f64, support: usize) -> LaneCurve {
        LaneCurve {
            y0,
            a: 0.0,
            b: 0.0,
            c: 0.0,
            support,
            domain: (2.0, 45.0),
            inliers: Vec::new(),
        }
    }

    #[test]
    fn assemble_two_lane_ego() {
        let set = assemble_lanes(vec![line(1.7, 30), line(-1.8, 30)], 8, 1.2).unwrap();
        assert_eq!(set.ego_index, Some(0));
        assert!((set.lateral_offset - 0.05).abs() < 1e-9);
        assert!(!set.partial);
        assert!(set.curves.windows(2).all(|w| w[0].y0 < w[1].y0));
    }

    #[test]
    fn assemble_single_curve_partial() {
        let set = assemble_lanes(vec![line(1.7, 30)], 8, 1.2).unwrap();
        assert_eq!(set.ego_index, None);
        assert!(set.partial);
        assert!((set.lateral_offset - -1.7).abs() < 1e-9);
    }

    #[test]
    fn assemble_merges_duplicates() {
        let set = assemble_lanes(
            vec![line(-1.8, 30), line(1.6, 40), line(1.9, 20)],
            8,
            1.2,
        )
        .unwrap();
        assert_eq!(set.curves.len(), 2);
        assert!((set.curves[1].y0 - 1.6).abs() < 1e-9, "higher support kept");
    }

    #[test]
    fn assemble_no_curves_is_error() {
        assert!(matches!(
            assemble_lanes(Vec::new(), 8, 1.2),
            Err(FitError::NoLanes)
        ));
    }

    fn synthetic_flow(rig: &CameraRig, vx: f64, vy: f64, n: usize) -> FlowField {
        let mut vectors = Vec::new();
        let mut i = 0usize;
        while vectors.len() < n {
            let x = 5.0 + (i % 20) as f64 * 1.3;
            let y = -4.0 + (i / 20) as f64 * 1.1;
            i += 1;
            let Ok((r1, c1)) = ground_to_pixel(rig, x, y) else {
                continue;
            };
            // Static ground point observed from a camera that moved by
            // (vx, vy): it appears displaced by the negated ego motion.
            let Ok((r2, c2)) = ground_to_pixel(rig, x - vx, y - vy) else {
                continue;
            };
            vectors.push(FlowVector {
                pos: (c1 as f32, r1 as f32),
                disp: ((c2 - c1) as f32, (r2 - r1) as f32),
                reliable: true,
            });
        }
        FlowField { vectors }
    }

    fn test_rig() -> CameraRig {
        CameraRig::new(1.55, 0.12, 0.0, 0.6, 440, 680).unwrap()
    }

    #[test]
    fn departure_pure_forward_is_zero() {
        let rig = test_rig();
        let flow = synthetic_flow(&rig, 0.8, 0.0, 80);
        let state = departure_angle(&flow, &rig).unwrap();
        assert!(state.lambda.abs() < 1e-3, "lambda = {}", state.lambda);
        assert!((state.vx - 0.8).abs() < 0.02);
    }

    #[test]
    fn departure_equal_components_is_45_degrees() {
        let rig = test_rig();
        let flow = synthetic_flow(&rig, 0.5, 0.5, 80);
        let state = departure_angle(&flow, &rig).unwrap();
        assert!((state.lambda - 1.0).abs() < 1e-2);
        assert!((state.angle_rad.to_degrees() - 45.0).abs() < 0.5);
    }

    #[test]
    fn departure_sign_convention_left_drift_positive() {
        let rig = test_rig();
        let flow = synthetic_flow(&rig, 0.8, 0.03, 80);
        let state = departure_angle(&flow, &rig).unwrap();
        assert!(state.lambda > 0.0, "drift toward +y must give positive lambda");
    }

    #[test]
    fn departure_requires_samples_and_motion() {
        let rig = test_rig();
        let flow = synthetic_flow(&rig, 0.8, 0.0, 20);
        assert!(matches!(
            departure_angle(&flow, &rig),
            Err(FitError::InsufficientFlow { got: 20, need: 50 })
        ));
        let still = synthetic_flow(&rig, 0.0, 0.0, 80);
        assert!(matches!(
            departure_angle(&still, &rig),
            Err(FitError::Stationary { .. })
        ));
    }
}
