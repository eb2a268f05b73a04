//! Sparse optical flow, per-detection mobility and GPS combination.
//!
//! Flow is coarse-to-fine iterative least squares over a Gaussian pyramid
//! with a structure-tensor reliability gate. Mobility compares a detection's
//! median flow against the road background flow, so "static" means moving
//! with the ego vehicle's frame (a car pacing us or parked scenery under pure
//! translation), not world-static. GPS fixes are smoothed with an exponential
//! moving average and combined with the lane-relative state into the
//! per-frame record.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgcore::{downsample_half, ImageF};

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("frame dimensions differ: {0}x{1} vs {2}x{3}")]
    DimMismatch(usize, usize, usize, usize),
    #[error("flow input must be single-channel")]
    NotGrayscale,
    #[error("gps log {path}: {msg}")]
    GpsLog { path: String, msg: String },
}

/// One tracked point: position, displacement (px/frame), reliability.
/// Positions and displacements are (x, y) in pixel coordinates.
#[derive(Debug, Clone, Copy)]
pub struct FlowVector {
    pub pos: (f32, f32),
    pub disp: (f32, f32),
    pub reliable: bool,
}

/// Sparse flow field for one frame pair.
#[derive(Debug, Clone, Default)]
pub struct FlowField {
    pub vectors: Vec<FlowVector>,
}

impl FlowField {
    pub fn reliable_count(&self) -> usize {
        self.vectors.iter().filter(|v| v.reliable).count()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FlowParams {
    pub pyramid_levels: usize,
    /// Integration window side, odd.
    pub window: usize,
    pub max_iters: usize,
    /// Convergence threshold on the update step, pixels.
    pub epsilon: f32,
    /// Reliability gate on the smaller eigenvalue of the window-averaged
    /// structure tensor.
    pub min_eigen: f32,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            pyramid_levels: 3,
            window: 15,
            max_iters: 20,
            epsilon: 0.01,
            min_eigen: 1e-4,
        }
    }
}

fn gradients(img: &ImageF) -> (ImageF, ImageF) {
    let (w, h) = (img.width(), img.height());
    let mut gx = ImageF::new(w, h, 1);
    let mut gy = ImageF::new(w, h, 1);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            gx.set(
                x as usize,
                y as usize,
                0,
                0.5 * (img.get_clamped(x + 1, y, 0) - img.get_clamped(x - 1, y, 0)),
            );
            gy.set(
                x as usize,
                y as usize,
                0,
                0.5 * (img.get_clamped(x, y + 1, 0) - img.get_clamped(x, y - 1, 0)),
            );
        }
    }
    (gx, gy)
}

/// Pyramidal sparse flow from `prev` to `next` at the given points.
///
/// Points violating the window margin, sitting on textureless patches, or
/// failing to converge are returned with `reliable = false` and zero
/// displacement left as-is. Identical frames yield exactly zero flow.
pub fn lk_flow(
    prev: &ImageF,
    next: &ImageF,
    points: &[(f32, f32)],
    params: &FlowParams,
) -> Result<FlowField, MotionError> {
    if prev.width() != next.width() || prev.height() != next.height() {
        return Err(MotionError::DimMismatch(
            prev.width(),
            prev.height(),
            next.width(),
            next.height(),
        ));
    }
    if prev.channels() != 1 || next.channels() != 1 {
        return Err(MotionError::NotGrayscale);
    }

    let levels = params.pyramid_levels.max(1);
    let mut prev_pyr = vec![prev.clone()];
    let mut next_pyr = vec![next.clone()];
    for l in 1..levels {
        if prev_pyr[l - 1].width() < 2 * params.window || prev_pyr[l - 1].height() < 2 * params.window
        {
            break;
        }
        prev_pyr.push(downsample_half(&prev_pyr[l - 1]).expect("dims checked"));
        next_pyr.push(downsample_half(&next_pyr[l - 1]).expect("dims checked"));
    }
    let grads: Vec<(ImageF, ImageF)> = prev_pyr.iter().map(gradients).collect();

    let half = (params.window / 2) as i64;
    let win_px = (params.window * params.window) as f64;
    let mut vectors = Vec::with_capacity(points.len());

    'point: for &(px, py) in points {
        let margin = half as f32 + 1.0;
        if px < margin
            || py < margin
            || px >= prev.width() as f32 - margin
            || py >= prev.height() as f32 - margin
        {
            vectors.push(FlowVector {
                pos: (px, py),
                disp: (0.0, 0.0),
                reliable: false,
            });
            continue;
        }

        let mut dx = 0.0f64;
        let mut dy = 0.0f64;
        let mut reliable = true;
        for level in (0..prev_pyr.len()).rev() {
            let scale = 1.0 / (1usize << level) as f64;
            let xc = px as f64 * scale;
            let yc = py as f64 * scale;
            if level < prev_pyr.len() - 1 {
                dx *= 2.0;
                dy *= 2.0;
            }
            let img0 = &prev_pyr[level];
            let img1 = &next_pyr[level];
            let (gx, gy) = &grads[level];

            // Window patches and structure tensor at this level.
            let mut a11 = 0.0f64;
            let mut a12 = 0.0f64;
            let mut a22 = 0.0f64;
            let n = params.window;
            let mut patch0 = vec![0.0f64; n * n];
            let mut patch_gx = vec![0.0f64; n * n];
            let mut patch_gy = vec![0.0f64; n * n];
            let mut idx = 0;
            for wy in -half..=half {
                for wx in -half..=half {
                    let sx = xc + wx as f64;
                    let sy = yc + wy as f64;
                    let i0 = img0.sample_bilinear(sx, sy, 0) as f64;
                    let vx = gx.sample_bilinear(sx, sy, 0) as f64;
                    let vy = gy.sample_bilinear(sx, sy, 0) as f64;
                    patch0[idx] = i0;
                    patch_gx[idx] = vx;
                    patch_gy[idx] = vy;
                    a11 += vx * vx;
                    a12 += vx * vy;
                    a22 += vy * vy;
                    idx += 1;
                }
            }
            let det = a11 * a22 - a12 * a12;
            let trace = a11 + a22;
            let lambda_min =
                (trace - ((a11 - a22).powi(2) + 4.0 * a12 * a12).sqrt()) * 0.5 / win_px;
            if level == 0 && lambda_min < params.min_eigen as f64 {
                vectors.push(FlowVector {
                    pos: (px, py),
                    disp: (0.0, 0.0),
                    reliable: false,
                });
                continue 'point;
            }
            if det.abs() < 1e-12 {
                reliable = false;
                break;
            }

            for _ in 0..params.max_iters {
                let mut b1 = 0.0f64;
                let mut b2 = 0.0f64;
                let mut idx = 0;
                for wy in -half..=half {
                    for wx in -half..=half {
                        let qx = xc + dx + wx as f64;
                        let qy = yc + dy + wy as f64;
                        let it = img1.sample_bilinear(qx, qy, 0) as f64 - patch0[idx];
                        b1 -= patch_gx[idx] * it;
                        b2 -= patch_gy[idx] * it;
                        idx += 1;
                    }
                }
                let ux = (a22 * b1 - a12 * b2) / det;
                let uy = (a11 * b2 - a12 * b1) / det;
                dx += ux;
                dy += uy;
                if (ux * ux + uy * uy).sqrt() < params.epsilon as f64 {
                    break;
                }
            }
        }

        vectors.push(FlowVector {
            pos: (px, py),
            disp: if reliable {
                (dx as f32, dy as f32)
            } else {
                (0.0, 0.0)
            },
            reliable,
        });
    }

    Ok(FlowField { vectors })
}

/// Seed a regular grid of flow points at the given pixel stride, respecting
/// the window margin.
pub fn seed_grid(width: usize, height: usize, stride: usize, margin: usize) -> Vec<(f32, f32)> {
    let mut pts = Vec::new();
    let mut y = margin;
    while y < height.saturating_sub(margin) {
        let mut x = margin;
        while x < width.saturating_sub(margin) {
            pts.push((x as f32, y as f32));
            x += stride;
        }
        y += stride;
    }
    pts
}

// ── Mobility ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mobility {
    Moving,
    Static,
    Unknown,
}

/// Per-detection mobility classification relative to the road background.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MobilityTag {
    pub tag: Mobility,
    /// |median(bbox flow) - background flow|, px/frame.
    pub rel_flow_px: f32,
}

#[derive(Debug, Clone, Copy)]
pub struct MobilityThresholds {
    /// Below this relative flow the detection is tagged static.
    pub static_px: f32,
    /// Above this relative flow the detection is tagged moving.
    pub moving_px: f32,
    /// Minimum reliable vectors inside the bbox.
    pub min_vectors: usize,
}

impl Default for MobilityThresholds {
    fn default() -> Self {
        Self {
            static_px: 0.5,
            moving_px: 1.5,
            min_vectors: 10,
        }
    }
}

fn median_f32(values: &mut [f32]) -> f32 {
    values.sort_by(f32::total_cmp);
    let n = values.len();
    if n % 2 == 0 {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    } else {
        values[n / 2]
    }
}

/// Median flow over the reliable vectors inside an axis-aligned pixel box
/// `(x, y, w, h)`. None when no reliable vector falls inside.
pub fn median_flow_in_box(flow: &FlowField, bbox: (f32, f32, f32, f32)) -> Option<((f32, f32), usize)> {
    let (bx, by, bw, bh) = bbox;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for v in flow.vectors.iter().filter(|v| v.reliable) {
        if v.pos.0 >= bx && v.pos.0 < bx + bw && v.pos.1 >= by && v.pos.1 < by + bh {
            xs.push(v.disp.0);
            ys.push(v.disp.1);
        }
    }
    if xs.is_empty() {
        return None;
    }
    let n = xs.len();
    Some(((median_f32(&mut xs), median_f32(&mut ys)), n))
}

/// Classify a detection's mobility from its bbox flow versus the background.
pub fn mobility(
    bbox: (f32, f32, f32, f32),
    flow: &FlowField,
    background_flow: (f32, f32),
    thresholds: &MobilityThresholds,
) -> MobilityTag {
    let Some((med, count)) = median_flow_in_box(flow, bbox) else {
        return MobilityTag {
            tag: Mobility::Unknown,
            rel_flow_px: 0.0,
        };
    };
    let rel = ((med.0 - background_flow.0).powi(2) + (med.1 - background_flow.1).powi(2)).sqrt();
    if count < thresholds.min_vectors {
        return MobilityTag {
            tag: Mobility::Unknown,
            rel_flow_px: rel,
        };
    }
    let tag = if rel > thresholds.moving_px {
        Mobility::Moving
    } else if rel < thresholds.static_px {
        Mobility::Static
    } else {
        Mobility::Unknown
    };
    MobilityTag {
        tag,
        rel_flow_px: rel,
    }
}

// ── GPS ───────────────────────────────────────────────────────────────────────

/// GPS samples are matched to frames by nearest timestamp within this window.
pub const GPS_MATCH_WINDOW_S: f64 = 0.5;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GpsSample {
    pub timestamp_s: f64,
    pub lat_deg: f64,
    pub lon_deg: f64,
    /// NMEA-style quality indicator; 0 means no fix.
    pub fix_quality: u32,
}

/// GPS log loaded from `timestamp_s,lat_deg,lon_deg,fix_quality` CSV.
#[derive(Debug, Clone, Default)]
pub struct GpsLog {
    samples: Vec<GpsSample>,
}

impl GpsLog {
    pub fn from_csv(path: &Path) -> Result<Self, MotionError> {
        let err = |msg: String| MotionError::GpsLog {
            path: path.display().to_string(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut samples = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if lineno == 0 && line.starts_with("timestamp") {
                continue; // header row
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(err(format!(
                    "line {}: expected 4 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let parse = |s: &str, what: &str| {
                s.parse::<f64>()
                    .map_err(|_| err(format!("line {}: bad {what} {s:?}", lineno + 1)))
            };
            samples.push(GpsSample {
                timestamp_s: parse(fields[0], "timestamp")?,
                lat_deg: parse(fields[1], "latitude")?,
                lon_deg: parse(fields[2], "longitude")?,
                fix_quality: fields[3].parse().map_err(|_| {
                    err(format!("line {}: bad fix quality {:?}", lineno + 1, fields[3]))
                })?,
            });
        }
        samples.sort_by(|a, b| a.timestamp_s.total_cmp(&b.timestamp_s));
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Nearest sample with a fix within [`GPS_MATCH_WINDOW_S`] of `t`.
    pub fn nearest(&self, t: f64) -> Option<&GpsSample> {
        self.samples
            .iter()
            .filter(|s| s.fix_quality >= 1)
            .min_by(|a, b| {
                (a.timestamp_s - t)
                    .abs()
                    .total_cmp(&(b.timestamp_s - t).abs())
            })
            .filter(|s| (s.timestamp_s - t).abs() <= GPS_MATCH_WINDOW_S)
    }
}

/// Exponential moving average over GPS fixes:
/// `state <- beta * state + (1 - beta) * fix`.
#[derive(Debug, Clone)]
pub struct GpsSmoother {
    beta: f64,
    state: Option<(f64, f64)>,
}

impl GpsSmoother {
    pub fn new(beta: f64) -> Self {
        assert!((0.0..1.0).contains(&beta));
        Self { beta, state: None }
    }

    pub fn step(&mut self, lat_deg: f64, lon_deg: f64) -> (f64, f64) {
        let next = match self.state {
            None => (lat_deg, lon_deg),
            Some((lat, lon)) => (
                self.beta * lat + (1.0 - self.beta) * lat_deg,
                self.beta * lon + (1.0 - self.beta) * lon_deg,
            ),
        };
        self.state = Some(next);
        next
    }
}

// ── Per-frame record ──────────────────────────────────────────────────────────

/// One fitted curve in the emitted record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRecord {
    pub y0: f64,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub support: usize,
    pub domain: [f64; 2],
}

/// Lane-relative localization summary.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LaneSummary {
    pub ego_index: Option<usize>,
    pub lateral_offset_m: f64,
    pub partial: bool,
    pub lane_count: usize,
    pub curves: Vec<CurveRecord>,
    pub departure_lambda: Option<f64>,
    pub departure_angle_rad: Option<f64>,
}

/// Road-boundary summary; polylines decimated for the record.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundarySummary {
    /// (x, y) ground samples of the left edge, meters.
    pub left: Vec<[f64; 2]>,
    /// (x, y) ground samples of the right edge, meters.
    pub right: Vec<[f64; 2]>,
    pub mean_width_m: f64,
    pub vanishing_point_px: Option<[f64; 2]>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectionRecord {
    /// (x, y, w, h) in input-image pixels.
    pub bbox_px: [f32; 4],
    pub score: f32,
    pub ground_xy: Option<[f64; 2]>,
    pub lane_index: Option<usize>,
    pub relative_position: Option<String>,
    pub mobility: Mobility,
    pub rel_flow_px: Option<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpsRecord {
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub fix_quality: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FusedRecord {
    /// EMA-smoothed global position.
    pub lat_deg: f64,
    pub lon_deg: f64,
    pub lane_index: Option<usize>,
    pub lateral_offset_m: f64,
}

/// Fused per-frame output: lane-relative local state plus global position.
/// Serialized as one JSON object per line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FramePosition {
    pub frame_id: u64,
    pub timestamp_s: f64,
    pub lanes: Option<LaneSummary>,
    pub boundary: Option<BoundarySummary>,
    pub detections: Vec<DetectionRecord>,
    pub gps: Option<GpsRecord>,
    pub fused: Option<FusedRecord>,
    pub diagnostics: Vec<String>,
}

/// Combine lane-relative state and a GPS fix into the frame record. A fused
/// global record appears only when both are present; with no GPS the local
/// state is still emitted, and with neither a diagnostics flag is added.
#[allow(clippy::too_many_arguments)]
pub fn fuse(
    frame_id: u64,
    timestamp_s: f64,
    lanes: Option<LaneSummary>,
    boundary: Option<BoundarySummary>,
    detections: Vec<DetectionRecord>,
    gps_sample: Option<&GpsSample>,
    smoother: &mut GpsSmoother,
    mut diagnostics: Vec<String>,
) -> FramePosition {
    let gps = gps_sample.map(|s| GpsRecord {
        lat_deg: s.lat_deg,
        lon_deg: s.lon_deg,
        fix_quality: s.fix_quality,
    });
    let smoothed = gps_sample.map(|s| smoother.step(s.lat_deg, s.lon_deg));
    let fused = match (&lanes, smoothed) {
        (Some(l), Some((lat, lon))) => Some(FusedRecord {
            lat_deg: lat,
            lon_deg: lon,
            lane_index: l.ego_index,
            lateral_offset_m: l.lateral_offset_m,
        }),
        _ => None,
    };
    if lanes.is_none() && gps.is_none() {
        diagnostics.push("no lane localization and no gps fix".to_string());
    }
    FramePosition {
        frame_id,
        timestamp_s,
        lanes,
        boundary,
        detections,
        gps,
        fused,
        diagnostics,
    }
}
