//! Scene description, deterministic renderer and toy detector generation.

use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::SceneError;
use crate::detect::{hog, Deformation, DetectorModel, PartFilter, BLOCK_DIM, DEFAULT_CELL};
use crate::imgcore::{resize_bilinear, rgb_to_lab, ImageF};
use crate::ipm::CameraRig;
use crate::roadseg::{save_seed_stats, ClassStats};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DashPattern {
    pub dash_m: f64,
    pub gap_m: f64,
}

/// One lane line as a world-frame cubic `Y = y0 + aX + bX^2 + cX^3`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LaneLineSpec {
    pub y0: f64,
    #[serde(default)]
    pub a: f64,
    #[serde(default)]
    pub b: f64,
    #[serde(default)]
    pub c: f64,
    /// None renders a solid line.
    #[serde(default)]
    pub dash: Option<DashPattern>,
}

impl LaneLineSpec {
    fn eval(&self, x: f64) -> f64 {
        self.y0 + self.a * x + self.b * x * x + self.c * x * x * x
    }
}

/// Multiplicative half-plane shadow: pixels with `normal . (p - point) > 0`
/// are attenuated.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShadowSpec {
    pub point: [f64; 2],
    pub normal: [f64; 2],
    /// Brightness factor inside the shadow, typically 0.3 to 0.7.
    pub attenuation: f32,
}

/// A vehicle box. `(x, y)` is the ground point of the near-face bottom
/// center; the box extends `length_m` away from the camera.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    pub x: f64,
    pub y: f64,
    #[serde(default = "default_vehicle_width")]
    pub width_m: f64,
    #[serde(default = "default_vehicle_length")]
    pub length_m: f64,
    #[serde(default = "default_vehicle_height")]
    pub height_m: f64,
    /// Body gray level.
    #[serde(default = "default_vehicle_intensity")]
    pub intensity: f32,
}

fn default_vehicle_width() -> f64 {
    1.8
}
fn default_vehicle_length() -> f64 {
    4.2
}
fn default_vehicle_height() -> f64 {
    1.5
}
fn default_vehicle_intensity() -> f32 {
    0.55
}

/// Full scene description; serialized as JSON (unknown keys rejected).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub rig: CameraRig,
    /// World position of the camera ground foot point.
    #[serde(default)]
    pub camera_xy: [f64; 2],
    /// Laterally ordered lane lines (2 to 8).
    pub lane_lines: Vec<LaneLineSpec>,
    #[serde(default = "default_mark_width")]
    pub lane_mark_width_m: f64,
    /// Road extends this far beyond the outer lane lines.
    #[serde(default = "default_shoulder")]
    pub shoulder_m: f64,
    #[serde(default = "default_road_gray")]
    pub road_gray: f32,
    #[serde(default = "default_mark_gray")]
    pub mark_gray: f32,
    #[serde(default = "default_scene_rgb")]
    pub scene_rgb: [f32; 3],
    #[serde(default = "default_sky_rgb")]
    pub sky_rgb: [f32; 3],
    #[serde(default)]
    pub shadows: Vec<ShadowSpec>,
    #[serde(default)]
    pub vehicles: Vec<VehicleSpec>,
    /// Road texture amplitude (value-noise in world coordinates).
    #[serde(default = "default_texture_amp")]
    pub texture_amp: f32,
    #[serde(default = "default_noise_sigma")]
    pub noise_sigma: f32,
    /// Camera forward travel per corpus frame, meters.
    #[serde(default = "default_frame_advance")]
    pub frame_advance_m: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_mark_width() -> f64 {
    0.2
}
fn default_shoulder() -> f64 {
    0.5
}
fn default_road_gray() -> f32 {
    0.35
}
fn default_mark_gray() -> f32 {
    0.85
}
fn default_scene_rgb() -> [f32; 3] {
    [0.25, 0.45, 0.20]
}
fn default_sky_rgb() -> [f32; 3] {
    [0.65, 0.75, 0.85]
}
fn default_texture_amp() -> f32 {
    0.04
}
fn default_noise_sigma() -> f32 {
    0.015
}
fn default_frame_advance() -> f64 {
    0.8
}

impl SceneSpec {
    /// Straight multi-lane default scene: `n_lines` lines at 3.7 m spacing
    /// centered on the camera, outer lines solid, inner dashed.
    pub fn straight(rig: CameraRig, n_lines: usize) -> Self {
        assert!((2..=8).contains(&n_lines));
        let span = (n_lines - 1) as f64 * 3.7;
        let lane_lines = (0..n_lines)
            .map(|i| LaneLineSpec {
                y0: -span / 2.0 + i as f64 * 3.7,
                a: 0.0,
                b: 0.0,
                c: 0.0,
                dash: if i == 0 || i == n_lines - 1 {
                    None
                } else {
                    Some(DashPattern {
                        dash_m: 2.0,
                        gap_m: 4.0,
                    })
                },
            })
            .collect();
        Self {
            rig,
            camera_xy: [0.0, 0.0],
            lane_lines,
            lane_mark_width_m: default_mark_width(),
            shoulder_m: default_shoulder(),
            road_gray: default_road_gray(),
            mark_gray: default_mark_gray(),
            scene_rgb: default_scene_rgb(),
            sky_rgb: default_sky_rgb(),
            shadows: Vec::new(),
            vehicles: Vec::new(),
            texture_amp: default_texture_amp(),
            noise_sigma: default_noise_sigma(),
            frame_advance_m: default_frame_advance(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if !(2..=8).contains(&self.lane_lines.len()) {
            return Err(SceneError::InvalidSpec(format!(
                "need 2..=8 lane lines, got {}",
                self.lane_lines.len()
            )));
        }
        for w in self.lane_lines.windows(2) {
            if w[1].y0 <= w[0].y0 {
                return Err(SceneError::InvalidSpec(
                    "lane lines must be laterally ordered by y0".into(),
                ));
            }
        }
        if !(self.lane_mark_width_m > 0.0) {
            return Err(SceneError::InvalidSpec("lane_mark_width_m must be positive".into()));
        }
        for s in &self.shadows {
            if !(0.0..=1.0).contains(&s.attenuation) {
                return Err(SceneError::InvalidSpec(format!(
                    "shadow attenuation {} outside [0,1]",
                    s.attenuation
                )));
            }
        }
        for v in &self.vehicles {
            let left = self.lane_lines.last().unwrap().eval(v.x) + self.shoulder_m;
            let right = self.lane_lines.first().unwrap().eval(v.x) - self.shoulder_m;
            if v.y < right || v.y > left {
                return Err(SceneError::InvalidSpec(format!(
                    "vehicle at ({}, {}) off the road",
                    v.x, v.y
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<Self, SceneError> {
        let text = std::fs::read_to_string(path).map_err(|e| SceneError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let spec: SceneSpec = serde_json::from_str(&text).map_err(|e| SceneError::Io {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

// ── Forward pinhole projector ─────────────────────────────────────────────────

/// Rotation-matrix pinhole camera. Independent of the `ipm` module's
/// trigonometric inverse: rays and projections go through an explicit camera
/// basis and perspective divide.
#[derive(Debug, Clone, Copy)]
pub struct Projector {
    rig: CameraRig,
    forward: [f64; 3],
    right: [f64; 3],
    down: [f64; 3],
    tan_delta: f64,
    tan_omega: f64,
}

#[inline]
fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

impl Projector {
    pub fn new(rig: &CameraRig) -> Self {
        let (st, ct) = rig.theta.sin_cos();
        let (sg, cg) = rig.gamma.sin_cos();
        let rz = |v: [f64; 3]| [v[0] * cg - v[1] * sg, v[0] * sg + v[1] * cg, v[2]];
        let (delta, omega) = crate::ipm::derive_half_angles(rig);
        Self {
            rig: *rig,
            forward: rz([ct, 0.0, -st]),
            right: rz([0.0, -1.0, 0.0]),
            down: rz([-st, 0.0, -ct]),
            tan_delta: delta.tan(),
            tan_omega: omega.tan(),
        }
    }

    /// Project a camera-relative 3D point (x forward, y left, z up, origin at
    /// the camera foot) to continuous (row, col). None behind the camera.
    pub fn project(&self, x: f64, y: f64, z: f64) -> Option<(f64, f64)> {
        let d = [x, y, z - self.rig.h];
        let dz = dot(d, self.forward);
        if dz <= 1e-12 {
            return None;
        }
        let x_img = dot(d, self.right) / dz;
        let y_img = dot(d, self.down) / dz;
        let row = (1.0 + y_img / self.tan_delta) * (self.rig.rows - 1) as f64 / 2.0;
        let col = (1.0 + x_img / self.tan_omega) * (self.rig.cols - 1) as f64 / 2.0;
        Some((row, col))
    }

    /// Cast the ray of pixel (row, col) onto the ground plane; camera-relative
    /// ground point, or None at/above the horizon.
    pub fn ray_to_ground(&self, row: f64, col: f64) -> Option<(f64, f64)> {
        let u = 2.0 * row / (self.rig.rows - 1) as f64 - 1.0; // down positive
        let v = 2.0 * col / (self.rig.cols - 1) as f64 - 1.0; // right positive
        let mut dir = [0.0f64; 3];
        for i in 0..3 {
            dir[i] = self.forward[i] + v * self.tan_omega * self.right[i]
                + u * self.tan_delta * self.down[i];
        }
        if dir[2] >= -1e-12 {
            return None; // parallel to or away from the ground
        }
        let t = self.rig.h / -dir[2];
        let x = t * dir[0];
        let y = t * dir[1];
        if x <= 0.0 {
            return None;
        }
        Some((x, y))
    }
}

// ── Ground truth ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VehicleTruth {
    /// (x, y, w, h) input pixels, continuous (no rounding).
    pub bbox_px: [f32; 4],
    /// Ground point of the bbox bottom-center, camera frame.
    pub ground_xy: [f64; 2],
    pub lane_index: Option<usize>,
}

/// Exact per-frame truth in the camera's ground frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundTruth {
    /// (y0, a, b, c) per lane line, camera frame, laterally ordered.
    pub lane_lines: Vec<[f64; 4]>,
    /// Index of the lane interval containing y = 0 at the ego evaluation
    /// abscissa, when inside the line set.
    pub ego_interval: Option<usize>,
    /// Offset from the ego-lane centerline, meters.
    pub ego_lateral_offset_m: f64,
    /// Left road edge (outer line + shoulder), camera frame.
    pub road_left: [f64; 4],
    /// Right road edge.
    pub road_right: [f64; 4],
    pub vehicles: Vec<VehicleTruth>,
}

impl GroundTruth {
    pub fn eval_line(line: &[f64; 4], x: f64) -> f64 {
        line[0] + line[1] * x + line[2] * x * x + line[3] * x * x * x
    }
}

/// Shift a world-frame cubic into the camera frame at `(cx, cy)`:
/// `Y_cam(x) = Y_world(x + cx) - cy`.
fn to_camera_frame(line: &LaneLineSpec, cx: f64, cy: f64) -> [f64; 4] {
    let (y0, a, b, c) = (line.y0, line.a, line.b, line.c);
    [
        y0 + a * cx + b * cx * cx + c * cx * cx * cx - cy,
        a + 2.0 * b * cx + 3.0 * c * cx * cx,
        b + 3.0 * c * cx,
        c,
    ]
}

// ── Rendering ─────────────────────────────────────────────────────────────────

// Integer lattice hash for world-anchored value noise.
fn hash2(ix: i64, iy: i64, seed: u64) -> f64 {
    let mut h = (ix as u64).wrapping_mul(0x9E3779B97F4A7C15)
        ^ (iy as u64).wrapping_mul(0xC2B2AE3D27D4EB4F)
        ^ seed.wrapping_mul(0x165667B19E3779F9);
    h ^= h >> 30;
    h = h.wrapping_mul(0xBF58476D1CE4E5B9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94D049BB133111EB);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn value_noise(x: f64, y: f64, cell: f64, seed: u64) -> f64 {
    let (gx, gy) = (x / cell, y / cell);
    let (ix, iy) = (gx.floor() as i64, gy.floor() as i64);
    let (fx, fy) = (gx - ix as f64, gy - iy as f64);
    let v00 = hash2(ix, iy, seed);
    let v10 = hash2(ix + 1, iy, seed);
    let v01 = hash2(ix, iy + 1, seed);
    let v11 = hash2(ix + 1, iy + 1, seed);
    let sx = fx * fx * (3.0 - 2.0 * fx);
    let sy = fy * fy * (3.0 - 2.0 * fy);
    (v00 * (1.0 - sx) + v10 * sx) * (1.0 - sy) + (v01 * (1.0 - sx) + v11 * sx) * sy
}

/// Two-octave world texture in [-1, 1].
fn ground_texture(wx: f64, wy: f64, seed: u64) -> f64 {
    let t = 0.7 * value_noise(wx, wy, 0.45, seed) + 0.3 * value_noise(wx, wy, 0.12, seed ^ 0xA5A5);
    2.0 * t - 1.0
}

/// Vehicle appearance painted into a pixel rectangle: body, windshield band,
/// dark wheel wells. Shared between the scene renderer and the toy model so
/// the detector sees the same pattern it was built from.
fn paint_vehicle_rect(
    img: &mut ImageF,
    x0: i64,
    y0: i64,
    w: i64,
    h: i64,
    intensity: f32,
) {
    for py in y0.max(0)..(y0 + h).min(img.height() as i64) {
        for px in x0.max(0)..(x0 + w).min(img.width() as i64) {
            let fx = (px - x0) as f32 / w as f32;
            let fy = (py - y0) as f32 / h as f32;
            let mut v = 0.12; // outline / gap
            if fx > 0.06 && fx < 0.94 && fy > 0.12 {
                v = intensity;
            }
            if fx > 0.2 && fx < 0.8 && fy > 0.18 && fy < 0.45 {
                v = 0.55 * intensity; // windshield band
            }
            if fy > 0.82 && ((fx - 0.25).abs() < 0.1 || (fx - 0.75).abs() < 0.1) {
                v = 0.05; // wheels
            }
            for c in 0..img.channels().min(3) {
                img.set(px as usize, py as usize, c, v);
            }
        }
    }
}

/// Render the scene to a color frame plus its exact ground truth.
/// Deterministic per spec (noise/texture keyed off `spec.seed`).
pub fn render(spec: &SceneSpec) -> Result<(ImageF, GroundTruth), SceneError> {
    spec.validate()?;
    let rig = &spec.rig;
    let proj = Projector::new(rig);
    let (cx, cy) = (spec.camera_xy[0], spec.camera_xy[1]);
    let mut img = ImageF::new(rig.cols, rig.rows, 3);
    let width = rig.cols;

    let left_line = *spec.lane_lines.last().unwrap();
    let right_line = *spec.lane_lines.first().unwrap();

    let rows_done: Vec<Vec<f32>> = (0..rig.rows)
        .into_par_iter()
        .map(|row| {
            let mut out = vec![0.0f32; width * 3];
            let mut rng = ChaCha8Rng::seed_from_u64(
                spec.seed ^ (row as u64).wrapping_mul(0x9E3779B97F4A7C15),
            );
            for col in 0..width {
                let mut rgb = match proj.ray_to_ground(row as f64, col as f64) {
                    None => spec.sky_rgb,
                    Some((gx, _)) if gx > 2000.0 => spec.sky_rgb,
                    Some((gx, gy)) => {
                        let (wx, wy) = (gx + cx, gy + cy);
                        let left_edge = left_line.eval(wx) + spec.shoulder_m;
                        let right_edge = right_line.eval(wx) - spec.shoulder_m;
                        let tex =
                            spec.texture_amp * ground_texture(wx, wy, spec.seed) as f32;
                        let mut rgb = if wy <= left_edge && wy >= right_edge {
                            // On the road: mark or asphalt.
                            let mut on_mark = false;
                            for line in &spec.lane_lines {
                                if (wy - line.eval(wx)).abs() <= spec.lane_mark_width_m / 2.0 {
                                    let lit = match line.dash {
                                        None => true,
                                        Some(d) => {
                                            wx.rem_euclid(d.dash_m + d.gap_m) < d.dash_m
                                        }
                                    };
                                    if lit {
                                        on_mark = true;
                                        break;
                                    }
                                }
                            }
                            if on_mark {
                                let v = spec.mark_gray + 0.5 * tex;
                                [v, v, v]
                            } else {
                                let v = spec.road_gray + tex;
                                [v, v, v]
                            }
                        } else {
                            [
                                spec.scene_rgb[0] + tex,
                                spec.scene_rgb[1] + 1.5 * tex,
                                spec.scene_rgb[2] + tex,
                            ]
                        };
                        for s in &spec.shadows {
                            let d = s.normal[0] * (wx - s.point[0])
                                + s.normal[1] * (wy - s.point[1]);
                            if d > 0.0 {
                                for ch in &mut rgb {
                                    *ch *= s.attenuation;
                                }
                            }
                        }
                        rgb
                    }
                };
                if spec.noise_sigma > 0.0 {
                    for ch in &mut rgb {
                        // Box-Muller from the per-row stream.
                        let u1: f64 = rng.random_range(1e-12..1.0);
                        let u2: f64 = rng.random_range(0.0..1.0);
                        let n = (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f64::consts::PI * u2).cos();
                        *ch += spec.noise_sigma * n as f32;
                    }
                }
                for (c, v) in rgb.iter().enumerate() {
                    out[col * 3 + c] = v.clamp(0.0, 1.0);
                }
            }
            out
        })
        .collect();
    for (row, data) in rows_done.into_iter().enumerate() {
        let base = row * width * 3;
        img.data_mut()[base..base + width * 3].copy_from_slice(&data);
    }

    // Camera-frame truth lines.
    let cam_lines: Vec<[f64; 4]> = spec
        .lane_lines
        .iter()
        .map(|l| to_camera_frame(l, cx, cy))
        .collect();

    // Vehicles, far to near so near boxes occlude.
    let mut order: Vec<usize> = (0..spec.vehicles.len()).collect();
    order.sort_by(|&i, &j| spec.vehicles[j].x.total_cmp(&spec.vehicles[i].x));
    let mut vehicles = Vec::new();
    for i in order {
        let v = &spec.vehicles[i];
        // Camera-relative near-face bottom center.
        let (vx, vy) = (v.x - cx, v.y - cy);
        if vx <= 1.0 {
            continue;
        }
        let mut min_row = f64::INFINITY;
        let mut max_row = f64::NEG_INFINITY;
        let mut min_col = f64::INFINITY;
        let mut max_col = f64::NEG_INFINITY;
        let mut ok = true;
        for (dx, dy, dz) in [
            (0.0, -v.width_m / 2.0, 0.0),
            (0.0, v.width_m / 2.0, 0.0),
            (v.length_m, -v.width_m / 2.0, 0.0),
            (v.length_m, v.width_m / 2.0, 0.0),
            (0.0, -v.width_m / 2.0, v.height_m),
            (0.0, v.width_m / 2.0, v.height_m),
            (v.length_m, -v.width_m / 2.0, v.height_m),
            (v.length_m, v.width_m / 2.0, v.height_m),
        ] {
            match proj.project(vx + dx, vy + dy, dz) {
                Some((r, c)) => {
                    min_row = min_row.min(r);
                    max_row = max_row.max(r);
                    min_col = min_col.min(c);
                    max_col = max_col.max(c);
                }
                None => ok = false,
            }
        }
        if !ok || max_col < 0.0 || min_col > (rig.cols - 1) as f64 || max_row < 0.0 {
            continue;
        }
        paint_vehicle_rect(
            &mut img,
            min_col.round() as i64,
            min_row.round() as i64,
            (max_col - min_col).round() as i64,
            (max_row - min_row).round() as i64,
            v.intensity,
        );
        // Lane membership of the camera-relative ground point.
        let mut lane_index = None;
        for k in 0..cam_lines.len() - 1 {
            let lo = GroundTruth::eval_line(&cam_lines[k], vx);
            let hi = GroundTruth::eval_line(&cam_lines[k + 1], vx);
            if lo < vy && vy <= hi {
                lane_index = Some(k);
                break;
            }
        }
        vehicles.push(VehicleTruth {
            bbox_px: [
                min_col as f32,
                min_row as f32,
                (max_col - min_col) as f32,
                (max_row - min_row) as f32,
            ],
            ground_xy: [vx, vy],
            lane_index,
        });
    }
    vehicles.sort_by(|a, b| a.bbox_px[0].total_cmp(&b.bbox_px[0]));

    // Ego localization truth at the lane-fit evaluation abscissa.
    let eval_x = crate::lanefit::EGO_EVAL_X;
    let ys: Vec<f64> = cam_lines
        .iter()
        .map(|l| GroundTruth::eval_line(l, eval_x))
        .collect();
    let mut ego_interval = None;
    for i in 0..ys.len() - 1 {
        if ys[i] < 0.0 && ys[i + 1] >= 0.0 {
            ego_interval = Some(i);
            break;
        }
    }
    let ego_lateral_offset_m = match ego_interval {
        Some(i) => -(ys[i] + ys[i + 1]) / 2.0,
        None => -ys
            .iter()
            .copied()
            .min_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap(),
    };

    let mut road_left = *cam_lines.last().unwrap();
    road_left[0] += spec.shoulder_m;
    let mut road_right = *cam_lines.first().unwrap();
    road_right[0] -= spec.shoulder_m;

    Ok((
        img,
        GroundTruth {
            lane_lines: cam_lines,
            ego_interval,
            ego_lateral_offset_m,
            road_left,
            road_right,
            vehicles,
        },
    ))
}

// ── Corpus generation ─────────────────────────────────────────────────────────

fn mix_seed(seed: u64, i: u64) -> u64 {
    let mut h = seed ^ i.wrapping_mul(0x9E3779B97F4A7C15);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51AFD7ED558CCD);
    h ^= h >> 33;
    h
}

/// Per-frame variation of a base scene: the camera advances and wanders
/// laterally, a common heading/curvature perturbation is applied to all lines
/// (keeping them parallel), shadows drift.
pub fn vary_for_frame(base: &SceneSpec, frame: u64) -> SceneSpec {
    let mut spec = base.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(base.seed, frame));
    spec.seed = mix_seed(base.seed, frame ^ 0xDEADBEEF);
    spec.camera_xy[0] += frame as f64 * base.frame_advance_m;
    spec.camera_xy[1] += rng.random_range(-0.5..0.5);
    let da = rng.random_range(-0.01..0.01);
    let db = rng.random_range(-4e-4..4e-4);
    for line in &mut spec.lane_lines {
        line.a += da;
        line.b += db;
    }
    for s in &mut spec.shadows {
        s.point[0] += frame as f64 * base.frame_advance_m + rng.random_range(-2.0..2.0);
        s.point[1] += rng.random_range(-1.0..1.0);
    }
    spec
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> SceneError + '_ {
    move |e| SceneError::Io {
        path: path.display().to_string(),
        msg: e.to_string(),
    }
}

/// Generate an `n_frames` corpus under `out_dir`:
/// `frames/NNNN.ppm`, `truth/NNNN.json`, plus `camera.conf`, `gmm_seed.txt`
/// (class statistics measured from the first frame), `toy_model.lsdm` and the
/// base `scene.json`.
pub fn gen_corpus(spec: &SceneSpec, n_frames: usize, out_dir: &Path) -> Result<(), SceneError> {
    spec.validate()?;
    let frames_dir = out_dir.join("frames");
    let truth_dir = out_dir.join("truth");
    std::fs::create_dir_all(&frames_dir).map_err(io_err(&frames_dir))?;
    std::fs::create_dir_all(&truth_dir).map_err(io_err(&truth_dir))?;

    let results: Result<Vec<()>, SceneError> = (0..n_frames as u64)
        .into_par_iter()
        .map(|i| {
            let frame_spec = vary_for_frame(spec, i);
            let (img, truth) = render(&frame_spec)?;
            let frame_path = frames_dir.join(format!("{i:04}.ppm"));
            crate::imgcore::write_ppm(&img, &frame_path).map_err(|e| SceneError::Io {
                path: frame_path.display().to_string(),
                msg: e.to_string(),
            })?;
            let truth_path = truth_dir.join(format!("{i:04}.json"));
            let json = serde_json::to_string_pretty(&truth).expect("truth serializes");
            std::fs::write(&truth_path, json).map_err(io_err(&truth_path))?;
            Ok(())
        })
        .collect();
    results?;

    // Camera config matching the spec rig.
    let cam_path = out_dir.join("camera.conf");
    let cam = format!(
        "h_m = {}\npitch_rad = {}\nyaw_rad = {}\naperture_rad = {}\nrows = {}\ncols = {}\nipm_range_m = 45\n",
        spec.rig.h, spec.rig.theta, spec.rig.gamma, spec.rig.alpha, spec.rig.rows, spec.rig.cols
    );
    std::fs::write(&cam_path, cam).map_err(io_err(&cam_path))?;

    // GMM seed statistics measured from the first frame's true class masks.
    let stats = measure_seed_stats(&vary_for_frame(spec, 0))?;
    let seed_path = out_dir.join("gmm_seed.txt");
    save_seed_stats(&seed_path, &stats).map_err(io_err(&seed_path))?;

    let model = toy_car_model();
    let model_path = out_dir.join("toy_model.lsdm");
    model.save(&model_path).map_err(|e| SceneError::Io {
        path: model_path.display().to_string(),
        msg: e.to_string(),
    })?;

    let spec_path = out_dir.join("scene.json");
    std::fs::write(
        &spec_path,
        serde_json::to_string_pretty(spec).expect("spec serializes"),
    )
    .map_err(io_err(&spec_path))?;
    Ok(())
}

/// Measure per-class Lab statistics from a rendered frame using the scene
/// geometry as the labeling oracle. Obstacle statistics come from vehicle
/// pixels when present, otherwise from lane-mark pixels.
pub fn measure_seed_stats(spec: &SceneSpec) -> Result<[ClassStats; 3], SceneError> {
    let (img, truth) = render(spec)?;
    let lab = rgb_to_lab(&img).expect("render produces 3 channels");
    let proj = Projector::new(&spec.rig);
    let (cx, cy) = (spec.camera_xy[0], spec.camera_xy[1]);
    let left_line = *spec.lane_lines.last().unwrap();
    let right_line = *spec.lane_lines.first().unwrap();

    let mut acc: [Vec<[f64; 3]>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut marks: Vec<[f64; 3]> = Vec::new();
    for row in (0..spec.rig.rows).step_by(2) {
        for col in (0..spec.rig.cols).step_by(2) {
            let px = [
                lab.get(col, row, 0) as f64,
                lab.get(col, row, 1) as f64,
                lab.get(col, row, 2) as f64,
            ];
            // Inside a vehicle bbox counts as obstacle.
            let in_vehicle = truth.vehicles.iter().any(|v| {
                let b = v.bbox_px;
                (col as f32) >= b[0]
                    && (col as f32) < b[0] + b[2]
                    && (row as f32) >= b[1]
                    && (row as f32) < b[1] + b[3]
            });
            if in_vehicle {
                acc[2].push(px);
                continue;
            }
            let Some((gx, gy)) = proj.ray_to_ground(row as f64, col as f64) else {
                continue;
            };
            if gx > 60.0 {
                continue;
            }
            let (wx, wy) = (gx + cx, gy + cy);
            let on_road = wy <= left_line.eval(wx) + spec.shoulder_m
                && wy >= right_line.eval(wx) - spec.shoulder_m;
            if !on_road {
                acc[1].push(px);
                continue;
            }
            let on_mark = spec.lane_lines.iter().any(|l| {
                (wy - l.eval(wx)).abs() <= spec.lane_mark_width_m / 2.0
                    && match l.dash {
                        None => true,
                        Some(d) => wx.rem_euclid(d.dash_m + d.gap_m) < d.dash_m,
                    }
            });
            if on_mark {
                marks.push(px);
            } else {
                acc[0].push(px);
            }
        }
    }
    if acc[2].len() < 50 {
        acc[2] = marks; // vehicle-free scene: bright marks stand in
    }
    let total: usize = acc.iter().map(Vec::len).sum();
    let mut out = [ClassStats {
        mean: [0.0; 3],
        var: [0.0; 3],
        prior: 0.0,
    }; 3];
    for (k, samples) in acc.iter().enumerate() {
        if samples.len() < 10 {
            return Err(SceneError::InvalidSpec(format!(
                "class {k} has only {} labeled samples",
                samples.len()
            )));
        }
        let n = samples.len() as f64;
        let mut mean = [0.0f64; 3];
        for s in samples {
            for ch in 0..3 {
                mean[ch] += s[ch];
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = [0.0f64; 3];
        for s in samples {
            for ch in 0..3 {
                var[ch] += (s[ch] - mean[ch]).powi(2);
            }
        }
        for v in &mut var {
            *v = (*v / n).max(1e-6);
        }
        out[k] = ClassStats {
            mean,
            var,
            prior: n / total as f64,
        };
    }
    Ok(out)
}

// ── Toy detector ──────────────────────────────────────────────────────────────

/// Build a small detector from the renderer's vehicle pattern: root filter
/// from the patch HOG, four quadrant parts at twice the resolution,
/// threshold at 60% of the ideal self-correlation score. Stands in for a
/// trained model in tests and synthetic benchmarks.
pub fn toy_car_model() -> DetectorModel {
    let side = 64usize;
    let mut patch = ImageF::constant(side + 16, side + 16, 1, 0.0);
    paint_vehicle_rect(&mut patch, 8, 8, side as i64, side as i64, 0.55);

    let feat = hog(&patch, DEFAULT_CELL).unwrap();
    let (bw, bh) = (feat.blocks_x(), feat.blocks_y());
    let mut root = Vec::with_capacity(bw * bh * BLOCK_DIM);
    for by in 0..bh {
        for bx in 0..bw {
            root.extend_from_slice(feat.block(bx, by));
        }
    }

    let double = resize_bilinear(&patch, 2 * (side + 16), 2 * (side + 16));
    let pfeat = hog(&double, DEFAULT_CELL).unwrap();
    let (pw_all, ph_all) = (pfeat.blocks_x(), pfeat.blocks_y());
    let (hw, hh) = (pw_all / 2, ph_all / 2);
    let mut parts = Vec::new();
    let mut part_self = 0.0f32;
    for (qx, qy) in [(0usize, 0usize), (1, 0), (0, 1), (1, 1)] {
        let (x0, y0) = (qx * hw, qy * hh);
        let mut weights = Vec::with_capacity(hw * hh * BLOCK_DIM);
        for by in y0..y0 + hh {
            for bx in x0..x0 + hw {
                weights.extend_from_slice(pfeat.block(bx, by));
            }
        }
        part_self += weights.iter().map(|w| w * w).sum::<f32>();
        parts.push(PartFilter {
            anchor: (x0 as i32, y0 as i32),
            w: hw,
            h: hh,
            weights,
            deformation: Deformation {
                d1: 0.0,
                d2: 0.05,
                d3: 0.0,
                d4: 0.05,
            },
        });
    }
    let root_self: f32 = root.iter().map(|w| w * w).sum();

    DetectorModel {
        root_w: bw,
        root_h: bh,
        root,
        parts,
        bias: 0.0,
        threshold: 0.6 * (root_self + part_self),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ipm::pixel_to_ground;

    fn test_rig() -> CameraRig {
        CameraRig::new(1.55, 0.12, 0.0, 0.6, 440, 680).unwrap()
    }

    #[test]
    fn render_is_deterministic_per_seed() {
        let mut spec = SceneSpec::straight(test_rig(), 4);
        spec.seed = 1234;
        let (a, _) = render(&spec).unwrap();
        let (b, _) = render(&spec).unwrap();
        assert_eq!(a.data(), b.data(), "render not bit-deterministic");
        spec.seed = 1235;
        let (c, _) = render(&spec).unwrap();
        assert_ne!(a.data(), c.data(), "different seeds render identically");
    }

    #[test]
    fn projected_parallel_lines_share_a_vanishing_point() {
        let rig = test_rig();
        let proj = Projector::new(&rig);
        let spec = SceneSpec::straight(rig, 4);
        // Image lines from two projected points per lane line.
        let lines: Vec<((f64, f64), (f64, f64))> = spec
            .lane_lines
            .iter()
            .map(|l| {
                let p1 = proj.project(10.0, l.eval(10.0), 0.0).unwrap();
                let p2 = proj.project(500.0, l.eval(500.0), 0.0).unwrap();
                (p1, p2)
            })
            .collect();
        // Pairwise intersections in (col,row) space.
        let mut pts = Vec::new();
        for i in 0..lines.len() {
            for j in i + 1..lines.len() {
                let (a1, a2) = lines[i];
                let (b1, b2) = lines[j];
                let d1 = (a2.1 - a1.1, a2.0 - a1.0);
                let d2 = (b2.1 - b1.1, b2.0 - b1.0);
                let det = d1.0 * d2.1 - d1.1 * d2.0;
                assert!(det.abs() > 1e-12, "parallel image lines");
                let t = ((b1.1 - a1.1) * d2.1 - (b1.0 - a1.0) * d2.0) / det;
                pts.push((a1.1 + t * d1.0, a1.0 + t * d1.1));
            }
        }
        let (mut min_x, mut max_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut min_y, mut max_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in pts {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
        assert!(
            (max_x - min_x) < 1.0 && (max_y - min_y) < 1.0,
            "VP spread {:.3}x{:.3} px",
            max_x - min_x,
            max_y - min_y
        );
    }

    #[test]
    fn vehicle_bbox_bottom_center_cross_checks_ipm() {
        let rig = test_rig();
        let mut spec = SceneSpec::straight(rig, 4);
        spec.noise_sigma = 0.0;
        spec.vehicles.push(VehicleSpec {
            x: 20.0,
            y: 0.0,
            width_m: 1.8,
            length_m: 4.2,
            height_m: 1.5,
            intensity: 0.55,
        });
        let (_, truth) = render(&spec).unwrap();
        assert_eq!(truth.vehicles.len(), 1);
        let b = truth.vehicles[0].bbox_px;
        let (x, y) = pixel_to_ground(
            &rig,
            (b[1] + b[3]) as f64,
            (b[0] + b[2] / 2.0) as f64,
        )
        .unwrap();
        assert!(
            (x - 20.0).abs() < 0.2 && y.abs() < 0.2,
            "bbox bottom-center maps to ({x:.3},{y:.3})"
        );
        assert_eq!(truth.vehicles[0].lane_index, truth.ego_interval);
    }

    #[test]
    fn camera_frame_truth_accounts_for_camera_position() {
        let rig = test_rig();
        let mut spec = SceneSpec::straight(rig, 2);
        spec.camera_xy = [13.0, 0.4];
        let (_, truth) = render(&spec).unwrap();
        // World line at y0 = -1.85 seen from cy = 0.4 sits at -2.25; the
        // camera is 0.4 m left of the lane centerline.
        assert!((truth.lane_lines[0][0] - (-2.25)).abs() < 1e-9);
        assert!((truth.ego_lateral_offset_m - 0.4).abs() < 1e-9);
    }

    #[test]
    fn ego_truth_follows_lateral_wander() {
        let rig = test_rig();
        let base = SceneSpec::straight(rig, 4);
        for frame in [0u64, 3, 7] {
            let spec = vary_for_frame(&base, frame);
            let (_, truth) = render(&spec).unwrap();
            assert_eq!(truth.ego_interval, Some(1), "frame {frame}");
            assert!(
                truth.ego_lateral_offset_m.abs() <= 0.5 + 1e-9,
                "offset {} out of wander range",
                truth.ego_lateral_offset_m
            );
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let rig = test_rig();
        let mut spec = SceneSpec::straight(rig, 2);
        spec.lane_lines.reverse();
        assert!(matches!(render(&spec), Err(SceneError::InvalidSpec(_))));

        let mut spec = SceneSpec::straight(rig, 2);
        spec.vehicles.push(VehicleSpec {
            x: 20.0,
            y: 9.0,
            width_m: 1.8,
            length_m: 4.0,
            height_m: 1.5,
            intensity: 0.5,
        });
        assert!(matches!(render(&spec), Err(SceneError::InvalidSpec(_))));
    }

    #[test]
    fn scene_spec_json_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("scene.json");
        let spec = SceneSpec::straight(test_rig(), 3);
        std::fs::write(&path, serde_json::to_string_pretty(&spec).unwrap()).unwrap();
        let loaded = SceneSpec::from_json_file(&path).unwrap();
        assert_eq!(loaded.lane_lines.len(), 3);

        let mut json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        json["surprise"] = serde_json::json!(1);
        std::fs::write(&path, serde_json::to_string(&json).unwrap()).unwrap();
        assert!(SceneSpec::from_json_file(&path).is_err());
    }

    #[test]
    fn toy_model_is_loadable_and_convex() {
        let model = toy_car_model();
        assert!(model.validate().is_ok());
        assert!(!model.parts.is_empty());
        assert!(model.threshold > 0.0);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.lsdm");
        model.save(&path).unwrap();
        let loaded = DetectorModel::load(&path).unwrap();
        assert_eq!(loaded.root, model.root);
    }

    #[test]
    fn seed_stats_separate_road_from_scene() {
        let spec = SceneSpec::straight(test_rig(), 4);
        let stats = measure_seed_stats(&spec).unwrap();
        // Road is neutral gray (a,b near 0); surroundings are green (a < 0).
        assert!(stats[0].mean[1].abs() < 5.0, "road a* {}", stats[0].mean[1]);
        assert!(stats[1].mean[1] < -10.0, "scene a* {}", stats[1].mean[1]);
        assert!(stats[2].mean[0] > stats[0].mean[0], "obstacle L below road L");
        let prior_sum: f64 = stats.iter().map(|s| s.prior).sum();
        assert!((prior_sum - 1.0).abs() < 1e-9);
    }
}
