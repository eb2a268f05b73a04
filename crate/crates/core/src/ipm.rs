//! Flat-road inverse perspective mapping.
//!
//! Maps between image pixels and metric ground-plane coordinates using only
//! the camera mounting geometry (height, pitch, yaw, half aperture, sensor
//! dimensions) — no intrinsic calibration.
//!
//! Conventions: pixel rows/cols are 0-based with integer values at pixel
//! centers; ground frame is x forward (meters), y left (meters), origin at
//! the camera's ground foot point. Yaw is handled as a 2D rotation of ground
//! coordinates, which is exactly the effect of yawing the camera about the
//! vertical axis through its center.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imgcore::ImageF;

#[derive(Debug, Error)]
pub enum IpmError {
    #[error("invalid camera rig: {0}")]
    InvalidRig(String),
    #[error("entire image lies above the horizon (pitch too small for the aperture)")]
    NoVisibleGround,
    #[error("row {row:.2} is above the horizon row {horizon}")]
    AboveHorizon { row: f64, horizon: usize },
    #[error("ground point with x = {x:.3} m is not in front of the camera")]
    BehindCamera { x: f64 },
    #[error("camera config {path}: {msg}")]
    Config { path: String, msg: String },
}

/// Camera mounting geometry. All angles in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRig {
    /// Camera height above the ground plane, meters.
    pub h: f64,
    /// Pitch below horizontal.
    pub theta: f64,
    /// Yaw, positive toward +y (left).
    pub gamma: f64,
    /// Half of the diagonal aperture.
    pub alpha: f64,
    /// Image rows.
    pub rows: usize,
    /// Image columns.
    pub cols: usize,
}

impl CameraRig {
    pub fn new(
        h: f64,
        theta: f64,
        gamma: f64,
        alpha: f64,
        rows: usize,
        cols: usize,
    ) -> Result<Self, IpmError> {
        let rig = Self {
            h,
            theta,
            gamma,
            alpha,
            rows,
            cols,
        };
        rig.validate()?;
        Ok(rig)
    }

    fn validate(&self) -> Result<(), IpmError> {
        use std::f64::consts::FRAC_PI_2;
        if !(self.h > 0.0) {
            return Err(IpmError::InvalidRig(format!("height {} <= 0", self.h)));
        }
        if !(self.theta > 0.0 && self.theta < FRAC_PI_2) {
            return Err(IpmError::InvalidRig(format!(
                "pitch {} outside (0, pi/2)",
                self.theta
            )));
        }
        if !(self.alpha > 0.0 && self.alpha < FRAC_PI_2) {
            return Err(IpmError::InvalidRig(format!(
                "aperture {} outside (0, pi/2)",
                self.alpha
            )));
        }
        if self.rows < 2 || self.cols < 2 {
            return Err(IpmError::InvalidRig(format!(
                "sensor {}x{} too small",
                self.rows, self.cols
            )));
        }
        let (delta, _) = derive_half_angles(self);
        if self.theta + delta >= FRAC_PI_2 {
            return Err(IpmError::InvalidRig(
                "pitch + vertical half-angle reaches the vertical; no ground patch".into(),
            ));
        }
        Ok(())
    }

    /// Load from a key=value file. Unknown keys are rejected.
    ///
    /// Keys: `h_m` (default 1.55), `pitch_rad` (required), `yaw_rad`
    /// (default 0), `aperture_rad` (required), `rows` (default 440),
    /// `cols` (default 680), `ipm_range_m` (default 45). Returns the rig and
    /// the IPM validity range in meters.
    pub fn from_config_file(path: &Path) -> Result<(Self, f64), IpmError> {
        let text = std::fs::read_to_string(path).map_err(|e| IpmError::Config {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        let err = |msg: String| IpmError::Config {
            path: path.display().to_string(),
            msg,
        };

        let mut h = 1.55f64;
        let mut pitch: Option<f64> = None;
        let mut yaw = 0.0f64;
        let mut aperture: Option<f64> = None;
        let mut rows = 440usize;
        let mut cols = 680usize;
        let mut range = 45.0f64;
        let mut seen = HashSet::new();

        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(format!("duplicate key {key}")));
            }
            let parse_f = || {
                value
                    .parse::<f64>()
                    .map_err(|_| err(format!("key {key}: bad number {value:?}")))
            };
            match key {
                "h_m" => h = parse_f()?,
                "pitch_rad" => pitch = Some(parse_f()?),
                "yaw_rad" => yaw = parse_f()?,
                "aperture_rad" => aperture = Some(parse_f()?),
                "rows" => {
                    rows = value
                        .parse()
                        .map_err(|_| err(format!("key rows: bad integer {value:?}")))?
                }
                "cols" => {
                    cols = value
                        .parse()
                        .map_err(|_| err(format!("key cols: bad integer {value:?}")))?
                }
                "ipm_range_m" => range = parse_f()?,
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        let pitch = pitch.ok_or_else(|| err("missing required key pitch_rad".into()))?;
        let aperture = aperture.ok_or_else(|| err("missing required key aperture_rad".into()))?;
        if !(range > 0.0) {
            return Err(err(format!("ipm_range_m {range} must be positive")));
        }
        let rig = Self::new(h, pitch, yaw, aperture, rows, cols).map_err(|e| err(e.to_string()))?;
        Ok((rig, range))
    }

    /// Ground distance of the bottom-row, center-column ray (yaw ignored).
    pub fn near_limit(&self) -> f64 {
        let (delta, _) = derive_half_angles(self);
        self.h / (self.theta + delta).tan()
    }
}

/// Split the diagonal half-aperture into per-axis half-angles:
/// `tan(delta) = (m-1)/sqrt((m-1)^2+(n-1)^2) * tan(alpha)` for the vertical
/// axis and the analogous expression with `(n-1)` for the horizontal one.
pub fn derive_half_angles(rig: &CameraRig) -> (f64, f64) {
    let m = (rig.rows - 1) as f64;
    let n = (rig.cols - 1) as f64;
    let diag = (m * m + n * n).sqrt();
    let ta = rig.alpha.tan();
    let delta = (m / diag * ta).atan();
    let omega = (n / diag * ta).atan();
    (delta, omega)
}

#[inline]
fn row_coord(rig: &CameraRig, row: f64) -> f64 {
    1.0 - 2.0 * row / (rig.rows - 1) as f64
}

#[inline]
fn col_coord(rig: &CameraRig, col: f64) -> f64 {
    1.0 - 2.0 * col / (rig.cols - 1) as f64
}

/// First (topmost) row whose view ray intersects the ground plane, found by
/// scanning for the sign change of the mapping denominator. The closed-form
/// inversion ([`horizon_row_closed_form`]) serves only as a cross-check; it
/// degenerates when pitch and vertical half-angle coincide.
pub fn horizon_row(rig: &CameraRig) -> Result<usize, IpmError> {
    let (delta, _) = derive_half_angles(rig);
    let (tt, td) = (rig.theta.tan(), delta.tan());
    for row in 0..rig.rows {
        if tt - row_coord(rig, row as f64) * td > 0.0 {
            return Ok(row);
        }
    }
    Err(IpmError::NoVisibleGround)
}

/// Continuous row at which the mapping denominator vanishes:
/// `(m-1) * (1 - tan(theta)/tan(delta)) / 2`. Negative values mean the
/// horizon lies above the image.
pub fn horizon_row_closed_form(rig: &CameraRig) -> f64 {
    let (delta, _) = derive_half_angles(rig);
    (rig.rows - 1) as f64 * 0.5 * (1.0 - rig.theta.tan() / delta.tan())
}

/// Map a (possibly fractional) pixel to ground-plane meters.
pub fn pixel_to_ground(rig: &CameraRig, row: f64, col: f64) -> Result<(f64, f64), IpmError> {
    let (delta, omega) = derive_half_angles(rig);
    let (tt, td, tw) = (rig.theta.tan(), delta.tan(), omega.tan());
    let u = row_coord(rig, row);
    let v = col_coord(rig, col);
    let denom = tt - u * td;
    if denom <= 0.0 {
        let horizon = horizon_row(rig)?;
        return Err(IpmError::AboveHorizon { row, horizon });
    }
    let x = rig.h * (1.0 + u * td * tt) / denom;
    let y = v * tw * (x * rig.theta.cos() + rig.h * rig.theta.sin());
    let (sg, cg) = rig.gamma.sin_cos();
    Ok((x * cg - y * sg, x * sg + y * cg))
}

/// Map a ground point to continuous pixel coordinates. The result may fall
/// outside the frame; callers clip. Inverse of [`pixel_to_ground`].
pub fn ground_to_pixel(rig: &CameraRig, x: f64, y: f64) -> Result<(f64, f64), IpmError> {
    let (sg, cg) = rig.gamma.sin_cos();
    let x0 = x * cg + y * sg;
    let y0 = -x * sg + y * cg;
    if x0 <= 0.0 {
        return Err(IpmError::BehindCamera { x: x0 });
    }
    let (delta, omega) = derive_half_angles(rig);
    let (tt, td, tw) = (rig.theta.tan(), delta.tan(), omega.tan());
    let u = (x0 * tt - rig.h) / (td * (x0 + rig.h * tt));
    let v = y0 / (tw * (x0 * rig.theta.cos() + rig.h * rig.theta.sin()));
    let row = (1.0 - u) * (rig.rows - 1) as f64 / 2.0;
    let col = (1.0 - v) * (rig.cols - 1) as f64 / 2.0;
    Ok((row, col))
}

/// Bird's-eye resampling of an image onto a metric grid. Cells whose source
/// pixel falls outside the frame carry NaN in every channel.
#[derive(Debug, Clone)]
pub struct GroundGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: f64,
    /// Grid cells; row 0 is the far edge (`x_max`), column 0 the left edge
    /// (`y_max`, since +y points left).
    pub cells: ImageF,
}

impl GroundGrid {
    #[inline]
    pub fn rows(&self) -> usize {
        self.cells.height()
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cells.width()
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
    pub fn row_of_x(&self, x: f64) -> f64 {
        (self.x_max - x) / self.resolution - 0.5
    }

    #[inline]
    pub fn col_of_y(&self, y: f64) -> f64 {
        (self.y_max - y) / self.resolution - 0.5
    }

    #[inline]
    pub fn valid(&self, row: usize, col: usize) -> bool {
        !self.cells.get(col, row, 0).is_nan()
    }

    pub fn valid_count(&self) -> usize {
        let mut n = 0;
        for r in 0..self.rows() {
            for c in 0..self.cols() {
                if self.valid(r, c) {
                    n += 1;
                }
            }
        }
        n
    }
}

/// Warp extent and sampling density for [`warp_to_ground`].
#[derive(Debug, Clone, Copy)]
pub struct WarpParams {
    /// Near edge of the grid, meters. Defaults to the bottom-row distance.
    pub x_min: Option<f64>,
    /// Far edge of the grid, meters (the mapping is used out to 45 m).
    pub x_max: f64,
    /// Lateral half-width of the grid, meters.
    pub y_halfwidth: f64,
    /// Cell size, meters.
    pub resolution: f64,
}

impl Default for WarpParams {
    fn default() -> Self {
        Self {
            x_min: None,
            x_max: 45.0,
            y_halfwidth: 12.0,
            resolution: 0.1,
        }
    }
}

/// Resample `img` onto the ground plane by bilinear lookup at the projected
/// cell centers. Parallel by grid row.
pub fn warp_to_ground(rig: &CameraRig, img: &ImageF, params: &WarpParams) -> GroundGrid {
    assert_eq!(
        (img.height(), img.width()),
        (rig.rows, rig.cols),
        "image dimensions must match the rig"
    );
    let x_min = params.x_min.unwrap_or_else(|| rig.near_limit());
    let x_max = params.x_max;
    assert!(x_max > x_min && params.resolution > 0.0);
    let y_max = params.y_halfwidth;
    let y_min = -params.y_halfwidth;
    let n_rows = (((x_max - x_min) / params.resolution).round() as usize).max(1);
    let n_cols = (((y_max - y_min) / params.resolution).round() as usize).max(1);
    let channels = img.channels();

    let mut cells = ImageF::new(n_cols, n_rows, channels);
    let width = cells.width();
    let grid_geom = GroundGrid {
        x_min,
        x_max,
        y_min,
        y_max,
        resolution: params.resolution,
        cells: ImageF::new(1, 1, 1),
    };

    cells
        .data_mut()
        .par_chunks_mut(width * channels)
        .enumerate()
        .for_each(|(r, row_data)| {
            let x = grid_geom.x_of_row(r);
            for c in 0..width {
                let y = grid_geom.y_of_col(c);
                let px = ground_to_pixel(rig, x, y).ok().filter(|(pr, pc)| {
                    *pr >= 0.0
                        && *pr <= (rig.rows - 1) as f64
                        && *pc >= 0.0
                        && *pc <= (rig.cols - 1) as f64
                });
                match px {
                    Some((pr, pc)) => {
                        for ch in 0..channels {
                            row_data[c * channels + ch] = img.sample_bilinear(pc, pr, ch);
                        }
                    }
                    None => {
                        for ch in 0..channels {
                            row_data[c * channels + ch] = f32::NAN;
                        }
                    }
                }
            }
        });

    GroundGrid {
        cells,
        ..grid_geom
    }
}
