//! Lane-marking feature extraction on the bird's-eye grid.
//!
//! Bright lane marks become vertical bars after inverse perspective mapping.
//! Their centers respond negatively to 2nd- and 4th-order Gaussian x-derivative
//! filters; the product of the two rectified responses is thresholded per grid
//! row (mean + k·sigma) so mark contrast may vary with distance.
//!
//! Illumination robustness comes from a locally normalized L channel computed
//! before warping: shadows shift the local mean and scale, both of which the
//! normalization removes.

use thiserror::Error;

use crate::imgcore::{convolve, ImageError, ImageF, Kernel2D};
use crate::ipm::GroundGrid;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("grid has no valid cells")]
    NoValidCells,
    #[error(transparent)]
    Image(#[from] ImageError),
}

/// Pointwise 2nd-order x-derivative kernel value (before mean subtraction).
pub fn g2x_at(x: f64, y: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    (4.0 * x * x / (s2 * s2) - 2.0 / s2) * (-(x * x + y * y) / s2).exp()
}

/// Pointwise mixed-derivative kernel value.
pub fn gxy_at(x: f64, y: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    4.0 * x * y / (s2 * s2) * (-(x * x + y * y) / s2).exp()
}

/// Pointwise 2nd-order y-derivative kernel value.
pub fn g2y_at(x: f64, y: f64, sigma: f64) -> f64 {
    g2x_at(y, x, sigma)
}

/// Pointwise 4th-order x-derivative kernel value (before mean subtraction).
/// The constant term keeps its printed sign (-12/sigma^4); mean subtraction
/// makes any constant offset immaterial for ridge detection.
pub fn g4x_at(x: f64, y: f64, sigma: f64) -> f64 {
    let s2 = sigma * sigma;
    let s4 = s2 * s2;
    (16.0 * x.powi(4) / (s4 * s4) - 48.0 * x * x / (s4 * s2) - 12.0 / s4)
        * (-(x * x + y * y) / s2).exp()
}

/// Pointwise 4th-order y-derivative kernel value.
pub fn g4y_at(x: f64, y: f64, sigma: f64) -> f64 {
    g4x_at(y, x, sigma)
}

/// Discretized steerable derivative filters at scale `sigma` (grid cells).
///
/// `gxy`, `g2y` and `g4y` are not used by the default lane pipeline (lanes
/// are vertical after IPM) but complete the 2nd/4th-order basis.
#[derive(Debug, Clone)]
pub struct SteerableBank {
    pub sigma: f64,
    pub support_radius: usize,
    pub g2x: Kernel2D,
    pub gxy: Kernel2D,
    pub g2y: Kernel2D,
    pub g4x: Kernel2D,
    pub g4y: Kernel2D,
}

fn sample_kernel(radius: usize, sigma: f64, f: impl Fn(f64, f64, f64) -> f64) -> Kernel2D {
    let side = 2 * radius + 1;
    let mut taps = Vec::with_capacity(side * side);
    for y in -(radius as i64)..=radius as i64 {
        for x in -(radius as i64)..=radius as i64 {
            taps.push(f(x as f64, y as f64, sigma));
        }
    }
    Kernel2D::from_taps(side, side, taps)
        .expect("odd side by construction")
        .mean_subtracted()
}

/// Sample all five kernels at integer offsets in
/// `[-ceil(4 sigma), ceil(4 sigma)]^2` and subtract each kernel's mean.
pub fn build_bank(sigma: f64) -> SteerableBank {
    assert!(sigma >= 0.5, "sigma {sigma} below the sampling limit");
    let support_radius = (4.0 * sigma).ceil() as usize;
    SteerableBank {
        sigma,
        support_radius,
        g2x: sample_kernel(support_radius, sigma, g2x_at),
        gxy: sample_kernel(support_radius, sigma, gxy_at),
        g2y: sample_kernel(support_radius, sigma, g2y_at),
        g4x: sample_kernel(support_radius, sigma, g4x_at),
        g4y: sample_kernel(support_radius, sigma, g4y_at),
    }
}

const INVARIANT_WINDOW: usize = 31;
const INVARIANT_EPS: f64 = 1e-3;

/// Locally normalized L channel: `(L - mean) / (stddev + eps)` over a 31x31
/// window. Removes multiplicative illumination (shadow, extra sunlight) up to
/// window-border effects.
pub fn illum_invariant_channel(lab: &ImageF) -> Result<ImageF, FeatureError> {
    if lab.channels() != 3 {
        return Err(FeatureError::Image(ImageError::ChannelMismatch {
            expected: 3,
            got: lab.channels(),
        }));
    }
    let l = lab.channel(0);
    let box_factor = vec![1.0 / INVARIANT_WINDOW as f64; INVARIANT_WINDOW];
    let box_kernel =
        Kernel2D::from_factors(box_factor.clone(), box_factor).expect("odd window");
    let mean = convolve(&l, &box_kernel)?;
    let sq_data: Vec<f32> = l.data().iter().map(|v| v * v).collect();
    let sq = ImageF::from_data(l.width(), l.height(), 1, sq_data)?;
    let mean_sq = convolve(&sq, &box_kernel)?;

    let mut out = ImageF::new(l.width(), l.height(), 1);
    for i in 0..l.data().len() {
        let m = mean.data()[i] as f64;
        let var = (mean_sq.data()[i] as f64 - m * m).max(0.0);
        out.data_mut()[i] = ((l.data()[i] as f64 - m) / (var.sqrt() + INVARIANT_EPS)) as f32;
    }
    Ok(out)
}

/// Per-cell lane-candidate flags with the normalized response strength.
#[derive(Debug, Clone)]
pub struct FeatureMask {
    rows: usize,
    cols: usize,
    flags: Vec<bool>,
    strength: Vec<f32>,
    x_max: f64,
    y_max: f64,
    resolution: f64,
}

/// A flagged lane-candidate cell in ground coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LanePoint {
    /// Forward distance, meters.
    pub x: f64,
    /// Lateral offset, meters (+y is left).
    pub y: f64,
}

impl FeatureMask {
    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn flagged(&self, row: usize, col: usize) -> bool {
        self.flags[row * self.cols + col]
    }

    #[inline]
    pub fn strength(&self, row: usize, col: usize) -> f32 {
        self.strength[row * self.cols + col]
    }

    #[inline]
    pub fn x_of_row(&self, row: usize) -> f64 {
        self.x_max - (row as f64 + 0.5) * self.resolution
    }

    #[inline]
    pub fn y_of_col(&self, col: usize) -> f64 {
        self.y_max - (col as f64 + 0.5) * self.resolution
    }

    pub fn flag_count(&self) -> usize {
        self.flags.iter().filter(|f| **f).count()
    }

    /// Cell size in meters.
    #[inline]
    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    /// Flagged cells as ground points, row-major order (deterministic).
    pub fn points(&self) -> Vec<LanePoint> {
        let mut pts = Vec::new();
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.flagged(r, c) {
                    pts.push(LanePoint {
                        x: self.x_of_row(r),
                        y: self.y_of_col(c),
                    });
                }
            }
        }
        pts
    }
}

/// Fill invalid cells with the nearest valid value in the same row so the
/// convolution sees no artificial step at the visibility boundary.
fn fill_invalid_rows(grid: &GroundGrid) -> ImageF {
    let (rows, cols) = (grid.rows(), grid.cols());
    let mut out = ImageF::new(cols, rows, 1);
    for r in 0..rows {
        let mut left: Vec<Option<(usize, f32)>> = Vec::with_capacity(cols);
        let mut last: Option<(usize, f32)> = None;
        for c in 0..cols {
            let v = grid.cells.get(c, r, 0);
            if !v.is_nan() {
                last = Some((c, v));
            }
            left.push(last);
        }
        let mut right: Vec<Option<(usize, f32)>> = vec![None; cols];
        let mut last: Option<(usize, f32)> = None;
        for c in (0..cols).rev() {
            let v = grid.cells.get(c, r, 0);
            if !v.is_nan() {
                last = Some((c, v));
            }
            right[c] = last;
        }
        for c in 0..cols {
            let v = grid.cells.get(c, r, 0);
            let filled = if !v.is_nan() {
                v
            } else {
                match (left[c], right[c]) {
                    (Some((lc, lv)), Some((rc, rv))) => {
                        if c - lc <= rc - c {
                            lv
                        } else {
                            rv
                        }
                    }
                    (Some((_, lv)), None) => lv,
                    (None, Some((_, rv))) => rv,
                    (None, None) => 0.0,
                }
            };
            out.set(c, r, 0, filled);
        }
    }
    out
}

/// Extract lane-mark candidates from a single-channel grid.
///
/// Response: `R = max(-g2x*I, 0) * max(-g4x*I, 0)`, normalized by the grid
/// maximum; a valid cell is flagged when `R > mean + k*sigma` of its row.
/// The conjunctive product suppresses responses present at only one scale.
pub fn extract_features(
    grid: &GroundGrid,
    bank: &SteerableBank,
    k: f64,
) -> Result<FeatureMask, FeatureError> {
    assert_eq!(grid.cells.channels(), 1, "feature input must be 1-channel");
    let (rows, cols) = (grid.rows(), grid.cols());
    if grid.valid_count() == 0 {
        return Err(FeatureError::NoValidCells);
    }

    let filled = fill_invalid_rows(grid);
    let c2 = convolve(&filled, &bank.g2x)?;
    let c4 = convolve(&filled, &bank.g4x)?;

    let mut response = vec![0.0f32; rows * cols];
    let mut rmax = 0.0f32;
    for r in 0..rows {
        for c in 0..cols {
            if !grid.valid(r, c) {
                continue;
            }
            let v2 = (-c2.get(c, r, 0)).max(0.0);
            let v4 = (-c4.get(c, r, 0)).max(0.0);
            let v = v2 * v4;
            response[r * cols + c] = v;
            rmax = rmax.max(v);
        }
    }
    if rmax > 0.0 {
        for v in &mut response {
            *v /= rmax;
        }
    }

    let mut flags = vec![false; rows * cols];
    for r in 0..rows {
        let mut sum = 0.0f64;
        let mut sum_sq = 0.0f64;
        let mut n = 0usize;
        for c in 0..cols {
            if grid.valid(r, c) {
                let v = response[r * cols + c] as f64;
                sum += v;
                sum_sq += v * v;
                n += 1;
            }
        }
        if n < 8 {
            continue; // too few cells for meaningful row statistics
        }
        let mean = sum / n as f64;
        let var = (sum_sq / n as f64 - mean * mean).max(0.0);
        let thresh = mean + k * var.sqrt();
        for c in 0..cols {
            if grid.valid(r, c) && (response[r * cols + c] as f64) > thresh {
                flags[r * cols + c] = true;
            }
        }
    }

    Ok(FeatureMask {
        rows,
        cols,
        flags,
        strength: response,
        x_max: grid.x_max,
        y_max: grid.y_max,
        resolution: grid.resolution,
    })
}
