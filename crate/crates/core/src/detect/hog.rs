//! Histogram-of-oriented-gradients features.
//!
//! 8x8 pixel cells, 9 unsigned orientation bins over [0, 180) with bilinear
//! magnitude voting, 2x2-cell blocks at 50% overlap, L2-hys normalization
//! (clip 0.2, renormalize). A constant image produces an all-zero descriptor:
//! the epsilon in the norm guards the division.

use super::DetectError;
use crate::imgcore::ImageF;

pub const DEFAULT_CELL: usize = 8;
pub const ORIENT_BINS: usize = 9;
/// Values per block position: 2x2 cells x 9 bins.
pub const BLOCK_DIM: usize = 36;

const L2_HYS_CLIP: f32 = 0.2;
const NORM_EPS: f32 = 1e-3;

/// Block-normalized HOG feature grid.
#[derive(Debug, Clone)]
pub struct HogFeature {
    cells_x: usize,
    cells_y: usize,
    /// blocks_y x blocks_x x BLOCK_DIM, row-major.
    data: Vec<f32>,
}

impl HogFeature {
    #[inline]
    pub fn cells_x(&self) -> usize {
        self.cells_x
    }

    #[inline]
    pub fn cells_y(&self) -> usize {
        self.cells_y
    }

    #[inline]
    pub fn blocks_x(&self) -> usize {
        self.cells_x - 1
    }

    #[inline]
    pub fn blocks_y(&self) -> usize {
        self.cells_y - 1
    }

    /// 36-value descriptor of the block whose top-left cell is (bx, by).
    #[inline]
    pub fn block(&self, bx: usize, by: usize) -> &[f32] {
        let i = (by * self.blocks_x() + bx) * BLOCK_DIM;
        &self.data[i..i + BLOCK_DIM]
    }

    /// Contiguous run of `n` blocks starting at (bx, by) within one block row.
    #[inline]
    pub fn block_run(&self, bx: usize, by: usize, n: usize) -> &[f32] {
        debug_assert!(bx + n <= self.blocks_x());
        let i = (by * self.blocks_x() + bx) * BLOCK_DIM;
        &self.data[i..i + n * BLOCK_DIM]
    }

    /// Total descriptor length.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }
}

/// Compute HOG on a single-channel image with the given cell size.
pub fn hog(img: &ImageF, cell: usize) -> Result<HogFeature, DetectError> {
    assert_eq!(img.channels(), 1, "HOG input must be single-channel");
    let cells_x = img.width() / cell;
    let cells_y = img.height() / cell;
    if cells_x < 2 || cells_y < 2 {
        return Err(DetectError::ImageTooSmall(img.width(), img.height(), cell));
    }

    // Per-cell orientation histograms with bilinear voting between the two
    // nearest bin centers (centers at i * 20 degrees).
    let bin_width = 180.0f32 / ORIENT_BINS as f32;
    let mut cells = vec![0.0f32; cells_x * cells_y * ORIENT_BINS];
    for y in 0..cells_y * cell {
        for x in 0..cells_x * cell {
            let (xi, yi) = (x as i64, y as i64);
            let gx = img.get_clamped(xi + 1, yi, 0) - img.get_clamped(xi - 1, yi, 0);
            let gy = img.get_clamped(xi, yi + 1, 0) - img.get_clamped(xi, yi - 1, 0);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let mut angle = gy.atan2(gx).to_degrees();
            if angle < 0.0 {
                angle += 180.0;
            }
            if angle >= 180.0 {
                angle -= 180.0;
            }
            let pos = angle / bin_width;
            let b0 = pos.floor();
            let w1 = pos - b0;
            let bin0 = (b0 as usize) % ORIENT_BINS;
            let bin1 = (bin0 + 1) % ORIENT_BINS;
            let c = ((y / cell) * cells_x + x / cell) * ORIENT_BINS;
            cells[c + bin0] += mag * (1.0 - w1);
            cells[c + bin1] += mag * w1;
        }
    }

    // 2x2 blocks at 1-cell stride, L2-hys normalized.
    let blocks_x = cells_x - 1;
    let blocks_y = cells_y - 1;
    let mut data = vec![0.0f32; blocks_x * blocks_y * BLOCK_DIM];
    for by in 0..blocks_y {
        for bx in 0..blocks_x {
            let out = &mut data[(by * blocks_x + bx) * BLOCK_DIM..][..BLOCK_DIM];
            for (q, &(dy, dx)) in [(0, 0), (0, 1), (1, 0), (1, 1)].iter().enumerate() {
                let c = ((by + dy) * cells_x + bx + dx) * ORIENT_BINS;
                out[q * ORIENT_BINS..(q + 1) * ORIENT_BINS]
                    .copy_from_slice(&cells[c..c + ORIENT_BINS]);
            }
            let norm = (out.iter().map(|v| v * v).sum::<f32>() + NORM_EPS * NORM_EPS).sqrt();
            for v in out.iter_mut() {
                *v = (*v / norm).min(L2_HYS_CLIP);
            }
            let norm2 = (out.iter().map(|v| v * v).sum::<f32>() + NORM_EPS * NORM_EPS).sqrt();
            for v in out.iter_mut() {
                *v /= norm2;
            }
        }
    }

    Ok(HogFeature {
        cells_x,
        cells_y,
        data,
    })
}
