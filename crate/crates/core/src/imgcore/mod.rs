//! Image buffers, color conversion, convolution and pyramid downsampling.
//!
//! Pixel data is `f32`; every accumulation runs in `f64`. Color images store
//! interleaved channels in row-major order.

mod color;
mod conv;
mod io;

pub use color::{lab_to_rgb, rgb_to_lab};
pub use conv::{convolve, downsample_half, resize_bilinear};
pub use io::{read_image, read_ppm, write_ppm};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("expected {expected} channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("invalid image dimensions {width}x{height}x{channels}")]
    BadDimensions {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("data length {got} does not match {width}x{height}x{channels}")]
    DataLength {
        width: usize,
        height: usize,
        channels: usize,
        got: usize,
    },
    #[error("kernel sides must be odd, got {0}x{1}")]
    EvenKernel(usize, usize),
    #[error("separable factors do not reproduce the dense taps (max error {0:.3e})")]
    NotSeparable(f64),
    #[error("image too small to downsample: {0}x{1}")]
    TooSmall(usize, usize),
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Row-major scalar image. Color values live in `[0,1]`; filter responses are
/// unbounded.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageF {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl ImageF {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        assert!(
            width >= 1 && height >= 1 && (channels == 1 || channels == 3),
            "invalid image dimensions {width}x{height}x{channels}"
        );
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_data(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<f32>,
    ) -> Result<Self, ImageError> {
        if width < 1 || height < 1 || !(channels == 1 || channels == 3) {
            return Err(ImageError::BadDimensions {
                width,
                height,
                channels,
            });
        }
        if data.len() != width * height * channels {
            return Err(ImageError::DataLength {
                width,
                height,
                channels,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn constant(width: usize, height: usize, channels: usize, value: f32) -> Self {
        let mut img = Self::new(width, height, channels);
        img.data.fill(value);
        img
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f32 {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f32) {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// Clamped lookup; coordinates outside the frame replicate the border.
    #[inline]
    pub fn get_clamped(&self, x: i64, y: i64, c: usize) -> f32 {
        let xc = x.clamp(0, self.width as i64 - 1) as usize;
        let yc = y.clamp(0, self.height as i64 - 1) as usize;
        self.get(xc, yc, c)
    }

    /// Bilinear sample with border replication. `x`, `y` in pixel coordinates
    /// where integer values address pixel centers.
    pub fn sample_bilinear(&self, x: f64, y: f64, c: usize) -> f32 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = (x - x0) as f32;
        let fy = (y - y0) as f32;
        let xi = x0 as i64;
        let yi = y0 as i64;
        let v00 = self.get_clamped(xi, yi, c);
        let v10 = self.get_clamped(xi + 1, yi, c);
        let v01 = self.get_clamped(xi, yi + 1, c);
        let v11 = self.get_clamped(xi + 1, yi + 1, c);
        (1.0 - fx) * (1.0 - fy) * v00 + fx * (1.0 - fy) * v10 + (1.0 - fx) * fy * v01 + fx * fy * v11
    }

    /// Extract a single channel as a new 1-channel image.
    pub fn channel(&self, c: usize) -> ImageF {
        assert!(c < self.channels);
        let mut out = ImageF::new(self.width, self.height, 1);
        for i in 0..self.width * self.height {
            out.data[i] = self.data[i * self.channels + c];
        }
        out
    }

    /// `true` if `self` lies within `tol` of `other` element-wise.
    pub fn approx_eq(&self, other: &ImageF, tol: f32) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.channels == other.channels
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// Odd-sized 2D filter taps, optionally with separable 1D factors
/// (`taps[y][x] = col_factor[y] * row_factor[x]`).
#[derive(Debug, Clone)]
pub struct Kernel2D {
    size_x: usize,
    size_y: usize,
    taps: Vec<f64>,
    separable: Option<(Vec<f64>, Vec<f64>)>,
}

impl Kernel2D {
    pub fn from_taps(size_x: usize, size_y: usize, taps: Vec<f64>) -> Result<Self, ImageError> {
        if size_x % 2 == 0 || size_y % 2 == 0 {
            return Err(ImageError::EvenKernel(size_x, size_y));
        }
        if taps.len() != size_x * size_y {
            return Err(ImageError::DataLength {
                width: size_x,
                height: size_y,
                channels: 1,
                got: taps.len(),
            });
        }
        Ok(Self {
            size_x,
            size_y,
            taps,
            separable: None,
        })
    }

    /// Build from 1D factors; the dense taps are their outer product.
    pub fn from_factors(col_factor: Vec<f64>, row_factor: Vec<f64>) -> Result<Self, ImageError> {
        if col_factor.len() % 2 == 0 || row_factor.len() % 2 == 0 {
            return Err(ImageError::EvenKernel(row_factor.len(), col_factor.len()));
        }
        let mut taps = Vec::with_capacity(col_factor.len() * row_factor.len());
        for cy in &col_factor {
            for rx in &row_factor {
                taps.push(cy * rx);
            }
        }
        Ok(Self {
            size_x: row_factor.len(),
            size_y: col_factor.len(),
            taps,
            separable: Some((col_factor, row_factor)),
        })
    }

    /// Attach separable factors to an existing dense kernel. Fails when the
    /// outer product deviates from the taps by more than 1e-9.
    pub fn with_factors(
        mut self,
        col_factor: Vec<f64>,
        row_factor: Vec<f64>,
    ) -> Result<Self, ImageError> {
        if col_factor.len() != self.size_y || row_factor.len() != self.size_x {
            return Err(ImageError::EvenKernel(row_factor.len(), col_factor.len()));
        }
        let mut max_err = 0.0f64;
        for (y, cy) in col_factor.iter().enumerate() {
            for (x, rx) in row_factor.iter().enumerate() {
                let err = (cy * rx - self.taps[y * self.size_x + x]).abs();
                max_err = max_err.max(err);
            }
        }
        if max_err > 1e-9 {
            return Err(ImageError::NotSeparable(max_err));
        }
        self.separable = Some((col_factor, row_factor));
        Ok(self)
    }

    /// The 1x1 identity kernel.
    pub fn identity() -> Self {
        Self::from_taps(1, 1, vec![1.0]).unwrap()
    }

    /// Normalized Gaussian, separable, radius `ceil(3*sigma)`.
    pub fn gaussian(sigma: f64) -> Self {
        let f = gaussian_factor_1d(sigma);
        Self::from_factors(f.clone(), f).unwrap()
    }

    #[inline]
    pub fn size_x(&self) -> usize {
        self.size_x
    }

    #[inline]
    pub fn size_y(&self) -> usize {
        self.size_y
    }

    #[inline]
    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    #[inline]
    pub fn separable(&self) -> Option<(&[f64], &[f64])> {
        self.separable.as_ref().map(|(c, r)| (&c[..], &r[..]))
    }

    pub fn sum(&self) -> f64 {
        self.taps.iter().sum()
    }

    /// Subtract the mean tap so the kernel sums to zero.
    pub fn mean_subtracted(mut self) -> Self {
        let mean = self.sum() / self.taps.len() as f64;
        for t in &mut self.taps {
            *t -= mean;
        }
        self.separable = None;
        self
    }
}

/// 1D Gaussian samples at integer offsets, normalized to sum 1.
pub fn gaussian_factor_1d(sigma: f64) -> Vec<f64> {
    assert!(sigma > 0.0);
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= sum;
    }
    taps
}

#[cfg(test)]
mod tests;
