//! Single-channel convolution with replicated borders, and the blurred
//! 2x decimation used for pyramid levels.

use super::{ImageError, ImageF, Kernel2D};

/// Filter a 1-channel image. Takes the separable path when 1D factors are
/// attached to the kernel; both paths agree within 1e-6.
pub fn convolve(img: &ImageF, kernel: &Kernel2D) -> Result<ImageF, ImageError> {
    if img.channels() != 1 {
        return Err(ImageError::ChannelMismatch {
            expected: 1,
            got: img.channels(),
        });
    }
    match kernel.separable() {
        Some((col, row)) => Ok(convolve_separable(img, col, row)),
        None => Ok(convolve_dense(img, kernel)),
    }
}

fn convolve_dense(img: &ImageF, kernel: &Kernel2D) -> ImageF {
    let (w, h) = (img.width(), img.height());
    let rx = (kernel.size_x() / 2) as i64;
    let ry = (kernel.size_y() / 2) as i64;
    let taps = kernel.taps();
    let mut out = ImageF::new(w, h, 1);
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = 0.0f64;
            let mut k = 0;
            for dy in -ry..=ry {
                for dx in -rx..=rx {
                    acc += taps[k] * img.get_clamped(x + dx, y + dy, 0) as f64;
                    k += 1;
                }
            }
            out.set(x as usize, y as usize, 0, acc as f32);
        }
    }
    out
}

fn convolve_separable(img: &ImageF, col_factor: &[f64], row_factor: &[f64]) -> ImageF {
    let (w, h) = (img.width(), img.height());
    let rx = (row_factor.len() / 2) as i64;
    let ry = (col_factor.len() / 2) as i64;

    // Horizontal pass in f64 to keep the dense/separable agreement tight.
    let mut mid = vec![0.0f64; w * h];
    for y in 0..h {
        for x in 0..w as i64 {
            let mut acc = 0.0f64;
            for (k, t) in row_factor.iter().enumerate() {
                acc += t * img.get_clamped(x + k as i64 - rx, y as i64, 0) as f64;
            }
            mid[y * w + x as usize] = acc;
        }
    }

    let mut out = ImageF::new(w, h, 1);
    for y in 0..h as i64 {
        for x in 0..w {
            let mut acc = 0.0f64;
            for (k, t) in col_factor.iter().enumerate() {
                let yc = (y + k as i64 - ry).clamp(0, h as i64 - 1) as usize;
                acc += t * mid[yc * w + x];
            }
            out.set(x, y as usize, 0, acc as f32);
        }
    }
    out
}

/// Bilinear resize to the given dimensions. Pixel centers follow the usual
/// half-pixel alignment.
pub fn resize_bilinear(img: &ImageF, new_w: usize, new_h: usize) -> ImageF {
    assert!(new_w >= 1 && new_h >= 1);
    let sx = img.width() as f64 / new_w as f64;
    let sy = img.height() as f64 / new_h as f64;
    let mut out = ImageF::new(new_w, new_h, img.channels());
    for y in 0..new_h {
        let src_y = (y as f64 + 0.5) * sy - 0.5;
        for x in 0..new_w {
            let src_x = (x as f64 + 0.5) * sx - 0.5;
            for c in 0..img.channels() {
                out.set(x, y, c, img.sample_bilinear(src_x, src_y, c));
            }
        }
    }
    out
}

/// Gaussian pre-blur (sigma 0.8) followed by 2x decimation. Output dimensions
/// are `ceil(dim / 2)`. Works per channel.
pub fn downsample_half(img: &ImageF) -> Result<ImageF, ImageError> {
    if img.width() < 2 || img.height() < 2 {
        return Err(ImageError::TooSmall(img.width(), img.height()));
    }
    let blur = Kernel2D::gaussian(0.8);
    let (ow, oh) = (img.width().div_ceil(2), img.height().div_ceil(2));
    let mut out = ImageF::new(ow, oh, img.channels());
    for c in 0..img.channels() {
        let plane = if img.channels() == 1 {
            img.clone()
        } else {
            img.channel(c)
        };
        let blurred = convolve(&plane, &blur).expect("single channel by construction");
        for y in 0..oh {
            for x in 0..ow {
                out.set(x, y, c, blurred.get(x * 2, y * 2, 0));
            }
        }
    }
    Ok(out)
}
