//! sRGB <-> CIE L*a*b* conversion under the D65 white point.
//!
//! L* is rescaled to `[0,1]` (divided by 100); a* and b* keep their native
//! range so neutral colors sit at a = b = 0.

use super::{ImageError, ImageF};

// D65 reference white, 2-degree observer.
const WHITE: [f64; 3] = [0.95047, 1.0, 1.08883];

// sRGB (linear) -> XYZ, IEC 61966-2-1.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const XYZ_TO_RGB: [[f64; 3]; 3] = [
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
];

const EPS: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

#[inline]
fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.0031308 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    if t > EPS {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

#[inline]
fn lab_f_inv(f: f64) -> f64 {
    let f3 = f * f * f;
    if f3 > EPS {
        f3
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

/// Convert a single sRGB triple in `[0,1]` to (L/100, a, b).
pub fn rgb_to_lab_px(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let (rl, gl, bl) = (srgb_to_linear(r), srgb_to_linear(g), srgb_to_linear(b));
    let mut xyz = [0.0f64; 3];
    for (i, row) in RGB_TO_XYZ.iter().enumerate() {
        xyz[i] = row[0] * rl + row[1] * gl + row[2] * bl;
    }
    let fx = lab_f(xyz[0] / WHITE[0]);
    let fy = lab_f(xyz[1] / WHITE[1]);
    let fz = lab_f(xyz[2] / WHITE[2]);
    let l = 116.0 * fy - 16.0;
    let a = 500.0 * (fx - fy);
    let bb = 200.0 * (fy - fz);
    (l / 100.0, a, bb)
}

/// Inverse of [`rgb_to_lab_px`]; output clamped to `[0,1]`.
pub fn lab_to_rgb_px(l_scaled: f64, a: f64, b: f64) -> (f64, f64, f64) {
    let l = l_scaled * 100.0;
    let fy = (l + 16.0) / 116.0;
    let fx = fy + a / 500.0;
    let fz = fy - b / 200.0;
    let xyz = [
        lab_f_inv(fx) * WHITE[0],
        lab_f_inv(fy) * WHITE[1],
        lab_f_inv(fz) * WHITE[2],
    ];
    let mut rgb = [0.0f64; 3];
    for (i, row) in XYZ_TO_RGB.iter().enumerate() {
        rgb[i] = row[0] * xyz[0] + row[1] * xyz[1] + row[2] * xyz[2];
    }
    (
        linear_to_srgb(rgb[0]).clamp(0.0, 1.0),
        linear_to_srgb(rgb[1]).clamp(0.0, 1.0),
        linear_to_srgb(rgb[2]).clamp(0.0, 1.0),
    )
}

/// Convert a 3-channel sRGB image to Lab (L scaled to `[0,1]`).
pub fn rgb_to_lab(img: &ImageF) -> Result<ImageF, ImageError> {
    if img.channels() != 3 {
        return Err(ImageError::ChannelMismatch {
            expected: 3,
            got: img.channels(),
        });
    }
    let mut out = ImageF::new(img.width(), img.height(), 3);
    let src = img.data();
    let dst = out.data_mut();
    for i in (0..src.len()).step_by(3) {
        let (l, a, b) = rgb_to_lab_px(src[i] as f64, src[i + 1] as f64, src[i + 2] as f64);
        dst[i] = l as f32;
        dst[i + 1] = a as f32;
        dst[i + 2] = b as f32;
    }
    Ok(out)
}

/// Convert a Lab image back to sRGB. Used by tests and overlay rendering.
pub fn lab_to_rgb(img: &ImageF) -> Result<ImageF, ImageError> {
    if img.channels() != 3 {
        return Err(ImageError::ChannelMismatch {
            expected: 3,
            got: img.channels(),
        });
    }
    let mut out = ImageF::new(img.width(), img.height(), 3);
    let src = img.data();
    let dst = out.data_mut();
    for i in (0..src.len()).step_by(3) {
        let (r, g, b) = lab_to_rgb_px(src[i] as f64, src[i + 1] as f64, src[i + 2] as f64);
        dst[i] = r as f32;
        dst[i + 1] = g as f32;
        dst[i + 2] = b as f32;
    }
    Ok(out)
}
