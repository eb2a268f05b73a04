//! Frame I/O: binary PPM (P6) read/write plus PNG ingestion.
//!
//! PPM is the golden-file format for tests: 8-bit, bit-exact, no codec in the
//! loop.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use super::{ImageError, ImageF};

fn io_err(path: &Path, source: std::io::Error) -> ImageError {
    ImageError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn fmt_err(path: &Path, msg: impl Into<String>) -> ImageError {
    ImageError::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Write an image as binary PPM with maxval 255. Single-channel images are
/// replicated to gray RGB. Values are clamped to `[0,1]`.
pub fn write_ppm(img: &ImageF, path: &Path) -> Result<(), ImageError> {
    let file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    write!(w, "P6\n{} {}\n255\n", img.width(), img.height()).map_err(|e| io_err(path, e))?;
    let mut row = Vec::with_capacity(img.width() * 3);
    for y in 0..img.height() {
        row.clear();
        for x in 0..img.width() {
            for c in 0..3 {
                let v = if img.channels() == 3 {
                    img.get(x, y, c)
                } else {
                    img.get(x, y, 0)
                };
                row.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        w.write_all(&row).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Read a binary PPM (P6, maxval 255) into a 3-channel image in `[0,1]`.
pub fn read_ppm(path: &Path) -> Result<ImageF, ImageError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut pos = 0usize;

    let token = |pos: &mut usize| -> Result<String, ImageError> {
        // Skip whitespace and '#' comments between header tokens.
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err(fmt_err(path, "truncated PPM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };

    if token(&mut pos)? != "P6" {
        return Err(fmt_err(path, "not a binary PPM (P6)"));
    }
    let width: usize = token(&mut pos)?
        .parse()
        .map_err(|_| fmt_err(path, "bad width"))?;
    let height: usize = token(&mut pos)?
        .parse()
        .map_err(|_| fmt_err(path, "bad height"))?;
    let maxval: usize = token(&mut pos)?
        .parse()
        .map_err(|_| fmt_err(path, "bad maxval"))?;
    if maxval != 255 {
        return Err(fmt_err(path, format!("unsupported maxval {maxval}")));
    }
    pos += 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(fmt_err(path, "truncated PPM payload"));
    }
    let data = bytes[pos..pos + need]
        .iter()
        .map(|&b| b as f32 / 255.0)
        .collect();
    ImageF::from_data(width, height, 3, data)
}

/// Read a frame by extension: `.ppm` native, `.png` via the image crate.
pub fn read_image(path: &Path) -> Result<ImageF, ImageError> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("ppm") => read_ppm(path),
        Some("png") => {
            let dyn_img =
                image::open(path).map_err(|e| fmt_err(path, format!("png decode: {e}")))?;
            let rgb = dyn_img.to_rgb8();
            let (w, h) = (rgb.width() as usize, rgb.height() as usize);
            let data = rgb.into_raw().iter().map(|&b| b as f32 / 255.0).collect();
            ImageF::from_data(w, h, 3, data)
        }
        other => Err(fmt_err(
            path,
            format!("unsupported frame format {:?}", other.unwrap_or("none")),
        )),
    }
}
