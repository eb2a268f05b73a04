//! Detector model container and its binary file format.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic    4 bytes  "LSDM"
//! version  u32      1
//! root_w   u32      root filter width in HOG blocks
//! root_h   u32      root filter height in HOG blocks
//! n_parts  u32
//! bias     f32
//! thresh   f32      default detection threshold
//! root     root_h * root_w * 36 f32
//! per part:
//!   anchor_x i32    ideal placement offset, part-resolution blocks
//!   anchor_y i32
//!   part_w   u32
//!   part_h   u32
//!   d1 d2 d3 d4 f32 deformation cost coefficients
//!   weights  part_h * part_w * 36 f32
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::gdt::Deformation;
use super::hog::BLOCK_DIM;
use super::DetectError;

const MAGIC: &[u8; 4] = b"LSDM";
const VERSION: u32 = 1;

/// A part filter at twice the root resolution with its placement cost.
#[derive(Debug, Clone)]
pub struct PartFilter {
    /// Ideal offset from 2x the root position, part-resolution blocks.
    pub anchor: (i32, i32),
    pub w: usize,
    pub h: usize,
    /// h x w x 36, row-major.
    pub weights: Vec<f32>,
    pub deformation: Deformation,
}

/// Root + parts detector with bias and default threshold.
#[derive(Debug, Clone)]
pub struct DetectorModel {
    pub root_w: usize,
    pub root_h: usize,
    /// root_h x root_w x 36, row-major.
    pub root: Vec<f32>,
    pub parts: Vec<PartFilter>,
    pub bias: f32,
    pub threshold: f32,
}

impl DetectorModel {
    /// Structural checks shared by the loader and the scorer.
    pub fn validate(&self) -> Result<(), String> {
        if self.root.len() != self.root_w * self.root_h * BLOCK_DIM {
            return Err(format!(
                "root weights {} do not match {}x{}x{}",
                self.root.len(),
                self.root_w,
                self.root_h,
                BLOCK_DIM
            ));
        }
        for (i, p) in self.parts.iter().enumerate() {
            if p.weights.len() != p.w * p.h * BLOCK_DIM {
                return Err(format!("part {i}: weight count mismatch"));
            }
            if !(p.deformation.d2 > 0.0 && p.deformation.d4 > 0.0) {
                return Err(format!(
                    "part {i}: deformation must be convex (d2 = {}, d4 = {})",
                    p.deformation.d2, p.deformation.d4
                ));
            }
            // Anchors live inside twice the root extent.
            if p.anchor.0 < 0
                || p.anchor.1 < 0
                || p.anchor.0 as usize > 2 * self.root_w
                || p.anchor.1 as usize > 2 * self.root_h
            {
                return Err(format!("part {i}: anchor {:?} outside 2x root extent", p.anchor));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DetectError> {
        self.validate().map_err(|msg| DetectError::ModelFormat {
            path: path.display().to_string(),
            msg,
        })?;
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.root_w as u32).to_le_bytes())?;
        w.write_all(&(self.root_h as u32).to_le_bytes())?;
        w.write_all(&(self.parts.len() as u32).to_le_bytes())?;
        w.write_all(&self.bias.to_le_bytes())?;
        w.write_all(&self.threshold.to_le_bytes())?;
        for v in &self.root {
            w.write_all(&v.to_le_bytes())?;
        }
        for p in &self.parts {
            w.write_all(&p.anchor.0.to_le_bytes())?;
            w.write_all(&p.anchor.1.to_le_bytes())?;
            w.write_all(&(p.w as u32).to_le_bytes())?;
            w.write_all(&(p.h as u32).to_le_bytes())?;
            for d in [
                p.deformation.d1,
                p.deformation.d2,
                p.deformation.d3,
                p.deformation.d4,
            ] {
                w.write_all(&(d as f32).to_le_bytes())?;
            }
            for v in &p.weights {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DetectError> {
        let fail = |msg: &str| DetectError::ModelFormat {
            path: path.display().to_string(),
            msg: msg.to_string(),
        };
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);

        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(fail("bad magic (not a detector model)"));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut dyn Read| -> Result<u32, DetectError> {
            r.read_exact(&mut u32buf)?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(fail(&format!("unsupported version {version}")));
        }
        let root_w = read_u32(&mut r)? as usize;
        let root_h = read_u32(&mut r)? as usize;
        let n_parts = read_u32(&mut r)? as usize;
        if root_w == 0 || root_h == 0 || root_w > 1024 || root_h > 1024 || n_parts > 64 {
            return Err(fail("implausible header dimensions"));
        }

        let mut f32buf = [0u8; 4];
        let mut read_f32 = |r: &mut dyn Read| -> Result<f32, DetectError> {
            r.read_exact(&mut f32buf)?;
            Ok(f32::from_le_bytes(f32buf))
        };
        let bias = read_f32(&mut r)?;
        let threshold = read_f32(&mut r)?;

        let read_weights = |r: &mut dyn Read, count: usize| -> Result<Vec<f32>, DetectError> {
            let mut bytes = vec![0u8; count * 4];
            r.read_exact(&mut bytes)?;
            Ok(bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect())
        };
        let root = read_weights(&mut r, root_w * root_h * BLOCK_DIM)?;

        let mut parts = Vec::with_capacity(n_parts);
        for _ in 0..n_parts {
            let mut i32buf = [0u8; 4];
            r.read_exact(&mut i32buf)?;
            let ax = i32::from_le_bytes(i32buf);
            r.read_exact(&mut i32buf)?;
            let ay = i32::from_le_bytes(i32buf);
            let pw = {
                r.read_exact(&mut i32buf)?;
                u32::from_le_bytes(i32buf) as usize
            };
            let ph = {
                r.read_exact(&mut i32buf)?;
                u32::from_le_bytes(i32buf) as usize
            };
            if pw == 0 || ph == 0 || pw > 1024 || ph > 1024 {
                return Err(fail("implausible part dimensions"));
            }
            let mut d = [0.0f32; 4];
            for v in &mut d {
                r.read_exact(&mut i32buf)?;
                *v = f32::from_le_bytes(i32buf);
            }
            let weights = read_weights(&mut r, pw * ph * BLOCK_DIM)?;
            parts.push(PartFilter {
                anchor: (ax, ay),
                w: pw,
                h: ph,
                weights,
                deformation: Deformation {
                    d1: d[0] as f64,
                    d2: d[1] as f64,
                    d3: d[2] as f64,
                    d4: d[3] as f64,
                },
            });
        }

        let model = DetectorModel {
            root_w,
            root_h,
            root,
            parts,
            bias,
            threshold,
        };
        model.validate().map_err(|msg| DetectError::ModelFormat {
            path: path.display().to_string(),
            msg,
        })?;
        Ok(model)
    }
}
