//! Overlay rendering: fitted lanes, ego-lane shading, road boundary,
//! vanishing-point extension and detection boxes on top of the input frame.

use crate::detect::Detection;
use crate::ipm::{ground_to_pixel, CameraRig};
use crate::lanefit::LaneSet;
use crate::motion::{FramePosition, Mobility};
use crate::roadseg::VpExtension;
use crate::imgcore::ImageF;

const LANE_COLOR: [f32; 3] = [1.0, 0.85, 0.1];
const EGO_FILL: [f32; 3] = [0.2, 0.8, 0.3];
const BOUNDARY_COLOR: [f32; 3] = [0.2, 0.5, 1.0];
const VP_COLOR: [f32; 3] = [0.9, 0.3, 0.9];
const MOVING_COLOR: [f32; 3] = [1.0, 0.25, 0.2];
const STATIC_COLOR: [f32; 3] = [0.3, 1.0, 0.3];
const UNKNOWN_COLOR: [f32; 3] = [1.0, 1.0, 0.3];

fn put(img: &mut ImageF, x: i64, y: i64, color: [f32; 3], alpha: f32) {
    if x < 0 || y < 0 || x >= img.width() as i64 || y >= img.height() as i64 {
        return;
    }
    for c in 0..3 {
        let old = img.get(x as usize, y as usize, c);
        img.set(x as usize, y as usize, c, old * (1.0 - alpha) + color[c] * alpha);
    }
}

fn draw_disk(img: &mut ImageF, cx: f64, cy: f64, r: i64, color: [f32; 3]) {
    let (xi, yi) = (cx.round() as i64, cy.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                put(img, xi + dx, yi + dy, color, 1.0);
            }
        }
    }
}

fn draw_segment(img: &mut ImageF, p0: (f64, f64), p1: (f64, f64), color: [f32; 3], r: i64) {
    let steps = (p1.0 - p0.0).abs().max((p1.1 - p0.1).abs()).ceil() as usize;
    for s in 0..=steps {
        let t = s as f64 / steps.max(1) as f64;
        draw_disk(
            img,
            p0.0 + t * (p1.0 - p0.0),
            p0.1 + t * (p1.1 - p0.1),
            r,
            color,
        );
    }
}

fn draw_rect(img: &mut ImageF, bbox: (f32, f32, f32, f32), color: [f32; 3]) {
    let (x, y, w, h) = (bbox.0 as f64, bbox.1 as f64, bbox.2 as f64, bbox.3 as f64);
    draw_segment(img, (x, y), (x + w, y), color, 1);
    draw_segment(img, (x, y + h), (x + w, y + h), color, 1);
    draw_segment(img, (x, y), (x, y + h), color, 1);
    draw_segment(img, (x + w, y), (x + w, y + h), color, 1);
}

/// Sample a lane curve into image-space points from near field to 45 m.
fn curve_to_pixels(
    curve: &crate::lanefit::LaneCurve,
    rig: &CameraRig,
    x_max: f64,
) -> Vec<(f64, f64)> {
    let mut pts = Vec::new();
    let mut x = curve.domain.0.max(rig.near_limit());
    while x <= x_max {
        if let Ok((row, col)) = ground_to_pixel(rig, x, curve.eval_clamped(x)) {
            if row >= 0.0 && row < rig.rows as f64 && col >= -50.0 && col < rig.cols as f64 + 50.0 {
                pts.push((col, row));
            }
        }
        x += 0.5;
    }
    pts
}

fn draw_polyline(img: &mut ImageF, pts: &[(f64, f64)], color: [f32; 3], r: i64) {
    for w in pts.windows(2) {
        draw_segment(img, w[0], w[1], color, r);
    }
}

/// Even-odd scanline fill of a closed pixel polygon with alpha blending.
fn fill_polygon(img: &mut ImageF, poly: &[(f64, f64)], color: [f32; 3], alpha: f32) {
    if poly.len() < 3 {
        return;
    }
    let y_lo = poly.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).max(0.0) as i64;
    let y_hi = poly
        .iter()
        .map(|p| p.1)
        .fold(f64::NEG_INFINITY, f64::max)
        .min(img.height() as f64 - 1.0) as i64;
    for y in y_lo..=y_hi {
        let fy = y as f64 + 0.5;
        let mut xs = Vec::new();
        for i in 0..poly.len() {
            let (p, q) = (poly[i], poly[(i + 1) % poly.len()]);
            if (p.1 <= fy && q.1 > fy) || (q.1 <= fy && p.1 > fy) {
                xs.push(p.0 + (fy - p.1) / (q.1 - p.1) * (q.0 - p.0));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            let x0 = pair[0].max(0.0) as i64;
            let x1 = pair[1].min(img.width() as f64 - 1.0) as i64;
            for x in x0..=x1 {
                put(img, x, y, color, alpha);
            }
        }
    }
}

/// Compose the overlay for one frame.
pub fn draw(
    frame: &ImageF,
    rig: &CameraRig,
    lanes: Option<&LaneSet>,
    boundary: Option<&(Vec<(f64, f64)>, Vec<(f64, f64)>)>,
    vp: Option<&VpExtension>,
    detections: &[Detection],
    position: &FramePosition,
) -> ImageF {
    let mut img = if frame.channels() == 3 {
        frame.clone()
    } else {
        let mut rgb = ImageF::new(frame.width(), frame.height(), 3);
        for y in 0..frame.height() {
            for x in 0..frame.width() {
                let v = frame.get(x, y, 0);
                for c in 0..3 {
                    rgb.set(x, y, c, v);
                }
            }
        }
        rgb
    };

    if let Some(lanes) = lanes {
        // Ego-lane shading between the two ego boundary curves.
        if let Some(ei) = lanes.ego_index {
            let left = curve_to_pixels(&lanes.curves[ei + 1], rig, 45.0);
            let right = curve_to_pixels(&lanes.curves[ei], rig, 45.0);
            let mut poly = left.clone();
            poly.extend(right.iter().rev());
            fill_polygon(&mut img, &poly, EGO_FILL, 0.25);
        }
        for curve in &lanes.curves {
            draw_polyline(&mut img, &curve_to_pixels(curve, rig, 45.0), LANE_COLOR, 1);
        }
    }

    if let Some((left, right)) = boundary {
        for poly in [left, right] {
            let pts: Vec<(f64, f64)> = poly
                .iter()
                .filter_map(|(x, y)| ground_to_pixel(rig, *x, *y).ok())
                .map(|(row, col)| (col, row))
                .collect();
            draw_polyline(&mut img, &pts, BOUNDARY_COLOR, 1);
        }
    }

    if let Some(vp) = vp {
        for (from, to) in &vp.segments {
            draw_segment(&mut img, *from, *to, VP_COLOR, 0);
        }
        draw_disk(&mut img, vp.vp_px.0, vp.vp_px.1, 3, VP_COLOR);
    }

    for (det, record) in detections.iter().zip(&position.detections) {
        let color = match record.mobility {
            Mobility::Moving => MOVING_COLOR,
            Mobility::Static => STATIC_COLOR,
            Mobility::Unknown => UNKNOWN_COLOR,
        };
        draw_rect(&mut img, det.bbox, color);
    }

    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polygon_fill_stays_inside_bounds() {
        let mut img = ImageF::new(40, 30, 3);
        let poly = vec![(-10.0, -5.0), (50.0, 2.0), (35.0, 40.0), (5.0, 25.0)];
        fill_polygon(&mut img, &poly, [1.0, 0.0, 0.0], 0.5);
        // Interior got painted.
        assert!(img.get(20, 15, 0) > 0.0);
    }

    #[test]
    fn segment_endpoints_painted() {
        let mut img = ImageF::new(40, 30, 3);
        draw_segment(&mut img, (2.0, 2.0), (30.0, 20.0), [0.0, 1.0, 0.0], 0);
        assert!(img.get(2, 2, 1) > 0.9);
        assert!(img.get(30, 20, 1) > 0.9);
    }
}
