//! Generalized distance transform for deformable part placement.
//!
//! Computes, in linear time, the quadratic upper envelope
//! `env(p) = max_q [ f(q) - d1 (px-qx) - d2 (px-qx)^2 - d3 (py-qy) - d4 (py-qy)^2 ]`
//! together with the maximizing source cell per position. Separability in the
//! two axes reduces the 2D problem to two passes of the 1D lower-envelope
//! algorithm over parabolas.

use super::DetectError;

/// Quadratic deformation cost: `d1 dx + d2 dx^2 + d3 dy + d4 dy^2` where
/// `dx, dy` is the displacement from the anchor. Convexity needs d2, d4 > 0.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Deformation {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub d4: f64,
}

/// 1D pass: out(p) = max_q f(q) - a (p-q) - b (p-q)^2, with argmax.
/// Written as a min problem over parabolas rooted at each finite q.
fn gdt_1d(f: &[f64], a: f64, b: f64, out: &mut [f64], arg: &mut [usize]) {
    let n = f.len();
    debug_assert!(out.len() == n && arg.len() == n);
    // h(q) = -f(q) - a q; minimize b (p-q)^2 + h(q), then negate and shift.
    let finite: Vec<usize> = (0..n).filter(|&q| f[q].is_finite()).collect();
    if finite.is_empty() {
        for p in 0..n {
            out[p] = f64::NEG_INFINITY;
            arg[p] = p;
        }
        return;
    }
    let h = |q: usize| -f[q] - a * q as f64;

    // Lower envelope of parabolas (Felzenszwalb-Huttenlocher).
    let mut v = vec![0usize; finite.len()];
    let mut z = vec![0.0f64; finite.len() + 1];
    let mut k = 0usize;
    v[0] = finite[0];
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for &q in finite.iter().skip(1) {
        let qf = q as f64;
        loop {
            let vq = v[k] as f64;
            let s = ((h(q) + b * qf * qf) - (h(v[k]) + b * vq * vq)) / (2.0 * b * (qf - vq));
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }

    let mut k = 0usize;
    for p in 0..n {
        let pf = p as f64;
        while z[k + 1] < pf {
            k += 1;
        }
        let q = v[k];
        let d = pf - q as f64;
        out[p] = f[q] - a * d - b * d * d;
        arg[p] = q;
    }
}

/// 2D generalized distance transform over a row-major `w x h` score grid.
/// Returns the envelope and the maximizing source cell (qx, qy) per position.
/// Exact up to floating point: matches the brute-force O(n^4) maximum.
pub fn gdt_2d(
    scores: &[f64],
    w: usize,
    h: usize,
    d: &Deformation,
) -> Result<(Vec<f64>, Vec<(usize, usize)>), DetectError> {
    if !(d.d2 > 0.0 && d.d4 > 0.0) {
        return Err(DetectError::NonConvexDeformation { d2: d.d2, d4: d.d4 });
    }
    assert_eq!(scores.len(), w * h);

    // Pass 1: along x within each row.
    let mut env_x = vec![0.0f64; w * h];
    let mut arg_x = vec![0usize; w * h];
    let mut row_out = vec![0.0f64; w];
    let mut row_arg = vec![0usize; w];
    for y in 0..h {
        gdt_1d(&scores[y * w..(y + 1) * w], d.d1, d.d2, &mut row_out, &mut row_arg);
        env_x[y * w..(y + 1) * w].copy_from_slice(&row_out);
        arg_x[y * w..(y + 1) * w].copy_from_slice(&row_arg);
    }

    // Pass 2: along y within each column.
    let mut env = vec![0.0f64; w * h];
    let mut args = vec![(0usize, 0usize); w * h];
    let mut col_in = vec![0.0f64; h];
    let mut col_out = vec![0.0f64; h];
    let mut col_arg = vec![0usize; h];
    for x in 0..w {
        for y in 0..h {
            col_in[y] = env_x[y * w + x];
        }
        gdt_1d(&col_in, d.d3, d.d4, &mut col_out, &mut col_arg);
        for y in 0..h {
            let qy = col_arg[y];
            env[y * w + x] = col_out[y];
            args[y * w + x] = (arg_x[qy * w + x], qy);
        }
    }
    Ok((env, args))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn brute_force(scores: &[f64], w: usize, h: usize, d: &Deformation) -> Vec<f64> {
        let mut out = vec![f64::NEG_INFINITY; w * h];
        for py in 0..h {
            for px in 0..w {
                for qy in 0..h {
                    for qx in 0..w {
                        let s = scores[qy * w + qx];
                        if !s.is_finite() {
                            continue;
                        }
                        let dx = px as f64 - qx as f64;
                        let dy = py as f64 - qy as f64;
                        let v = s - d.d1 * dx - d.d2 * dx * dx - d.d3 * dy - d.d4 * dy * dy;
                        if v > out[py * w + px] {
                            out[py * w + px] = v;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_brute_force_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..25 {
            let (w, h) = (16, 16);
            let scores: Vec<f64> = (0..w * h).map(|_| rng.random_range(-5.0..5.0)).collect();
            let d = Deformation {
                d1: rng.random_range(-1.0..1.0),
                d2: rng.random_range(0.01..2.0),
                d3: rng.random_range(-1.0..1.0),
                d4: rng.random_range(0.01..2.0),
            };
            let (env, args) = gdt_2d(&scores, w, h, &d).unwrap();
            let truth = brute_force(&scores, w, h, &d);
            for i in 0..w * h {
                assert!(
                    (env[i] - truth[i]).abs() < 1e-9,
                    "trial {trial} cell {i}: {} vs {}",
                    env[i],
                    truth[i]
                );
                // The recorded argmax must reproduce the envelope value.
                let (qx, qy) = args[i];
                let dx = (i % w) as f64 - qx as f64;
                let dy = (i / w) as f64 - qy as f64;
                let v = scores[qy * w + qx] - d.d1 * dx - d.d2 * dx * dx - d.d3 * dy - d.d4 * dy * dy;
                assert!((v - env[i]).abs() < 1e-9, "argmax inconsistent at {i}");
            }
        }
    }

    #[test]
    fn single_finite_score_gives_exact_quadratic() {
        let (w, h) = (12, 10);
        let mut scores = vec![f64::NEG_INFINITY; w * h];
        let (qx, qy) = (7usize, 3usize);
        scores[qy * w + qx] = 2.5;
        let d = Deformation {
            d1: 0.3,
            d2: 0.7,
            d3: -0.2,
            d4: 0.4,
        };
        let (env, args) = gdt_2d(&scores, w, h, &d).unwrap();
        for py in 0..h {
            for px in 0..w {
                let dx = px as f64 - qx as f64;
                let dy = py as f64 - qy as f64;
                let want = 2.5 - d.d1 * dx - d.d2 * dx * dx - d.d3 * dy - d.d4 * dy * dy;
                assert!((env[py * w + px] - want).abs() < 1e-12);
                assert_eq!(args[py * w + px], (qx, qy));
            }
        }
    }

    #[test]
    fn huge_quadratic_cost_reduces_to_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let (w, h) = (9, 7);
        let scores: Vec<f64> = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let d = Deformation {
            d1: 0.0,
            d2: 1e12,
            d3: 0.0,
            d4: 1e12,
        };
        let (env, args) = gdt_2d(&scores, w, h, &d).unwrap();
        for i in 0..w * h {
            assert!((env[i] - scores[i]).abs() < 1e-9);
            assert_eq!(args[i], (i % w, i / w));
        }
    }

    #[test]
    fn all_negative_infinity_propagates() {
        let scores = vec![f64::NEG_INFINITY; 20];
        let d = Deformation {
            d1: 0.0,
            d2: 1.0,
            d3: 0.0,
            d4: 1.0,
        };
        let (env, _) = gdt_2d(&scores, 5, 4, &d).unwrap();
        assert!(env.iter().all(|v| *v == f64::NEG_INFINITY));
    }

    #[test]
    fn non_convex_cost_rejected() {
        let scores = vec![0.0; 4];
        for (d2, d4) in [(0.0, 1.0), (1.0, -0.5)] {
            let d = Deformation {
                d1: 0.0,
                d2,
                d3: 0.0,
                d4,
            };
            assert!(matches!(
                gdt_2d(&scores, 2, 2, &d),
                Err(DetectError::NonConvexDeformation { .. })
            ));
        }
    }
}
