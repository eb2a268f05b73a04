use super::*;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ImageF {
    let data = (0..w * h).map(|_| rng.random_range(0.0..1.0)).collect();
    ImageF::from_data(w, h, 1, data).unwrap()
}

fn random_kernel(rng: &mut ChaCha8Rng, size: usize) -> Kernel2D {
    let taps = (0..size * size)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    Kernel2D::from_taps(size, size, taps).unwrap()
}

// Brute-force correlation oracle: plain quadruple loop, f64 accumulation,
// independent of the production code path.
fn conv_oracle(img: &ImageF, taps: &[f64], size: usize) -> ImageF {
    let r = (size / 2) as i64;
    let mut out = ImageF::new(img.width(), img.height(), 1);
    for y in 0..img.height() as i64 {
        for x in 0..img.width() as i64 {
            let mut acc = 0.0f64;
            for ky in 0..size as i64 {
                for kx in 0..size as i64 {
                    acc += taps[(ky * size as i64 + kx) as usize]
                        * img.get_clamped(x + kx - r, y + ky - r, 0) as f64;
                }
            }
            out.set(x as usize, y as usize, 0, acc as f32);
        }
    }
    out
}

#[test]
fn lab_white_point() {
    let img = ImageF::constant(2, 2, 3, 1.0);
    let lab = rgb_to_lab(&img).unwrap();
    assert!((lab.get(0, 0, 0) - 1.0).abs() < 1e-4, "L = {}", lab.get(0, 0, 0));
    assert!(lab.get(0, 0, 1).abs() < 0.01);
    assert!(lab.get(0, 0, 2).abs() < 0.01);
}

#[test]
fn lab_black_is_zero() {
    let img = ImageF::constant(1, 1, 3, 0.0);
    let lab = rgb_to_lab(&img).unwrap();
    assert_eq!(lab.get(0, 0, 0), 0.0);
    assert!(lab.get(0, 0, 1).abs() < 1e-6);
    assert!(lab.get(0, 0, 2).abs() < 1e-6);
}

#[test]
fn lab_mid_gray_matches_cie_reference() {
    // Frozen from scikit-image rgb2lab (D65, sRGB gamma): L* = 53.388965.
    let img = ImageF::constant(1, 1, 3, 0.5);
    let lab = rgb_to_lab(&img).unwrap();
    assert!(
        (lab.get(0, 0, 0) - 0.533890).abs() < 1e-4,
        "L = {}",
        lab.get(0, 0, 0)
    );
}

#[test]
fn lab_colored_pixel_matches_cie_reference() {
    // Frozen from scikit-image rgb2lab for (0.2, 0.5, 0.8). The tolerance
    // absorbs the difference between published roundings of the sRGB matrix.
    let (l, a, b) = color::rgb_to_lab_px(0.2, 0.5, 0.8);
    assert!((l - 0.5225206).abs() < 1e-4);
    assert!((a - 2.776023).abs() < 5e-3);
    assert!((b - -46.285714).abs() < 5e-3);
}

#[test]
fn lab_rejects_single_channel() {
    let img = ImageF::constant(2, 2, 1, 0.5);
    assert!(matches!(
        rgb_to_lab(&img),
        Err(ImageError::ChannelMismatch { .. })
    ));
}

#[test]
fn lab_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data: Vec<f32> = (0..16 * 16 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
    let img = ImageF::from_data(16, 16, 3, data).unwrap();
    let back = lab_to_rgb(&rgb_to_lab(&img).unwrap()).unwrap();
    assert!(img.approx_eq(&back, 1e-4), "Lab round trip exceeded 1e-4");
}

#[test]
fn convolve_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let img = random_image(&mut rng, 13, 9);
    let out = convolve(&img, &Kernel2D::identity()).unwrap();
    assert!(img.approx_eq(&out, 0.0));
}

#[test]
fn convolve_zero_sum_on_constant() {
    let img = ImageF::constant(12, 12, 1, 0.4);
    let k = Kernel2D::from_taps(3, 3, vec![1.0, -2.0, 1.0, 0.5, -1.0, 0.5, 1.0, -2.0, 1.0])
        .unwrap();
    assert!((k.sum()).abs() < 1e-12);
    let out = convolve(&img, &k).unwrap();
    assert!(out.data().iter().all(|v| v.abs() < 1e-6));
}

#[test]
fn convolve_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let img = random_image(&mut rng, 16, 16);
    let k = random_kernel(&mut rng, 5);
    let got = convolve(&img, &k).unwrap();
    let want = conv_oracle(&img, k.taps(), 5);
    assert!(got.approx_eq(&want, 1e-12));
}

#[test]
fn convolve_linearity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let i1 = random_image(&mut rng, 10, 10);
        let i2 = random_image(&mut rng, 10, 10);
        let k = random_kernel(&mut rng, 3);
        let (a, b) = (
            rng.random_range(-2.0f32..2.0),
            rng.random_range(-2.0f32..2.0),
        );
        let mixed_data = i1
            .data()
            .iter()
            .zip(i2.data())
            .map(|(p, q)| a * p + b * q)
            .collect();
        let mixed = ImageF::from_data(10, 10, 1, mixed_data).unwrap();
        let lhs = convolve(&mixed, &k).unwrap();
        let c1 = convolve(&i1, &k).unwrap();
        let c2 = convolve(&i2, &k).unwrap();
        for i in 0..lhs.data().len() {
            let rhs = a * c1.data()[i] + b * c2.data()[i];
            assert!((lhs.data()[i] - rhs).abs() < 1e-4, "linearity violated");
        }
    }
}

#[test]
fn separable_matches_dense() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let img = random_image(&mut rng, 12, 12);
        let col: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let row: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sep = Kernel2D::from_factors(col.clone(), row.clone()).unwrap();
        let dense = Kernel2D::from_taps(3, 5, sep.taps().to_vec()).unwrap();
        let a = convolve(&img, &sep).unwrap();
        let b = convolve(&img, &dense).unwrap();
        assert!(a.approx_eq(&b, 1e-6));
    }
}

#[test]
fn with_factors_rejects_mismatched_product() {
    let dense = Kernel2D::from_taps(3, 3, vec![1.0; 9]).unwrap();
    let err = dense
        .with_factors(vec![1.0, 1.0, 1.0], vec![1.0, 2.0, 1.0])
        .unwrap_err();
    assert!(matches!(err, ImageError::NotSeparable(_)));
}

#[test]
fn kernel_rejects_even_sides() {
    assert!(matches!(
        Kernel2D::from_taps(2, 3, vec![0.0; 6]),
        Err(ImageError::EvenKernel(2, 3))
    ));
}

#[test]
fn downsample_constant_stays_constant() {
    let img = ImageF::constant(10, 8, 1, 0.7);
    let out = downsample_half(&img).unwrap();
    assert_eq!((out.width(), out.height()), (5, 4));
    assert!(out.data().iter().all(|v| (v - 0.7).abs() < 1e-5));
}

#[test]
fn downsample_dimension_arithmetic() {
    let img = ImageF::new(680, 440, 1);
    let out = downsample_half(&img).unwrap();
    assert_eq!((out.width(), out.height()), (340, 220));
    let odd = ImageF::new(7, 5, 1);
    let out = downsample_half(&odd).unwrap();
    assert_eq!((out.width(), out.height()), (4, 3));
}

#[test]
fn downsample_preserves_impulse_mass() {
    let mut img = ImageF::new(32, 32, 1);
    img.set(16, 16, 0, 1.0);
    // Oracle: blur the impulse, then sum the decimated lattice in f64.
    let blurred = convolve(&img, &Kernel2D::gaussian(0.8)).unwrap();
    let mut expected = 0.0f64;
    for y in (0..32).step_by(2) {
        for x in (0..32).step_by(2) {
            expected += blurred.get(x, y, 0) as f64;
        }
    }
    let out = downsample_half(&img).unwrap();
    let got: f64 = out.data().iter().map(|&v| v as f64).sum();
    assert!((got - expected).abs() < 1e-9);
    // Decimated mass stays within 2% of the impulse mass scaled by 1/4 of
    // nothing -- the blur preserves total mass, decimation keeps ~1/4 of it;
    // on an even lattice centered at the impulse it keeps the even-phase sum.
    assert!((got - 0.25).abs() < 0.25 * 0.5, "mass {got}");
}

#[test]
fn downsample_rejects_degenerate() {
    let img = ImageF::new(1, 5, 1);
    assert!(matches!(
        downsample_half(&img),
        Err(ImageError::TooSmall(1, 5))
    ));
}

#[test]
fn ppm_round_trip_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("frame.ppm");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // Quantized values so the 8-bit round trip is exact.
    let data: Vec<f32> = (0..8 * 6 * 3)
        .map(|_| rng.random_range(0u32..256) as f32 / 255.0)
        .collect();
    let img = ImageF::from_data(8, 6, 3, data).unwrap();
    write_ppm(&img, &path).unwrap();
    let back = read_ppm(&path).unwrap();
    assert!(img.approx_eq(&back, 0.0), "PPM round trip not bit exact");
}

#[test]
fn ppm_rejects_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.ppm");
    std::fs::write(&path, b"P3\n2 2\n255\n").unwrap();
    assert!(matches!(read_ppm(&path), Err(ImageError::Format { .. })));
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn convolution_scales_linearly(seed in 0u64..1000, scale in -3.0f32..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = random_image(&mut rng, 8, 8);
            let k = random_kernel(&mut rng, 3);
            let scaled_data = img.data().iter().map(|v| v * scale).collect();
            let scaled = ImageF::from_data(8, 8, 1, scaled_data).unwrap();
            let a = convolve(&scaled, &k).unwrap();
            let b = convolve(&img, &k).unwrap();
            for i in 0..a.data().len() {
                prop_assert!((a.data()[i] - scale * b.data()[i]).abs() < 1e-4);
            }
        }
    }
}
