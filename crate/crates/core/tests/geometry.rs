use msmatch_core::geometry::{
    dlt_homography, four_point_from_matrix, image_corners, matrix_from_four_point, sample_homography, warp_image,
    warp_points, weighted_dlt_homography,
};
use msmatch_core::{Border, GrayImage, Homography, HomographySampleConfig, ImageDims};
use nalgebra::Point2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn scalar_apply(m: [f64; 9], x: f64, y: f64) -> (f64, f64) {
    let w = m[6] * x + m[7] * y + m[8];
    ((m[0] * x + m[1] * y + m[2]) / w, (m[3] * x + m[4] * y + m[5]) / w)
}

#[test]
fn four_point_round_trip_on_sampled_homographies() {
    let dims = ImageDims::new(128, 96);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let h = sample_homography(&HomographySampleConfig::training(), dims, &mut rng).unwrap();
        let d = four_point_from_matrix(&h, dims).unwrap();
        let back = matrix_from_four_point(&d, dims).unwrap();
        let a = warp_points(&image_corners(dims), &h).unwrap();
        let b = warp_points(&image_corners(dims), &back).unwrap();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).norm() < 1e-6);
        }
    }
}

#[test]
fn warp_points_matches_scalar_formula() {
    let dims = ImageDims::new(64, 64);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pts: Vec<_> = (0..20).map(|i| Point2::new(i as f64 * 3.1, 60.0 - i as f64 * 2.7)).collect();
    for _ in 0..100 {
        let h = sample_homography(&HomographySampleConfig::evaluation(), dims, &mut rng).unwrap();
        let m = h.to_row_major();
        for (p, q) in pts.iter().zip(warp_points(&pts, &h).unwrap()) {
            let (x, y) = scalar_apply(m, p.x, p.y);
            assert!((x - q.x).abs() < 1e-9 && (y - q.y).abs() < 1e-9);
        }
    }
}

#[test]
fn translation_warp_shifts_pixels() {
    let img = GrayImage::from_fn(16, 12, |r, c| (r * 16 + c) as f64 / 192.0);
    let out = warp_image(&img, &Homography::translation(3.0, 2.0), Border::Zero).unwrap();
    for r in 2..12 {
        for c in 3..16 {
            assert!((out.get(r, c) - img.get(r - 2, c - 3)).abs() < 1e-12);
        }
    }
    assert_eq!(out.get(0, 0), 0.0);
}

#[test]
fn dlt_recovers_exact_correspondences() {
    let h = Homography::from_row_major([1.1, 0.05, 3.0, -0.02, 0.95, -4.0, 1e-4, -2e-4, 1.0]).unwrap();
    let src: Vec<_> = [(0.0, 0.0), (50.0, 3.0), (47.0, 61.0), (2.0, 55.0), (25.0, 30.0)]
        .iter()
        .map(|&(x, y)| Point2::new(x, y))
        .collect();
    let dst = warp_points(&src, &h).unwrap();
    let est = dlt_homography(&src, &dst).unwrap();
    for (a, b) in est.to_row_major().iter().zip(h.to_row_major()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn weighted_dlt_ignores_zero_weight_points() {
    let h = Homography::from_row_major([0.9, -0.1, 5.0, 0.08, 1.05, 2.0, -1e-4, 2e-4, 1.0]).unwrap();
    let mut src: Vec<_> = [(1.0, 2.0), (60.0, 5.0), (55.0, 58.0), (4.0, 50.0), (30.0, 20.0)]
        .iter()
        .map(|&(x, y)| Point2::new(x, y))
        .collect();
    let mut dst = warp_points(&src, &h).unwrap();
    src.push(Point2::new(10.0, 10.0));
    dst.push(Point2::new(90.0, -30.0));
    let w = [1.0, 2.0, 0.5, 1.0, 3.0, 0.0];
    let est = weighted_dlt_homography(&src, &dst, &w).unwrap();
    for (a, b) in est.to_row_major().iter().zip(h.to_row_major()) {
        assert!((a - b).abs() < 1e-9);
    }
    assert!(weighted_dlt_homography(&src, &dst, &w[..5]).is_err());
    assert!(weighted_dlt_homography(&src, &dst, &[1.0, 1.0, 1.0, 1.0, 1.0, -1.0]).is_err());
}

proptest! {
    #[test]
    fn inverse_composes_to_identity(seed in any::<u64>()) {
        let dims = ImageDims::new(80, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = sample_homography(&HomographySampleConfig::training(), dims, &mut rng).unwrap();
        let id = h.compose(&h.inverse().unwrap()).unwrap();
        for (a, b) in id.to_row_major().iter().zip(Homography::identity().to_row_major()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn sampled_homographies_keep_corners_finite(seed in any::<u64>()) {
        let dims = ImageDims::new(128, 128);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = sample_homography(&HomographySampleConfig::evaluation(), dims, &mut rng).unwrap();
        let corners = warp_points(&image_corners(dims), &h).unwrap();
        prop_assert!(corners.iter().all(|p| p.x.is_finite() && p.y.is_finite()));
    }

    #[test]
    fn sampling_is_deterministic(seed in any::<u64>()) {
        let dims = ImageDims::new(64, 48);
        let a = sample_homography(&HomographySampleConfig::training(), dims, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let b = sample_homography(&HomographySampleConfig::training(), dims, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(a, b);
    }
}
