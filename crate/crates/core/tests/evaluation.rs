use msmatch_core::evaluation::{corner_accuracy, matching_score, repeatability};
use msmatch_core::geometry::{image_corners, sample_homography};
use msmatch_core::matching::Match;
use msmatch_core::{Homography, HomographySampleConfig, ImageDims, Keypoint, KeypointSet, MatchSet};
use nalgebra::Point2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn map(m: [f64; 9], x: f64, y: f64) -> (f64, f64) {
    let w = m[6] * x + m[7] * y + m[8];
    ((m[0] * x + m[1] * y + m[2]) / w, (m[3] * x + m[4] * y + m[5]) / w)
}

fn inside(d: ImageDims, (x, y): (f64, f64)) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (d.width - 1) as f64 && y <= (d.height - 1) as f64
}

fn random_kps(rng: &mut ChaCha8Rng, n: usize, d: ImageDims) -> KeypointSet {
    KeypointSet::new(
        (0..n)
            .map(|_| Keypoint::new(rng.random_range(-4.0..d.width as f64 + 4.0), rng.random_range(-4.0..d.height as f64 + 4.0), 1.0))
            .collect(),
    )
}

fn instance(seed: u64) -> (KeypointSet, KeypointSet, Homography, ImageDims) {
    let d = ImageDims::new(64, 48);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = sample_homography(&HomographySampleConfig::evaluation(), d, &mut rng).unwrap();
    let a = random_kps(&mut rng, 30, d);
    // half of image two's points are noisy reprojections of image one's
    let mut pts: Vec<Keypoint> = a
        .iter()
        .take(15)
        .map(|k| {
            let (x, y) = map(h.to_row_major(), k.x, k.y);
            Keypoint::new(x + rng.random_range(-6.0..6.0), y + rng.random_range(-6.0..6.0), 1.0)
        })
        .collect();
    pts.extend(random_kps(&mut rng, 15, d).points);
    (a, KeypointSet::new(pts), h, d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn repeatability_matches_reference(seed in any::<u64>()) {
        let (a, b, h, d) = instance(seed);
        let (m, mi) = (h.to_row_major(), h.inverse().unwrap().to_row_major());
        let va: Vec<_> = a.iter().filter(|k| inside(d, (k.x, k.y)) && inside(d, map(m, k.x, k.y))).map(|k| map(m, k.x, k.y)).collect();
        let vb: Vec<_> = b.iter().filter(|k| inside(d, (k.x, k.y)) && inside(d, map(mi, k.x, k.y))).map(|k| (k.x, k.y)).collect();
        let ua: Vec<_> = a.iter().filter(|k| inside(d, (k.x, k.y)) && inside(d, map(m, k.x, k.y))).map(|k| (k.x, k.y)).collect();
        let ub: Vec<_> = b.iter().filter(|k| inside(d, (k.x, k.y)) && inside(d, map(mi, k.x, k.y))).map(|k| map(mi, k.x, k.y)).collect();
        let close = |p: (f64, f64), q: (f64, f64)| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt() <= 3.0;
        let ca = va.iter().filter(|&&p| vb.iter().any(|&q| close(p, q))).count();
        let cb = ub.iter().filter(|&&p| ua.iter().any(|&q| close(p, q))).count();
        let want = if va.is_empty() && vb.is_empty() { 0.0 } else { (ca + cb) as f64 / (va.len() + vb.len()) as f64 };
        prop_assert!((repeatability(&a, &b, &h, d, 3.0).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn matching_score_matches_reference(seed in any::<u64>()) {
        let (a, b, h, d) = instance(seed);
        let (m, mi) = (h.to_row_major(), h.inverse().unwrap().to_row_major());
        let pairs: Vec<Match> = (0..30).map(|i| Match { index_a: i, index_b: (i * 7) % 30, distance: 0.0 }).chain((0..15).map(|i| Match { index_a: i, index_b: i, distance: 0.0 })).collect();
        let ms = MatchSet { pairs: pairs.clone(), inlier: None };
        let ok_a = |k: &Keypoint| inside(d, (k.x, k.y)) && inside(d, map(m, k.x, k.y));
        let ok_b = |k: &Keypoint| inside(d, (k.x, k.y)) && inside(d, map(mi, k.x, k.y));
        let n1 = a.iter().filter(|k| ok_a(k)).count();
        let n2 = b.iter().filter(|k| ok_b(k)).count();
        let c = pairs.iter().filter(|p| {
            let (ka, kb) = (a.points[p.index_a], b.points[p.index_b]);
            let q = map(m, ka.x, ka.y);
            ok_a(&ka) && ok_b(&kb) && ((q.0 - kb.x).powi(2) + (q.1 - kb.y).powi(2)).sqrt() <= 3.0
        }).count() as f64;
        let r = |n: usize| if n == 0 { 0.0 } else { c / n as f64 };
        let want = 0.5 * (r(n1) + r(n2));
        prop_assert!((matching_score(&ms, &a, &b, &h, d, 3.0).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn corner_accuracy_matches_reference(seed in any::<u64>()) {
        let d = ImageDims::new(64, 64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt = sample_homography(&HomographySampleConfig::evaluation(), d, &mut rng).unwrap();
        let est = sample_homography(&HomographySampleConfig { rotation_deg: 2.0, scale_frac: 0.02, translation_frac: 0.03, perspective_frac: 0.01, ..HomographySampleConfig::evaluation() }, d, &mut rng).unwrap().compose(&gt).unwrap();
        let eps: Vec<f64> = (1..=10).map(f64::from).collect();
        let errs: Vec<f64> = image_corners(d).iter().map(|c: &Point2<f64>| {
            let (p, q) = (map(est.to_row_major(), c.x, c.y), map(gt.to_row_major(), c.x, c.y));
            ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt()
        }).collect();
        let got = corner_accuracy(&est, &gt, d, &eps);
        for (g, e) in got.iter().zip(&eps) {
            let want = errs.iter().filter(|&&x| x <= *e).count() as f64 / 4.0;
            prop_assert!((g - want).abs() < 1e-9);
        }
    }
}

#[test]
fn translation_error_is_a_step_at_three() {
    let d = ImageDims::new(40, 30);
    let gt = Homography::from_row_major([1.0, 0.1, 2.0, 0.0, 0.9, 1.0, 0.0, 0.0, 1.0]).unwrap();
    let est = Homography::translation(3.0, 0.0).compose(&gt).unwrap();
    let eps: Vec<f64> = (1..=10).map(f64::from).collect();
    let acc = corner_accuracy(&est, &gt, d, &eps);
    for (a, e) in acc.iter().zip(&eps) {
        assert_eq!(*a, if *e < 3.0 { 0.0 } else { 1.0 });
    }
}
