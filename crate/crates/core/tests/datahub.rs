use msmatch_core::datahub::{
    label_path, load_dataset, make_train_sample, read_label, synth_pair, write_label, LabelRecord, SampleConfig,
    SynthStyle,
};
use msmatch_core::geometry::warp_points;
use msmatch_core::{GrayImage, ImageDims, Keypoint, KeypointSet};
use nalgebra::Point2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn edges(img: &GrayImage) -> Vec<bool> {
    let (gx, gy) = img.gaussian_blur(1.0).sobel();
    let mag: Vec<f64> = gx.data().iter().zip(gy.data()).map(|(a, b)| (a * a + b * b).sqrt()).collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    mag.iter().map(|&m| m > 0.3 * max).collect()
}

fn near(map: &[bool], w: usize, h: usize, r: usize, c: usize) -> bool {
    (r.saturating_sub(1)..=(r + 1).min(h - 1)).any(|rr| (c.saturating_sub(1)..=(c + 1).min(w - 1)).any(|cc| map[rr * w + cc]))
}

#[test]
fn spectra_share_geometry_but_not_intensity() {
    let dims = ImageDims::new(64, 64);
    let mut corr_sum = 0.0;
    let mut overlap_sum = 0.0;
    for seed in 0..100 {
        let p = synth_pair(seed, dims, &SynthStyle::default()).unwrap();
        let (a, b) = (p.image_a.data(), p.image_b.data());
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        corr_sum += cov / (va * vb).sqrt();

        let (ea, eb) = (edges(&p.image_a), edges(&p.image_b));
        let strong: Vec<usize> = (0..ea.len()).filter(|&i| ea[i]).collect();
        let hit = strong.iter().filter(|&&i| near(&eb, 64, 64, i / 64, i % 64)).count();
        overlap_sum += hit as f64 / strong.len().max(1) as f64;
    }
    assert!(corr_sum / 100.0 < 0.1, "mean correlation {}", corr_sum / 100.0);
    assert!(overlap_sum / 100.0 > 0.8, "edge overlap {}", overlap_sum / 100.0);
}

#[test]
fn dataset_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for seed in 0..3 {
        synth_pair(seed, ImageDims::new(32, 24), &SynthStyle::default()).unwrap().save(dir.path()).unwrap();
    }
    let ds = load_dataset(dir.path()).unwrap();
    assert_eq!(ds.len(), 3);
    let p = ds.get(1).unwrap();
    assert_eq!(p.dims(), ImageDims::new(32, 24));
    let orig = synth_pair(1, ImageDims::new(32, 24), &SynthStyle::default()).unwrap();
    // 8-bit storage
    for (x, y) in p.image_a.data().iter().zip(orig.image_a.data()) {
        assert!((x - y).abs() <= 0.5 / 255.0 + 1e-12);
    }
}

#[test]
fn label_file_round_trip_keeps_precision() {
    let dir = tempfile::tempdir().unwrap();
    let rec = LabelRecord {
        pair_id: "p".into(),
        width: 100,
        height: 100,
        seed: 3,
        config: serde_json::json!({"n": 1}),
        keypoints: (0..10_000).map(|i| Keypoint::new((i % 100) as f64, (i / 100) as f64, 1.0 / (i + 3) as f64)).collect(),
    };
    let path = label_path(dir.path(), "p");
    write_label(&path, &rec).unwrap();
    assert_eq!(read_label(&path).unwrap(), rec);
}

#[test]
fn malformed_label_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.json");
    std::fs::write(&path, "{ not json").unwrap();
    assert!(matches!(read_label(&path), Err(msmatch_core::Error::BadLabelFile { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn train_sample_labels_follow_the_warp(seed in any::<u64>()) {
        let pair = synth_pair(seed % 50, ImageDims::new(64, 64), &SynthStyle::default()).unwrap();
        let kps = KeypointSet::new((0..30).map(|i| Keypoint::new(((i * 37) % 64) as f64, ((i * 23) % 64) as f64, 1.0)).collect());
        let cfg = SampleConfig { crop: 32, ..SampleConfig::default() };
        let s = make_train_sample(&pair, &kps, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(s.src.dims(), ImageDims::new(32, 32));
        let inv = s.h_gt.inverse().unwrap();
        let bound = 0.5 * 2f64.sqrt() * 8.0 + 1.0;
        for h in 0..4 {
            for w in 0..4 {
                if let Some((r, c)) = s.labels_dst.decode(h, w) {
                    let back = warp_points(&[Point2::new(c as f64, r as f64)], &inv).unwrap()[0];
                    let best = s.keypoints_src.iter().map(|k| ((k.x - back.x).powi(2) + (k.y - back.y).powi(2)).sqrt()).fold(f64::INFINITY, f64::min);
                    prop_assert!(best <= bound, "{best}");
                }
            }
        }
    }
}
