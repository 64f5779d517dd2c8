use std::fs;

use gesture_video::eval::{apply_mask, evaluate_run, frechet_distance, psnr, ssim, PooledProjection, Psnr};
use gesture_video::imaging::{frame_name, save_mask, save_rgb, Mask};
use image::{Rgb, RgbImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(seed: u64, w: u32, h: u32) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
}

/// Independent SSIM: separable weights built from scratch, statistics as
/// weighted sums over each valid window.
fn ssim_oracle(a: &RgbImage, b: &RgbImage) -> f64 {
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let z: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (6.5025, 58.5225);
    let (w, h) = a.dimensions();
    let mut acc = 0.0;
    let mut n = 0.0;
    for ch in 0..3 {
        for oy in 0..=h - 11 {
            for ox in 0..=w - 11 {
                let mut s = [0.0; 5];
                for dy in 0..11 {
                    for dx in 0..11 {
                        let wt = g[dy as usize] * g[dx as usize] / z;
                        let x = a.get_pixel(ox + dx, oy + dy).0[ch] as f64;
                        let y = b.get_pixel(ox + dx, oy + dy).0[ch] as f64;
                        s[0] += wt * x;
                        s[1] += wt * y;
                        s[2] += wt * x * x;
                        s[3] += wt * y * y;
                        s[4] += wt * x * y;
                    }
                }
                let (mx, my) = (s[0], s[1]);
                let (vx, vy, cxy) = (s[2] - mx * mx, s[3] - my * my, s[4] - mx * my);
                acc += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                n += 1.0;
            }
        }
    }
    acc / n
}

#[test]
fn ssim_of_identical_images_is_one() {
    for seed in 0..3 {
        let x = random_image(seed, 24, 19);
        assert_eq!(ssim(&x, &x).unwrap(), 1.0);
    }
}

#[test]
fn ssim_of_inverted_checkerboard_is_negative() {
    let board = RgbImage::from_fn(16, 16, |x, y| if (x + y) % 2 == 0 { Rgb([255; 3]) } else { Rgb([0; 3]) });
    let inv = RgbImage::from_fn(16, 16, |x, y| {
        let p = board.get_pixel(x, y).0;
        Rgb([255 - p[0], 255 - p[1], 255 - p[2]])
    });
    let got = ssim(&board, &inv).unwrap();
    let want = ssim_oracle(&board, &inv);
    assert!(got < 0.0);
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn ssim_of_constants_is_the_luminance_term() {
    let (a, b) = (100.0, 180.0);
    let x = RgbImage::from_pixel(16, 16, Rgb([a as u8; 3]));
    let y = RgbImage::from_pixel(16, 16, Rgb([b as u8; 3]));
    let c1 = (0.01f64 * 255.0).powi(2);
    let want = (2.0 * a * b + c1) / (a * a + b * b + c1);
    assert!((ssim(&x, &y).unwrap() - want).abs() < 1e-9);
}

#[test]
fn ssim_matches_oracle_on_random_pairs() {
    for seed in 0..3 {
        let a = random_image(seed, 20, 17);
        let b = random_image(seed + 100, 20, 17);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-10);
    }
}

#[test]
fn ssim_rejects_size_mismatch() {
    assert!(ssim(&random_image(0, 16, 16), &random_image(0, 17, 16)).is_err());
    assert!(psnr(&random_image(0, 16, 16), &random_image(0, 17, 16)).is_err());
}

#[test]
fn psnr_anchors() {
    let x = random_image(1, 8, 8);
    assert_eq!(psnr(&x, &x).unwrap(), Psnr::Identical);
    let black = RgbImage::from_pixel(8, 8, Rgb([0; 3]));
    let white = RgbImage::from_pixel(8, 8, Rgb([255; 3]));
    assert!(psnr(&black, &white).unwrap().db().unwrap().abs() < 1e-12);
    let off = RgbImage::from_pixel(8, 8, Rgb([16; 3]));
    let db = psnr(&black, &off).unwrap().db().unwrap();
    let want = 10.0 * (255.0f64 * 255.0 / 256.0).log10();
    assert!((db - want).abs() < 1e-12);
    assert!((db - 24.05).abs() < 0.01);
}

#[test]
fn psnr_decreases_as_error_grows() {
    let base = RgbImage::from_pixel(8, 8, Rgb([10; 3]));
    let mut last = f64::INFINITY;
    for e in 1..=24u8 {
        let y = RgbImage::from_pixel(8, 8, Rgb([10 + e * 10; 3]));
        let db = psnr(&base, &y).unwrap().db().unwrap();
        assert!(db < last);
        last = db;
    }
}

fn gaussian_set(n: usize, d: usize, mean: f64, sd: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..d).map(|_| mean + sd * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
        .collect()
}

/// Rescales a 1-D set to an exact sample mean and unbiased variance.
fn standardize(v: &[Vec<f64>], mean: f64, sd: f64) -> Vec<Vec<f64>> {
    let n = v.len() as f64;
    let m = v.iter().map(|x| x[0]).sum::<f64>() / n;
    let s = (v.iter().map(|x| (x[0] - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    v.iter().map(|x| vec![mean + sd * (x[0] - m) / s]).collect()
}

#[test]
fn scalar_frechet_cases() {
    let base = gaussian_set(50, 1, 0.0, 1.0, 3);
    let a = standardize(&base, 0.0, 1.0);
    let b = standardize(&gaussian_set(40, 1, 0.0, 1.0, 4), 3.0, 1.0);
    assert!((frechet_distance(&a, &b).unwrap() - 9.0).abs() < 1e-8);
    let c = standardize(&base, 0.0, 2.0);
    assert!((frechet_distance(&a, &c).unwrap() - 1.0).abs() < 1e-8);
}

#[test]
fn frechet_self_distance_vanishes() {
    for d in [1, 4, 8, 20] {
        let x = gaussian_set(12, d, 0.5, 2.0, d as u64);
        assert!(frechet_distance(&x, &x).unwrap() <= 1e-8);
    }
}

#[test]
fn frechet_rejects_dimension_mismatch() {
    let a = gaussian_set(5, 3, 0.0, 1.0, 1);
    let b = gaussian_set(5, 4, 0.0, 1.0, 2);
    assert!(frechet_distance(&a, &b).is_err());
}

#[test]
fn masking_anchors() {
    let frames = vec![random_image(5, 12, 10), random_image(6, 12, 10)];
    let ones = vec![Mask::filled(12, 10, true); 2];
    assert_eq!(apply_mask(&frames, &ones).unwrap(), frames);
    let zeros = vec![Mask::filled(12, 10, false); 2];
    for f in apply_mask(&frames, &zeros).unwrap() {
        assert!(f.as_raw().iter().all(|v| *v == 0));
    }
    let half = vec![Mask::from_fn(12, 10, |x, _| x < 6); 2];
    let out = apply_mask(&frames, &half).unwrap();
    for (o, f) in out.iter().zip(&frames) {
        for (x, y, p) in o.enumerate_pixels() {
            let want = if x < 6 { f.get_pixel(x, y).0 } else { [0; 3] };
            assert_eq!(p.0, want);
        }
    }
    assert!(apply_mask(&frames, &half[..1]).is_err());
}

#[test]
fn self_evaluation_and_permutation() {
    let dir = tempfile::tempdir().unwrap();
    let (gen, refd, masks) = (dir.path().join("gen"), dir.path().join("ref"), dir.path().join("masks"));
    for d in [&gen, &refd, &masks] {
        fs::create_dir_all(d).unwrap();
    }
    let n = 10;
    let frames: Vec<RgbImage> = (0..n).map(|i| random_image(i, 16, 16)).collect();
    for (i, f) in frames.iter().enumerate() {
        save_rgb(&gen.join(frame_name(i)), f).unwrap();
        save_rgb(&refd.join(frame_name(i)), &random_image(100 + i as u64, 16, 16)).unwrap();
        save_mask(&masks.join(frame_name(i)), &Mask::filled(16, 16, true)).unwrap();
    }
    let ex = PooledProjection::default();
    let report_path = dir.path().join("r.json");
    let same = evaluate_run(&gen, &gen, None, &ex, Some(&report_path)).unwrap();
    assert_eq!(same.frame_count, n as usize);
    assert_eq!(same.ssim_mean, 1.0);
    assert_eq!(same.psnr_mean, Psnr::Identical);
    assert!(same.frechet.unwrap() <= 1e-8);
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(json["psnr_mean"], "identical");
    assert_eq!(json["masked"], false);
    assert_eq!(json["frames"].as_array().unwrap().len(), n as usize);

    let before = evaluate_run(&gen, &refd, Some(&masks), &ex, None).unwrap();
    assert!(before.masked);
    // reverse the generated order
    let shuffled = dir.path().join("shuf");
    fs::create_dir_all(&shuffled).unwrap();
    for (i, f) in frames.iter().rev().enumerate() {
        save_rgb(&shuffled.join(frame_name(i)), f).unwrap();
    }
    let after = evaluate_run(&shuffled, &refd, Some(&masks), &ex, None).unwrap();
    assert!((before.frechet.unwrap() - after.frechet.unwrap()).abs() < 1e-9);
    let per_frame = |r: &gesture_video::eval::MetricsReport| r.frames.iter().map(|f| f.ssim).collect::<Vec<_>>();
    assert_ne!(per_frame(&before), per_frame(&after));
}

#[test]
fn evaluation_rejects_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    fs::create_dir_all(&a).unwrap();
    fs::create_dir_all(&b).unwrap();
    for i in 0..3 {
        save_rgb(&a.join(frame_name(i)), &random_image(i as u64, 16, 16)).unwrap();
    }
    save_rgb(&b.join(frame_name(0)), &random_image(0, 16, 16)).unwrap();
    assert!(evaluate_run(&a, &b, None, &PooledProjection::default(), None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn ssim_is_symmetric_and_bounded(s1 in 0u64..1000, s2 in 0u64..1000) {
        let a = random_image(s1, 14, 13);
        let b = random_image(s2, 14, 13);
        let ab = ssim(&a, &b).unwrap();
        let ba = ssim(&b, &a).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn masking_is_idempotent(seed in 0u64..1000, cut in 0u32..12) {
        let frames = vec![random_image(seed, 12, 9)];
        let m = vec![Mask::from_fn(12, 9, |x, y| (x + y) % 3 == 0 || x < cut)];
        let once = apply_mask(&frames, &m).unwrap();
        prop_assert_eq!(apply_mask(&once, &m).unwrap(), once);
    }

    #[test]
    fn frechet_is_nonnegative(seed in 0u64..1000, shift in -2.0f64..2.0) {
        let a = gaussian_set(9, 3, 0.0, 1.0, seed);
        let b = gaussian_set(7, 3, shift, 1.5, seed + 1);
        prop_assert!(frechet_distance(&a, &b).unwrap() >= 0.0);
    }
}
