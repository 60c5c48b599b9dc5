use glyphforge::imagecore::{binarize, decode_image, load_image, otsu_threshold, resize, save_image, BinarizeMethod, Image};
use proptest::prelude::*;

/// Between-class variance of splitting the 8-bit levels at `t`, from the
/// quantized pixel list directly.
fn split_variance(levels: &[f64], t: f64) -> f64 {
    let (lo, hi): (Vec<f64>, Vec<f64>) = levels.iter().partition(|v| **v <= t);
    if lo.is_empty() || hi.is_empty() {
        return 0.0;
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let n = levels.len() as f64;
    let (w0, w1) = (lo.len() as f64 / n, hi.len() as f64 / n);
    w0 * w1 * (mean(&lo) - mean(&hi)).powi(2)
}

fn image(h: usize, w: usize) -> impl Strategy<Value = Image> {
    prop::collection::vec(0.0f64..=1.0, h * w).prop_map(move |d| Image::new(h, w, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn otsu_maximizes_between_class_variance(img in image(6, 7)) {
        let levels: Vec<f64> = img.data().iter().map(|v| (v * 255.0).round()).collect();
        let best = (0..255).map(|t| split_variance(&levels, t as f64)).fold(0.0, f64::max);
        match otsu_threshold(&img) {
            Some(th) => {
                let t = th * 255.0 - 0.5;
                prop_assert!((t - t.round()).abs() < 1e-9);
                prop_assert!((split_variance(&levels, t.round()) - best).abs() <= 1e-12 * (1.0 + best));
                let b = binarize(&img, BinarizeMethod::Otsu);
                prop_assert!(!b.otsu_fallback);
                prop_assert_eq!(b.mask.foreground_count(), levels.iter().filter(|v| **v <= t.round()).count());
            }
            None => prop_assert_eq!(best, 0.0),
        }
    }

    #[test]
    fn png_round_trip_within_half_step(img in image(5, 9)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        save_image(&img, &p).unwrap();
        let back = load_image(&p).unwrap();
        prop_assert_eq!((back.height(), back.width()), (5, 9));
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        // A second trip is exact.
        let q = dir.path().join("b.png");
        save_image(&back, &q).unwrap();
        prop_assert_eq!(load_image(&q).unwrap(), back);
    }

    #[test]
    fn resize_stays_within_input_range(img in image(7, 5), h in 1usize..20, w in 1usize..20) {
        let out = resize(&img, h, w).unwrap();
        let lo = img.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = img.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(out.data().iter().all(|v| *v >= lo - 1e-12 && *v <= hi + 1e-12));
        if h > 1 && w > 1 {
            // Corners are sampled exactly.
            prop_assert!((out.get(0, 0) - img.get(0, 0)).abs() < 1e-12);
            prop_assert!((out.get(h - 1, w - 1) - img.get(6, 4)).abs() < 1e-12);
        }
    }

    #[test]
    fn inversion_is_an_involution(img in image(4, 4)) {
        prop_assert!(img.inverted().inverted().mean_abs_diff(&img).unwrap() < 1e-15);
        prop_assert!((img.mean_abs_diff(&img.inverted()).unwrap()
            - img.data().iter().map(|v| (2.0 * v - 1.0).abs()).sum::<f64>() / 16.0).abs() < 1e-12);
    }
}

#[test]
fn garbage_bytes_do_not_decode() {
    assert!(decode_image(b"definitely not an image").is_err());
    assert!(decode_image(b"P5\n2 2\n255\n\x00").is_err());
}
