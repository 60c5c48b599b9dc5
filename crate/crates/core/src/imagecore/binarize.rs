use super::{BinaryMask, Image};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum BinarizeMethod {
    #[default]
    Otsu,
    Fixed(f64),
}

/// Result of [`binarize`]: the mask plus the threshold actually applied.
#[derive(Debug, Clone, PartialEq)]
pub struct Binarization {
    pub mask: BinaryMask,
    pub threshold: f64,
    /// Set when Otsu found no separable classes and `Fixed(0.5)` was used.
    pub otsu_fallback: bool,
}

/// Marks pixels strictly darker than the threshold as foreground.
pub fn binarize(img: &Image, method: BinarizeMethod) -> Binarization {
    let (threshold, otsu_fallback) = match method {
        BinarizeMethod::Fixed(t) => (t, false),
        BinarizeMethod::Otsu => match otsu_threshold(img) {
            Some(t) => (t, false),
            None => (0.5, true),
        },
    };
    let bits = img.data().iter().map(|v| *v < threshold).collect();
    let mask = BinaryMask::new(img.height(), img.width(), bits)
        .expect("mask dims follow image dims");
    Binarization {
        mask,
        threshold,
        otsu_fallback,
    }
}

/// Otsu's threshold on a 256-bin histogram of `round(v * 255)`.
///
/// Returns the intensity `(t + 0.5) / 255` separating bins `<= t` from the
/// rest, or `None` when the between-class variance is zero everywhere
/// (constant image).
pub fn otsu_threshold(img: &Image) -> Option<f64> {
    let mut hist = [0u64; 256];
    for v in img.data() {
        hist[(v * 255.0).round().clamp(0.0, 255.0) as usize] += 1;
    }
    let total = img.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, c)| i as f64 * *c as f64).sum();

    let mut best_t = None;
    let mut best_var = 0.0;
    let mut w0 = 0.0;
    let mut sum0 = 0.0;
    for (t, count) in hist.iter().enumerate().take(255) {
        w0 += *count as f64;
        sum0 += t as f64 * *count as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best_t = Some(t);
        }
    }
    best_t.map(|t| (t as f64 + 0.5) / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_threshold_diagonal() {
        let img = Image::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let b = binarize(&img, BinarizeMethod::Fixed(0.5));
        assert!(b.mask.is_foreground(0, 0));
        assert!(b.mask.is_foreground(1, 1));
        assert!(!b.mask.is_foreground(0, 1));
        assert_eq!(b.mask.foreground_count(), 2);
    }

    #[test]
    fn all_white_has_no_foreground() {
        let img = Image::filled(8, 5, 1.0).unwrap();
        let b = binarize(&img, BinarizeMethod::Fixed(0.5));
        assert_eq!(b.mask.foreground_count(), 0);
        assert_eq!(b.mask.background_count(), 40);
    }

    #[test]
    fn synthetic_glyph_with_known_ink_area() {
        // 32x32 ink block = 1024 pixels on a 64x64 canvas.
        let img = Image::from_fn(64, 64, |r, c| {
            if (16..48).contains(&r) && (16..48).contains(&c) {
                0.1
            } else {
                0.95
            }
        })
        .unwrap();
        let brute = img.data().iter().filter(|v| **v < 0.5).count();
        assert_eq!(brute, 1024);
        let b = binarize(&img, BinarizeMethod::Fixed(0.5));
        assert_eq!(b.mask.foreground_count(), 1024);
        assert_eq!(b.mask.background_count(), 3072);
        let o = binarize(&img, BinarizeMethod::Otsu);
        assert_eq!(o.mask, b.mask);
        assert!(!o.otsu_fallback);
    }

    #[test]
    fn constant_image_falls_back_under_otsu() {
        let img = Image::filled(4, 4, 0.3).unwrap();
        let b = binarize(&img, BinarizeMethod::Otsu);
        assert!(b.otsu_fallback);
        assert_eq!(b.threshold, 0.5);
        assert_eq!(b.mask.foreground_count(), 16);
    }

    #[test]
    fn otsu_splits_bimodal_histogram() {
        let img = Image::from_fn(10, 10, |r, _| if r < 3 { 0.2 } else { 0.8 }).unwrap();
        let t = otsu_threshold(&img).unwrap();
        assert!(t > 0.2 && t < 0.8);
        assert_eq!(binarize(&img, BinarizeMethod::Otsu).mask.foreground_count(), 30);
    }
}
