use std::fs;
use std::path::Path;

use glyphforge::data::{scan_dataset, synth_generate, write_corpus, DataError, DatasetManifest, SyntheticGlyphSpec, TextureProfile};
use glyphforge::imagecore::{binarize, save_image, BinarizeMethod, Image};
use proptest::prelude::*;

fn put(dir: &Path, name: &str, img: &Image) {
    fs::create_dir_all(dir).unwrap();
    save_image(img, dir.join(name)).unwrap();
}

fn gradient(h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |r, c| (r + c) as f64 / (h + w) as f64).unwrap()
}

#[test]
fn scan_counts_entries_and_labels() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    for i in 0..2 {
        put(&root.join("a"), &format!("{i}.png"), &gradient(16, 16));
    }
    for i in 0..3 {
        put(&root.join("b"), &format!("{i}.pgm"), &gradient(20, 12));
    }
    fs::write(root.join("b").join("notes.txt"), "ignored").unwrap();
    let m = scan_dataset(root, 32).unwrap();
    assert_eq!(m.len(), 5);
    assert_eq!(m.labels(), vec!["a", "b"]);
    assert!(m.skipped.is_empty());
    let paths: Vec<String> = m.entries.iter().map(|e| e.path.display().to_string()).collect();
    assert_eq!(paths, ["a/0.png", "a/1.png", "b/0.pgm", "b/1.pgm", "b/2.pgm"]);
    for i in 0..m.len() {
        let img = m.load(i, false).unwrap();
        assert_eq!((img.height(), img.width()), (32, 32));
    }
}

#[test]
fn empty_root_has_no_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let err = scan_dataset(tmp.path(), 64).unwrap_err();
    assert!(matches!(err, DataError::NoClasses(_)));
    assert!(err.to_string().contains("no classes found"));
}

#[test]
fn corrupt_file_is_reported_not_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    put(&root.join("a"), "good.png", &gradient(8, 8));
    fs::write(root.join("a").join("broken.png"), b"\x89PNG\r\n\x1a\nnot really").unwrap();
    let m = scan_dataset(root, 8).unwrap();
    assert_eq!(m.len(), 1);
    assert_eq!(m.skipped.len(), 1);
    assert_eq!(m.skipped[0].path, Path::new("a").join("broken.png"));
    assert!(!m.skipped[0].reason.is_empty());
}

#[test]
fn inverted_load_flips_intensities() {
    let tmp = tempfile::tempdir().unwrap();
    let img = Image::from_fn(8, 8, |r, _| if r < 4 { 0.0 } else { 1.0 }).unwrap();
    put(&tmp.path().join("x"), "0.png", &img);
    let m = scan_dataset(tmp.path(), 8).unwrap();
    let inv = m.load(0, true).unwrap();
    assert_eq!(inv.get(0, 0), 1.0);
    assert_eq!(inv.get(7, 7), 0.0);
}

#[test]
fn two_classes_ten_each() {
    let spec = SyntheticGlyphSpec::default();
    let c = synth_generate(&spec, 10, 1).unwrap();
    for d in [&c.sc, &c.pc] {
        assert_eq!(d.images.len(), 20);
        assert_eq!(d.labels.len(), 20);
        for img in &d.images {
            assert_eq!((img.height(), img.width()), (64, 64));
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

#[test]
fn clean_profile_leaves_white_background() {
    let spec = SyntheticGlyphSpec {
        texture: TextureProfile::clean(),
        ..SyntheticGlyphSpec::default()
    };
    let c = synth_generate(&spec, 4, 9).unwrap();
    for img in &c.pc.images {
        // Anything not touched by the pen is exactly white.
        let white = img.data().iter().filter(|v| **v == 1.0).count();
        let inked = img.data().iter().filter(|v| **v < 1.0).count();
        assert!(white > img.len() / 2);
        assert!(inked > 0);
    }
    // Noise, blotches and bias all move the background off white.
    let noisy = synth_generate(&SyntheticGlyphSpec::default(), 4, 9).unwrap();
    for img in &noisy.pc.images {
        let white = img.data().iter().filter(|v| **v == 1.0).count();
        assert!(white < img.len() / 2);
    }
}

#[test]
fn jittered_glyphs_stay_off_the_border() {
    let spec = SyntheticGlyphSpec {
        num_classes: 1,
        texture: TextureProfile::clean(),
        ..SyntheticGlyphSpec::default()
    };
    let c = synth_generate(&spec, 3, 4).unwrap();
    for img in &c.pc.images {
        let dark_border = (0..64).any(|i| img.get(0, i) < 1.0 || img.get(63, i) < 1.0 || img.get(i, 0) < 1.0 || img.get(i, 63) < 1.0);
        assert!(!dark_border, "glyph reaches the border");
    }
}

#[test]
fn same_seed_same_corpus() {
    let spec = SyntheticGlyphSpec::default();
    let a = synth_generate(&spec, 5, 42).unwrap();
    let b = synth_generate(&spec, 5, 42).unwrap();
    assert_eq!(a, b);
    let c = synth_generate(&spec, 5, 43).unwrap();
    assert_ne!(a.sc.images, c.sc.images);
}

#[test]
fn rejects_bad_noise_amplitude() {
    let mut spec = SyntheticGlyphSpec::default();
    spec.texture.noise_amplitude = 1.5;
    assert!(matches!(synth_generate(&spec, 1, 0), Err(DataError::Spec(_))));
}

#[test]
fn written_corpus_round_trips_with_stroke_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let c = synth_generate(&SyntheticGlyphSpec::default(), 3, 5).unwrap();
    let (sc, pc) = write_corpus(&c, tmp.path()).unwrap();
    assert_eq!(sc.len(), 6);
    let rescanned = scan_dataset(tmp.path().join("sc"), 64).unwrap();
    assert_eq!(rescanned.entries, sc.entries);
    let reread = DatasetManifest::read(tmp.path().join("pc").join("manifest.json")).unwrap();
    assert_eq!(reread, pc);
    // PNG stores 8 bits per pixel.
    let loaded = rescanned.load(0, false).unwrap();
    let diff = loaded
        .data()
        .iter()
        .zip(c.sc.images[0].data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff <= 0.5 / 255.0 + 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sc_masks_are_proper(seed in any::<u64>(), classes in 1usize..4) {
        let spec = SyntheticGlyphSpec { num_classes: classes, ..SyntheticGlyphSpec::default() };
        let c = synth_generate(&spec, 2, seed).unwrap();
        for img in &c.sc.images {
            let b = binarize(img, BinarizeMethod::Otsu);
            let fg = b.mask.foreground_count();
            prop_assert!(!b.otsu_fallback);
            prop_assert!(fg > 0 && fg < img.len());
        }
    }

    #[test]
    fn classes_share_topology_but_not_pixels(seed in any::<u64>()) {
        let c = synth_generate(&SyntheticGlyphSpec::default(), 3, seed).unwrap();
        for k in 0..c.templates.len() {
            let n = c.templates[k].strokes.len();
            for d in [&c.sc, &c.pc] {
                for (i, label) in d.labels.iter().enumerate() {
                    if *label == glyphforge::data::class_label(k) {
                        prop_assert_eq!(d.strokes[i], n);
                    }
                }
            }
        }
        for (s, p) in c.sc.images.iter().zip(&c.pc.images) {
            prop_assert!(s != p);
        }
        prop_assert!(c.templates.iter().flat_map(|t| &t.strokes).all(|s| s.in_bounds()));
    }
}

#[test]
fn flat_and_nested_directories_load_in_path_order() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    put(root, "b.png", &Image::filled(8, 8, 0.2).unwrap());
    put(&root.join("a"), "z.pgm", &Image::filled(4, 4, 0.6).unwrap());
    fs::write(root.join("readme.txt"), "x").unwrap();
    let imgs = glyphforge::data::load_image_dir(root, 8, false).unwrap();
    assert_eq!(imgs.len(), 2);
    // "a/z.pgm" sorts before "b.png"; the 4x4 file is resized.
    assert!((imgs[0].get(3, 3) - 0.6).abs() <= 0.5 / 255.0);
    assert!((imgs[1].get(0, 0) - 0.2).abs() <= 0.5 / 255.0);
    assert_eq!(imgs[0].height(), 8);
    fs::write(root.join("bad.png"), b"nope").unwrap();
    assert!(glyphforge::data::load_image_dir(root, 8, false).is_err());
}
