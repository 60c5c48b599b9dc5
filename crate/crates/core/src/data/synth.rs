use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imagecore::{save_image, Image};

use super::{DataError, DatasetManifest, ManifestEntry, MANIFEST_FILE};

/// Arc strokes are flattened into this many segments before rasterizing.
const ARC_SEGMENTS: usize = 16;

/// One pen stroke in unit canvas coordinates (`(x, y)`, origin top-left).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Stroke {
    Line {
        from: [f64; 2],
        to: [f64; 2],
    },
    Arc {
        center: [f64; 2],
        radius: f64,
        start: f64,
        sweep: f64,
    },
}

impl Stroke {
    fn polyline(&self) -> Vec<[f64; 2]> {
        match *self {
            Stroke::Line { from, to } => vec![from, to],
            Stroke::Arc {
                center,
                radius,
                start,
                sweep,
            } => (0..=ARC_SEGMENTS)
                .map(|i| {
                    let a = start + sweep * i as f64 / ARC_SEGMENTS as f64;
                    [center[0] + radius * a.cos(), center[1] + radius * a.sin()]
                })
                .collect(),
        }
    }

    /// Every point of the stroke lies in the unit canvas.
    pub fn in_bounds(&self) -> bool {
        self.polyline()
            .iter()
            .all(|p| (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]))
    }
}

/// The stroke skeleton shared by every instance of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlyphTemplate {
    pub strokes: Vec<Stroke>,
}

impl GlyphTemplate {
    /// Random lines and arcs kept inside the central `[0.2, 0.8]` square.
    pub fn random(min_strokes: usize, max_strokes: usize, rng: &mut impl Rng) -> Self {
        let n = rng.random_range(min_strokes..=max_strokes);
        let strokes = (0..n)
            .map(|_| {
                if rng.random_bool(0.7) {
                    let mut p = || -> [f64; 2] { [rng.random_range(0.2..0.8), rng.random_range(0.2..0.8)] };
                    let from = p();
                    let mut to = p();
                    while (to[0] - from[0]).hypot(to[1] - from[1]) < 0.2 {
                        to = p();
                    }
                    Stroke::Line { from, to }
                } else {
                    Stroke::Arc {
                        center: [rng.random_range(0.4..0.6), rng.random_range(0.4..0.6)],
                        radius: rng.random_range(0.1..0.2),
                        start: rng.random_range(0.0..2.0 * PI),
                        sweep: rng.random_range(0.5 * PI..1.5 * PI),
                    }
                }
            })
            .collect();
        Self { strokes }
    }
}

/// Per-instance geometric variation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Jitter {
    /// Max rotation in radians.
    pub rotation: f64,
    /// Max relative scale change.
    pub scale: f64,
    pub shear: f64,
    /// Max translation in unit canvas coordinates.
    pub translation: f64,
    /// Max relative stroke width change; applied to the textured domain only.
    pub width: f64,
}

impl Default for Jitter {
    fn default() -> Self {
        Self {
            rotation: 0.15,
            scale: 0.1,
            shear: 0.1,
            translation: 0.05,
            width: 0.3,
        }
    }
}

/// Background corruption for the textured domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextureProfile {
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise_amplitude: f64,
    /// Expected number of elliptical blotches per image.
    pub blotch_density: f64,
    /// Subtracted from every pixel before noise; positive darkens.
    pub brightness_bias: f64,
}

impl Default for TextureProfile {
    fn default() -> Self {
        Self {
            noise_amplitude: 0.08,
            blotch_density: 3.0,
            brightness_bias: 0.15,
        }
    }
}

impl TextureProfile {
    pub fn clean() -> Self {
        Self {
            noise_amplitude: 0.0,
            blotch_density: 0.0,
            brightness_bias: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticGlyphSpec {
    pub num_classes: usize,
    pub image_size: usize,
    pub min_strokes: usize,
    pub max_strokes: usize,
    /// Pen width as a fraction of the canvas side.
    pub stroke_width: f64,
    pub jitter: Jitter,
    pub texture: TextureProfile,
}

impl Default for SyntheticGlyphSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            image_size: 64,
            min_strokes: 2,
            max_strokes: 5,
            stroke_width: 0.06,
            jitter: Jitter::default(),
            texture: TextureProfile::default(),
        }
    }
}

impl SyntheticGlyphSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::Spec(m));
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.image_size < 8 {
            return bad(format!("image size {} below 8", self.image_size));
        }
        if self.min_strokes == 0 || self.min_strokes > self.max_strokes {
            return bad(format!("stroke range {}..={}", self.min_strokes, self.max_strokes));
        }
        if !(self.stroke_width > 0.0 && self.stroke_width < 0.5) {
            return bad(format!("stroke width {}", self.stroke_width));
        }
        let j = &self.jitter;
        if !(0.0..=0.5).contains(&j.rotation)
            || !(0.0..=0.2).contains(&j.scale)
            || !(0.0..=0.2).contains(&j.shear)
            || !(0.0..=0.1).contains(&j.translation)
            || !(0.0..1.0).contains(&j.width)
        {
            return bad(format!("jitter out of range: {j:?}"));
        }
        let t = &self.texture;
        if !(0.0..=1.0).contains(&t.noise_amplitude) {
            return bad(format!("noise amplitude {} outside [0, 1]", t.noise_amplitude));
        }
        if !(t.blotch_density >= 0.0 && t.blotch_density <= 100.0) {
            return bad(format!("blotch density {}", t.blotch_density));
        }
        if !(-1.0..=1.0).contains(&t.brightness_bias) {
            return bad(format!("brightness bias {}", t.brightness_bias));
        }
        Ok(())
    }
}

/// Images of one synthetic domain with per-image labels and stroke counts.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDomain {
    pub images: Vec<Image>,
    pub labels: Vec<String>,
    pub strokes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub templates: Vec<GlyphTemplate>,
    pub sc: SynthDomain,
    pub pc: SynthDomain,
}

pub fn class_label(i: usize) -> String {
    format!("class_{i:02}")
}

/// Affine map about the canvas center: rotation, anisotropic scale, shear, shift.
fn random_affine(j: &Jitter, rng: &mut impl Rng) -> [f64; 6] {
    let mut u = |m: f64| if m > 0.0 { rng.random_range(-m..=m) } else { 0.0 };
    let rot = u(j.rotation);
    let (sx, sy) = (1.0 + u(j.scale), 1.0 + u(j.scale));
    let sh = u(j.shear);
    let (tx, ty) = (u(j.translation), u(j.translation));
    let (c, s) = (rot.cos(), rot.sin());
    // R * [[sx, sh], [0, sy]]
    let a = c * sx;
    let b = c * sh - s * sy;
    let d = s * sx;
    let e = s * sh + c * sy;
    [a, b, 0.5 + tx, d, e, 0.5 + ty]
}

fn apply(m: &[f64; 6], p: [f64; 2]) -> [f64; 2] {
    let (x, y) = (p[0] - 0.5, p[1] - 0.5);
    [m[0] * x + m[1] * y + m[2], m[3] * x + m[4] * y + m[5]]
}

fn segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy)
}

/// Ink coverage in `[0, 1]` per pixel: a pen of `width` pixels with a
/// one-pixel linear falloff.
fn coverage(template: &GlyphTemplate, affine: &[f64; 6], size: usize, width: f64) -> Vec<f64> {
    let scale = size as f64;
    let segments: Vec<([f64; 2], [f64; 2])> = template
        .strokes
        .iter()
        .flat_map(|s| {
            let pts: Vec<[f64; 2]> = s
                .polyline()
                .into_iter()
                .map(|p| {
                    let q = apply(affine, p);
                    [q[0] * scale, q[1] * scale]
                })
                .collect();
            pts.windows(2).map(|w| (w[0], w[1])).collect::<Vec<_>>()
        })
        .collect();
    let half = width / 2.0;
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        for c in 0..size {
            let p = [c as f64 + 0.5, r as f64 + 0.5];
            let d = segments
                .iter()
                .map(|(a, b)| segment_distance(p, *a, *b))
                .fold(f64::INFINITY, f64::min);
            out.push((half + 0.5 - d).clamp(0.0, 1.0));
        }
    }
    out
}

/// Dark strokes on white: `1 - coverage`.
pub fn render_glyph(template: &GlyphTemplate, affine: &[f64; 6], size: usize, width_px: f64) -> Image {
    let data = coverage(template, affine, size, width_px).into_iter().map(|c| 1.0 - c).collect();
    Image::from_clamped(size, size, data).expect("square canvas")
}

fn add_texture(ink: Vec<f64>, size: usize, profile: &TextureProfile, rng: &mut impl Rng) -> Image {
    let mut px: Vec<f64> = ink.iter().map(|c| 1.0 - c - profile.brightness_bias).collect();
    let whole = profile.blotch_density.floor();
    let n_blotches = whole as usize + usize::from(rng.random_bool(profile.blotch_density - whole));
    let s = size as f64;
    for _ in 0..n_blotches {
        let (cx, cy) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
        let (ra, rb) = (rng.random_range(0.03..0.12) * s, rng.random_range(0.03..0.12) * s);
        let phi: f64 = rng.random_range(0.0..PI);
        let depth: f64 = rng.random_range(0.1..0.35);
        let (cp, sp) = (phi.cos(), phi.sin());
        for r in 0..size {
            for c in 0..size {
                let (dx, dy) = (c as f64 + 0.5 - cx, r as f64 + 0.5 - cy);
                let u = (dx * cp + dy * sp) / ra;
                let v = (-dx * sp + dy * cp) / rb;
                let q = u * u + v * v;
                if q < 1.0 {
                    px[r * size + c] -= depth * (1.0 - q);
                }
            }
        }
    }
    if profile.noise_amplitude > 0.0 {
        let normal = Normal::new(0.0, profile.noise_amplitude).expect("finite sigma");
        for v in px.iter_mut() {
            *v += normal.sample(rng);
        }
    }
    Image::from_clamped(size, size, px).expect("square canvas")
}

/// Renders `samples_per_class` SC and PC instances of each class.
///
/// SC instances are clean strokes under an affine jitter. PC instances are
/// drawn independently with affine and width jitter, then darkened,
/// blotched and noised per the texture profile.
pub fn synth_generate(spec: &SyntheticGlyphSpec, samples_per_class: usize, seed: u64) -> Result<SynthCorpus, DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates: Vec<GlyphTemplate> = (0..spec.num_classes)
        .map(|_| GlyphTemplate::random(spec.min_strokes, spec.max_strokes, &mut rng))
        .collect();
    let size = spec.image_size;
    let base_width = spec.stroke_width * size as f64;
    let empty = || SynthDomain {
        images: Vec::new(),
        labels: Vec::new(),
        strokes: Vec::new(),
    };
    let (mut sc, mut pc) = (empty(), empty());
    for (k, t) in templates.iter().enumerate() {
        for _ in 0..samples_per_class {
            let m = random_affine(&spec.jitter, &mut rng);
            sc.images.push(render_glyph(t, &m, size, base_width));
            sc.labels.push(class_label(k));
            sc.strokes.push(t.strokes.len());
        }
        for _ in 0..samples_per_class {
            let m = random_affine(&spec.jitter, &mut rng);
            let w = spec.jitter.width;
            let width = base_width * (1.0 + if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 });
            let ink = coverage(t, &m, size, width);
            pc.images.push(add_texture(ink, size, &spec.texture, &mut rng));
            pc.labels.push(class_label(k));
            pc.strokes.push(t.strokes.len());
        }
    }
    Ok(SynthCorpus { templates, sc, pc })
}

fn write_domain(domain: &SynthDomain, root: &Path, size: usize) -> Result<DatasetManifest, DataError> {
    let mut entries = Vec::with_capacity(domain.images.len());
    let mut counters = std::collections::BTreeMap::<&str, usize>::new();
    for ((img, label), strokes) in domain.images.iter().zip(&domain.labels).zip(&domain.strokes) {
        let n = counters.entry(label).or_default();
        let rel = Path::new(label).join(format!("{:04}.png", *n));
        *n += 1;
        let dir = root.join(label);
        fs::create_dir_all(&dir).map_err(|source| DataError::Io { path: dir, source })?;
        let path = root.join(&rel);
        save_image(img, &path).map_err(|source| DataError::Image { path, source })?;
        entries.push(ManifestEntry {
            path: rel,
            label: label.clone(),
            strokes: Some(*strokes),
        });
    }
    let manifest = DatasetManifest {
        root: root.to_path_buf(),
        image_size: size,
        entries,
        skipped: Vec::new(),
    };
    manifest.save(root.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Writes `out/sc/<class>/NNNN.png` and `out/pc/...`, each domain with its
/// own `manifest.json`.
pub fn write_corpus(corpus: &SynthCorpus, out: impl AsRef<Path>) -> Result<(DatasetManifest, DatasetManifest), DataError> {
    let out = out.as_ref();
    let size = corpus.sc.images.first().or(corpus.pc.images.first()).map_or(0, |i| i.height());
    let sc = write_domain(&corpus.sc, &out.join("sc"), size)?;
    let pc = write_domain(&corpus.pc, &out.join("pc"), size)?;
    fs::write(
        out.join("templates.json"),
        serde_json::to_string_pretty(&corpus.templates).expect("templates serialize"),
    )
    .map_err(|source| DataError::Io {
        path: out.join("templates.json"),
        source,
    })?;
    Ok((sc, pc))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_templates_stay_on_canvas() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let t = GlyphTemplate::random(1, 6, &mut rng);
            assert!(t.strokes.iter().all(Stroke::in_bounds));
        }
    }

    #[test]
    fn single_horizontal_line_inks_expected_band() {
        let t = GlyphTemplate {
            strokes: vec![Stroke::Line {
                from: [0.0, 0.5],
                to: [1.0, 0.5],
            }],
        };
        let id = [1.0, 0.0, 0.5, 0.0, 1.0, 0.5];
        // Width 3 at y = 32: pixel centers 0.5 px away are fully inked,
        // 1.5 px away half inked.
        let img = render_glyph(&t, &id, 64, 3.0);
        for r in 0..64 {
            let expect = match r {
                31 | 32 => 0.0,
                30 | 33 => 0.5,
                _ => 1.0,
            };
            for c in 0..64 {
                assert_eq!(img.get(r, c), expect, "row {r} col {c}");
            }
        }
    }
}
