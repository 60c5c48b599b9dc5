//! Directory-per-class corpora and a synthetic SC/PC glyph generator.

mod synth;

pub use synth::{
    class_label, render_glyph, synth_generate, write_corpus, GlyphTemplate, Jitter, Stroke, SynthCorpus, SynthDomain,
    SyntheticGlyphSpec, TextureProfile,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imagecore::{load_image, resize, Image, ImageError, ImageFormat};

/// File name of the manifest written next to generated corpora.
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no classes found under {0}")]
    NoClasses(PathBuf),
    #[error("{0} is not a directory")]
    NotADirectory(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ImageError,
    },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
    #[error("manifest {path}: {reason}")]
    Manifest { path: PathBuf, reason: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Relative to the manifest root.
    pub path: PathBuf,
    pub label: String,
    /// Number of strokes the glyph was drawn with, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strokes: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedFile {
    pub path: PathBuf,
    pub reason: String,
}

/// An enumerated corpus. Images are decoded and resized on [`load`](Self::load).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub image_size: usize,
    pub entries: Vec<ManifestEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<SkippedFile>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labels(&self) -> Vec<&str> {
        let mut v: Vec<&str> = self.entries.iter().map(|e| e.label.as_str()).collect();
        v.dedup();
        v
    }

    /// Decodes entry `i`, resized to `image_size` and optionally inverted.
    pub fn load(&self, i: usize, invert: bool) -> Result<Image, DataError> {
        let path = self.root.join(&self.entries[i].path);
        let img = load_image(&path).map_err(|source| DataError::Image {
            path: path.clone(),
            source,
        })?;
        let img = if img.height() != self.image_size || img.width() != self.image_size {
            resize(&img, self.image_size, self.image_size).map_err(|source| DataError::Image { path, source })?
        } else {
            img
        };
        Ok(if invert { img.inverted() } else { img })
    }

    pub fn load_all(&self, invert: bool) -> Result<Vec<Image>, DataError> {
        (0..self.len()).map(|i| self.load(i, invert)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let path = path.as_ref();
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        fs::write(path, json).map_err(io_err(path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self, DataError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

fn sorted_dir(path: &Path) -> Result<Vec<PathBuf>, DataError> {
    let mut v = fs::read_dir(path)
        .map_err(io_err(path))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(path))?;
    v.sort();
    Ok(v)
}

/// Enumerates `root/<class>/<file>.{png,pgm}` in lexicographic order.
///
/// Every file is decoded once to validate it; undecodable files are listed
/// in `skipped` rather than failing the scan. Stroke counts are picked up
/// from a `manifest.json` in `root` when present.
pub fn scan_dataset(root: impl AsRef<Path>, image_size: usize) -> Result<DatasetManifest, DataError> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(DataError::NotADirectory(root.to_path_buf()));
    }
    let known: BTreeMap<PathBuf, Option<usize>> = match DatasetManifest::read(root.join(MANIFEST_FILE)) {
        Ok(m) => m.entries.into_iter().map(|e| (e.path, e.strokes)).collect(),
        Err(_) => BTreeMap::new(),
    };
    let mut entries = Vec::new();
    let mut skipped = Vec::new();
    let mut classes = 0;
    for class_dir in sorted_dir(root)?.into_iter().filter(|p| p.is_dir()) {
        let label = class_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        if label.is_empty() {
            continue;
        }
        classes += 1;
        for file in sorted_dir(&class_dir)? {
            if !file.is_file() || ImageFormat::from_path(&file).is_none() {
                continue;
            }
            let rel = file.strip_prefix(root).expect("under root").to_path_buf();
            match load_image(&file) {
                Ok(_) => entries.push(ManifestEntry {
                    strokes: known.get(&rel).copied().flatten(),
                    path: rel,
                    label: label.clone(),
                }),
                Err(e) => skipped.push(SkippedFile {
                    path: rel,
                    reason: e.to_string(),
                }),
            }
        }
    }
    if classes == 0 {
        return Err(DataError::NoClasses(root.to_path_buf()));
    }
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        image_size,
        entries,
        skipped,
    })
}

fn collect_images(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), DataError> {
    for p in sorted_dir(dir)? {
        if p.is_dir() {
            collect_images(&p, out)?;
        } else if ImageFormat::from_path(&p).is_some() {
            out.push(p);
        }
    }
    Ok(())
}

/// Every PNG/PGM under `root` (recursively, lexicographic order), resized
/// to `image_size`. Unlike [`scan_dataset`] no class layout is required and
/// an undecodable file is an error.
pub fn load_image_dir(root: impl AsRef<Path>, image_size: usize, invert: bool) -> Result<Vec<Image>, DataError> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(DataError::NotADirectory(root.to_path_buf()));
    }
    let mut paths = Vec::new();
    collect_images(root, &mut paths)?;
    paths
        .into_iter()
        .map(|path| {
            let img = load_image(&path).map_err(|source| DataError::Image {
                path: path.clone(),
                source,
            })?;
            let img = if img.height() != image_size || img.width() != image_size {
                resize(&img, image_size, image_size).map_err(|source| DataError::Image { path, source })?
            } else {
                img
            };
            Ok(if invert { img.inverted() } else { img })
        })
        .collect()
}
