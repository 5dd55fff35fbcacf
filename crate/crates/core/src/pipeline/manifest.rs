//! Manifest JSON: a list of annotated photos with split labels.
//!
//! ```json
//! {
//!   "version": 1,
//!   "layout": { "cell_rows": 5, "cell_cols": 14, "cell_px": 4, "cm_per_cell": 1.0 },
//!   "photos": [
//!     { "id": "a", "split": "train", "identity": 0,
//!       "photo": "images/a.png",
//!       "cells": [ { "id": 0, "patch": [[x, y], ...4], "photo": [[x, y], ...4] } ],
//!       "landmarks": [[x, y], ...5] }
//!   ]
//! }
//! ```
//!
//! Instead of inline `photo`/`cells`/`landmarks`, an entry may reference a
//! standalone annotation file via `"annotation": "path.json"` holding those
//! three keys. Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{io_error, CapturePhoto, PatchLayout, PipelineError, Result, Split};
use crate::geometry::{quad_is_non_degenerate, CellCorrespondence, Point2};
use crate::image::load_image;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layout: Option<PatchLayout>,
    pub photos: Vec<ManifestEntry>,
}

fn default_version() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub photo: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cells: Vec<RawCell>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub landmarks: Vec<Point2>,
}

/// Cell as written in the file; corner counts are validated on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawCell {
    pub id: i64,
    pub patch: Vec<Point2>,
    pub photo: Vec<Point2>,
}

impl From<&CellCorrespondence> for RawCell {
    fn from(c: &CellCorrespondence) -> Self {
        RawCell {
            id: c.id,
            patch: c.patch_corners.to_vec(),
            photo: c.photo_corners.to_vec(),
        }
    }
}

/// Standalone per-photo annotation file.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Annotation {
    photo: PathBuf,
    cells: Vec<RawCell>,
    landmarks: Vec<Point2>,
}

impl ManifestEntry {
    pub fn from_photo(photo: &CapturePhoto, image_path: PathBuf) -> Self {
        ManifestEntry {
            id: photo.id.clone(),
            split: photo.split,
            identity: photo.identity,
            annotation: None,
            photo: Some(image_path),
            cells: photo.cells.iter().map(RawCell::from).collect(),
            landmarks: photo.landmarks.clone(),
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => PipelineError::MissingFile(path.display().to_string()),
        _ => io_error(path, e),
    })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    read_json(path)
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest).map_err(|e| PipelineError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn convert_cells(photo_id: &str, raw: &[RawCell]) -> Result<Vec<CellCorrespondence>> {
    let malformed = |message: String| PipelineError::MalformedAnnotation {
        photo: photo_id.to_string(),
        message,
    };
    let mut seen = HashSet::new();
    raw.iter()
        .map(|c| {
            if !seen.insert(c.id) {
                return Err(malformed(format!("cell {} appears twice", c.id)));
            }
            let quad = |pts: &[Point2], side: &str| -> Result<[Point2; 4]> {
                let arr: [Point2; 4] = pts.try_into().map_err(|_| {
                    malformed(format!(
                        "cell {} has {} {side} corners, expected 4",
                        c.id,
                        pts.len()
                    ))
                })?;
                if !quad_is_non_degenerate(&arr) {
                    return Err(malformed(format!(
                        "cell {} has a degenerate {side} quad",
                        c.id
                    )));
                }
                Ok(arr)
            };
            Ok(CellCorrespondence {
                id: c.id,
                patch_corners: quad(&c.patch, "patch")?,
                photo_corners: quad(&c.photo, "photo")?,
            })
        })
        .collect()
}

/// Loads and validates every photo listed in a manifest.
pub fn load_attack_inputs(manifest_path: &Path) -> Result<Vec<CapturePhoto>> {
    let manifest = load_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut ids = HashSet::new();
    let mut photos = Vec::with_capacity(manifest.photos.len());
    for entry in &manifest.photos {
        if !ids.insert(entry.id.clone()) {
            return Err(PipelineError::DuplicateId(entry.id.clone()));
        }
        let malformed = |message: &str| PipelineError::MalformedAnnotation {
            photo: entry.id.clone(),
            message: message.to_string(),
        };
        let (photo_path, cells, landmarks, photo_base) = match &entry.annotation {
            Some(ann_path) => {
                if entry.photo.is_some() || !entry.cells.is_empty() || !entry.landmarks.is_empty() {
                    return Err(malformed(
                        "both an annotation file and inline annotation given",
                    ));
                }
                let ann_path = resolve(base, ann_path);
                let ann: Annotation = read_json(&ann_path)?;
                let ann_base = ann_path.parent().unwrap_or(base).to_path_buf();
                (ann.photo, ann.cells, ann.landmarks, ann_base)
            }
            None => {
                let photo = entry
                    .photo
                    .clone()
                    .ok_or_else(|| malformed("no photo path"))?;
                (
                    photo,
                    entry.cells.clone(),
                    entry.landmarks.clone(),
                    base.to_path_buf(),
                )
            }
        };
        let photo_path = resolve(&photo_base, &photo_path);
        if !photo_path.is_file() {
            return Err(PipelineError::MissingFile(photo_path.display().to_string()));
        }
        let image = load_image(&photo_path)?;
        if image.channels() != 3 && image.channels() != 1 {
            return Err(malformed("photo must be grayscale or RGB"));
        }
        let image = if image.channels() == 1 {
            image.replicate_channels(3)
        } else {
            image
        };
        let cells = convert_cells(&entry.id, &cells)?;
        if landmarks.len() != 5 {
            return Err(malformed(&format!(
                "{} landmarks, expected 5",
                landmarks.len()
            )));
        }
        let (rows, cols) = image.shape();
        for (index, p) in landmarks.iter().enumerate() {
            let inside = p.is_finite()
                && p.x >= -0.5
                && p.y >= -0.5
                && p.x <= cols as f64 - 0.5
                && p.y <= rows as f64 - 0.5;
            if !inside {
                return Err(PipelineError::LandmarkOutOfBounds {
                    photo: entry.id.clone(),
                    index,
                    x: p.x,
                    y: p.y,
                    rows,
                    cols,
                });
            }
        }
        photos.push(CapturePhoto {
            id: entry.id.clone(),
            split: entry.split,
            identity: entry.identity,
            image,
            cells,
            landmarks,
        });
    }
    Ok(photos)
}
