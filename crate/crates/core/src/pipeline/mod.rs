//! Data ingestion and artifacts around the attack: manifests of annotated
//! photos, synthetic identities, chessboards, printable patches and reports.

mod layout;
mod manifest;
mod report;
mod synthetic;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embednet::{EmbedError, Embedding, ModelCheckpoint};
use crate::geometry::{
    precompute_alignment_grid, precompute_patch_grid, CellCorrespondence, GeometryError,
    LandmarkTemplate, Point2,
};
use crate::image::{ImageError, ImageTensor};
use crate::losses::PhotoGrids;
use crate::sampler::{align_face, SamplerError};

pub use layout::{
    export_patch, exported_dpi, generate_chessboard, load_exported_patch, ExportInfo, PatchLayout,
    LAYOUT_TEXT_KEY,
};
pub use manifest::{
    load_attack_inputs, load_manifest, save_manifest, Manifest, ManifestEntry, RawCell,
};
pub use report::{
    format_mean_sem, load_evaluation, render_row, render_table, write_evaluation, write_report,
    ReportFiles, ReportRow, StoredEvaluation, EMPTY_CELL, REPORT_COLUMNS,
};
pub use synthetic::{generate_synthetic_identities, SyntheticDataset, SyntheticIdentitySpec};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("missing file {0}")]
    MissingFile(String),
    #[error("malformed annotation for photo `{photo}`: {message}")]
    MalformedAnnotation { photo: String, message: String },
    #[error(
        "photo `{photo}`: landmark {index} at ({x}, {y}) lies outside the {rows}x{cols} image"
    )]
    LandmarkOutOfBounds {
        photo: String,
        index: usize,
        x: f64,
        y: f64,
        rows: usize,
        cols: usize,
    },
    #[error("duplicate photo id `{0}`")]
    DuplicateId(String),
    #[error("patch is {actual_rows}x{actual_cols} but the layout expects {rows}x{cols}")]
    LayoutMismatch {
        rows: usize,
        cols: usize,
        actual_rows: usize,
        actual_cols: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("photo `{photo}`: {source}")]
    Geometry {
        photo: String,
        #[source]
        source: GeometryError,
    },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("json error in {path}: {message}")]
    Json { path: String, message: String },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, PipelineError>;

pub(crate) fn io_error(path: &std::path::Path, e: std::io::Error) -> PipelineError {
    PipelineError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// One annotated capture: the photo, its marked chessboard cells and its
/// five facial landmarks.
#[derive(Debug, Clone, PartialEq)]
pub struct CapturePhoto {
    pub id: String,
    pub split: Split,
    /// Identity label, when known (synthetic data, training sets).
    pub identity: Option<usize>,
    pub image: ImageTensor,
    pub cells: Vec<CellCorrespondence>,
    pub landmarks: Vec<Point2>,
}

impl CapturePhoto {
    fn geometry_error(&self, source: GeometryError) -> PipelineError {
        PipelineError::Geometry {
            photo: self.id.clone(),
            source,
        }
    }

    /// Patch and alignment grids for this photo. `mask`, when given, marks the
    /// patch pixels that physically exist (row-major over `patch_shape`).
    pub fn grids(
        &self,
        patch_shape: (usize, usize),
        template: &LandmarkTemplate,
        mask: Option<&[bool]>,
    ) -> Result<PhotoGrids> {
        let mut patch = precompute_patch_grid(&self.cells, patch_shape, self.image.shape())
            .map_err(|e| self.geometry_error(e))?;
        if let Some(mask) = mask {
            if mask.len() != patch_shape.0 * patch_shape.1 {
                return Err(PipelineError::InvalidArgument(format!(
                    "mask has {} entries, patch has {}",
                    mask.len(),
                    patch_shape.0 * patch_shape.1
                )));
            }
            patch = patch.restrict_to_mask(mask);
        }
        let sim = template
            .fit(&self.landmarks)
            .map_err(|e| self.geometry_error(e))?;
        let align = precompute_alignment_grid(&sim, template.out_shape(), self.image.shape());
        Ok(PhotoGrids { patch, align })
    }

    /// The clean photo warped to the aligned crop.
    pub fn aligned(&self, template: &LandmarkTemplate) -> Result<ImageTensor> {
        let sim = template
            .fit(&self.landmarks)
            .map_err(|e| self.geometry_error(e))?;
        let grid = precompute_alignment_grid(&sim, template.out_shape(), self.image.shape());
        Ok(align_face(&self.image, &grid)?)
    }
}

/// A known identity's reference embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GalleryEntry {
    pub class_id: usize,
    pub class_label: String,
    pub embedding: Embedding,
    pub source: String,
}

/// One gallery entry per identity: the normalized mean embedding of that
/// identity's clean, aligned photos. Entries are ordered by class id.
pub fn build_gallery(
    photos: &[CapturePhoto],
    model: &ModelCheckpoint,
    template: &LandmarkTemplate,
) -> Result<Vec<GalleryEntry>> {
    use std::collections::BTreeMap;
    let mut by_class: BTreeMap<usize, Vec<Embedding>> = BTreeMap::new();
    for photo in photos {
        let Some(class) = photo.identity else {
            continue;
        };
        let e = model.net.embed(&photo.aligned(template)?)?;
        by_class.entry(class).or_default().push(e);
    }
    Ok(by_class
        .into_iter()
        .filter_map(|(class, items)| {
            let n = items.len();
            Embedding::mean(&items).map(|embedding| GalleryEntry {
                class_id: class,
                class_label: format!("identity-{class:02}"),
                embedding,
                source: format!("mean of {n} aligned photos"),
            })
        })
        .collect())
}

pub fn save_gallery(gallery: &[GalleryEntry], path: &std::path::Path) -> Result<()> {
    let text = serde_json::to_string_pretty(gallery).map_err(|e| PipelineError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    std::fs::write(path, text).map_err(|e| io_error(path, e))
}

pub fn load_gallery(path: &std::path::Path) -> Result<Vec<GalleryEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => PipelineError::MissingFile(path.display().to_string()),
        _ => io_error(path, e),
    })?;
    let gallery: Vec<GalleryEntry> =
        serde_json::from_str(&text).map_err(|e| PipelineError::Json {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
    for g in &gallery {
        if (g.embedding.norm() - 1.0).abs() > 1e-6 {
            return Err(PipelineError::InvalidArgument(format!(
                "gallery class {} embedding is not unit length",
                g.class_id
            )));
        }
    }
    Ok(gallery)
}
