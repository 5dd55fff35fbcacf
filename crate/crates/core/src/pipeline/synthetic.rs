//! Procedural identities for desk-scale runs.
//!
//! Each identity is a seeded composition of coloured shapes laid out like a
//! face: head ellipse, eyes at the template eye positions, mouth, hair, brows,
//! a striped forehead and a few marks on it.
//! Every image of an identity shifts the composition by up to `max_shift_px`
//! and offsets brightness by up to `max_brightness`. Landmarks are always the
//! template positions and the patch board always sits at the same quad, so the
//! photos behave like a fixed camera capture of a moving sticker-wearing face.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    io_error, save_manifest, CapturePhoto, Manifest, ManifestEntry, PatchLayout, PipelineError,
    Result, Split,
};
use crate::embednet::LabeledImage;
use crate::geometry::{LandmarkTemplate, Point2};
use crate::image::{save_image, ImageTensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticIdentitySpec {
    pub num_identities: usize,
    pub images_per_identity: usize,
    /// `[rows, cols, channels]`.
    pub image_size: [usize; 3],
    /// Decorative blobs added to each identity's base pattern.
    pub blobs_per_identity: usize,
    pub max_shift_px: f64,
    pub max_brightness: f64,
    /// Per identity, the first `train` images go to the train split, the next
    /// `val` to validation and the rest to test.
    pub train_per_identity: usize,
    pub val_per_identity: usize,
    pub layout: PatchLayout,
    /// Photo corners (TL, TR, BR, BL) of the patch board.
    pub board: [Point2; 4],
    pub seed: u64,
}

impl Default for SyntheticIdentitySpec {
    fn default() -> Self {
        Self {
            num_identities: 10,
            images_per_identity: 20,
            image_size: [112, 112, 3],
            blobs_per_identity: 3,
            max_shift_px: 4.0,
            max_brightness: 0.1,
            train_per_identity: 8,
            val_per_identity: 6,
            layout: PatchLayout::forehead(4),
            board: [
                Point2::new(27.0, 20.0),
                Point2::new(85.0, 20.0),
                Point2::new(83.0, 44.0),
                Point2::new(29.0, 44.0),
            ],
            seed: 0,
        }
    }
}

impl SyntheticIdentitySpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::InvalidArgument(m.to_string()));
        if self.num_identities == 0 || self.images_per_identity == 0 {
            return bad("need at least one identity and one image per identity");
        }
        if self.image_size[2] != 3 || self.image_size[0] < 16 || self.image_size[1] < 16 {
            return bad("synthetic images must be RGB and at least 16x16");
        }
        if !(0.0..=8.0).contains(&self.max_shift_px) {
            return bad("max_shift_px must lie in [0, 8]");
        }
        if !(0.0..=0.5).contains(&self.max_brightness) {
            return bad("max_brightness must lie in [0, 0.5]");
        }
        if self.train_per_identity + self.val_per_identity > self.images_per_identity {
            return bad("train and val counts exceed images per identity");
        }
        self.layout.validate()?;
        let (rows, cols) = (self.image_size[0] as f64, self.image_size[1] as f64);
        if self.board.iter().any(|p| {
            !p.is_finite() || p.x < 0.0 || p.y < 0.0 || p.x > cols - 1.0 || p.y > rows - 1.0
        }) {
            return bad("board corners must lie inside the image");
        }
        Ok(())
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train_per_identity {
            Split::Train
        } else if index < self.train_per_identity + self.val_per_identity {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Disc {
    center: Point2,
    rx: f64,
    ry: f64,
    color: [f64; 3],
}

impl Disc {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = ((x - self.center.x) / self.rx, (y - self.center.y) / self.ry);
        u * u + v * v <= 1.0
    }
}

/// Base pattern of one identity.
#[derive(Debug, Clone)]
struct IdentityPattern {
    background: [f64; 3],
    background_slope: f64,
    head: Disc,
    stripe_freq: f64,
    stripe_angle: f64,
    stripe_phase: f64,
    stripe_amp: f64,
    /// Stripes cover the forehead, between the hairline and this row.
    forehead_bottom: f64,
    /// Head pixels above this row are hair.
    hairline: f64,
    hair: [f64; 3],
    brows: [Brow; 2],
    eyes: [Disc; 2],
    mouth: Disc,
    blobs: Vec<Disc>,
}

/// A tilted bar above an eye.
#[derive(Debug, Clone, Copy)]
struct Brow {
    center: Point2,
    half_len: f64,
    half_thick: f64,
    tilt: f64,
    color: [f64; 3],
}

impl Brow {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center.x, y - self.center.y);
        let (s, c) = self.tilt.sin_cos();
        (dx * c + dy * s).abs() <= self.half_len && (-dx * s + dy * c).abs() <= self.half_thick
    }
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

impl IdentityPattern {
    fn draw(rng: &mut ChaCha8Rng, template: &LandmarkTemplate, blobs: usize) -> Self {
        let scale = template.size[1] as f64 / 112.0;
        let lm = &template.landmarks;
        // Colours outside the forehead band vary only slightly between
        // identities; brows, forehead texture and marks carry most of the
        // identity.
        let head = Disc {
            center: Point2::new(56.0 * scale, 62.0 * scale),
            rx: rng.random_range(36.0..40.0) * scale,
            ry: rng.random_range(46.0..50.0) * scale,
            color: color(rng, 0.6, 0.65),
        };
        let eye_r = rng.random_range(5.0..6.5) * scale;
        let eye_color = color(rng, 0.15, 0.2);
        let eyes = [lm[0], lm[1]].map(|c| Disc {
            center: c,
            rx: eye_r * 1.3,
            ry: eye_r,
            color: eye_color,
        });
        let mouth = Disc {
            center: lm[3].lerp(lm[4], 0.5),
            rx: rng.random_range(12.0..14.0) * scale,
            ry: rng.random_range(3.0..4.0) * scale,
            color: color(rng, 0.4, 0.45),
        };
        let brow_lift = rng.random_range(9.0..15.0) * scale;
        let brow_len = rng.random_range(7.0..13.0) * scale;
        let brow_thick = rng.random_range(1.5..4.0) * scale;
        let brow_tilt = rng.random_range(-0.35..0.35);
        let brow_color = color(rng, 0.0, 0.7);
        let brows = [(lm[0], 1.0), (lm[1], -1.0)].map(|(c, side)| Brow {
            center: Point2::new(c.x, c.y - brow_lift),
            half_len: brow_len,
            half_thick: brow_thick,
            tilt: side * brow_tilt,
            color: brow_color,
        });
        let blobs = (0..blobs)
            .map(|_| Disc {
                center: Point2::new(
                    rng.random_range(32.0..80.0) * scale,
                    rng.random_range(22.0..42.0) * scale,
                ),
                rx: rng.random_range(3.0..7.0) * scale,
                ry: rng.random_range(3.0..7.0) * scale,
                color: color(rng, 0.0, 1.0),
            })
            .collect();
        IdentityPattern {
            background: color(rng, 0.33, 0.37),
            background_slope: rng.random_range(-0.1..0.1),
            head,
            stripe_freq: rng.random_range(0.2..0.8),
            stripe_angle: rng.random_range(0.0..std::f64::consts::PI),
            stripe_phase: rng.random_range(0.0..std::f64::consts::TAU),
            stripe_amp: rng.random_range(0.1..0.35),
            forehead_bottom: lm[0].y.min(lm[1].y) - 6.0 * scale,
            hairline: rng.random_range(20.0..34.0) * scale,
            hair: color(rng, 0.25, 0.45),
            brows,
            eyes,
            mouth,
            blobs,
        }
    }

    /// Colour at continuous pattern coordinates.
    fn sample(&self, x: f64, y: f64, rows: f64) -> [f64; 3] {
        let features = self
            .eyes
            .iter()
            .chain(std::iter::once(&self.mouth))
            .chain(&self.blobs);
        if let Some(d) = features.rev().find(|d| d.contains(x, y)) {
            return d.color;
        }
        if let Some(b) = self.brows.iter().find(|b| b.contains(x, y)) {
            return b.color;
        }
        if self.head.contains(x, y) {
            if y < self.hairline {
                return self.hair;
            }
            if y > self.forehead_bottom {
                return self.head.color;
            }
            let t = x * self.stripe_angle.cos() + y * self.stripe_angle.sin();
            let m = 1.0 + self.stripe_amp * (self.stripe_freq * t + self.stripe_phase).sin();
            return self.head.color.map(|c| c * m);
        }
        let shade = 1.0 + self.background_slope * (y / rows - 0.5);
        self.background.map(|c| c * shade)
    }
}

/// Generated photos plus the settings needed to reproduce them.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SyntheticIdentitySpec,
    /// Ordered by identity, then image index.
    pub photos: Vec<CapturePhoto>,
}

/// Deterministic per seed; images are quantized to 8 bits so that writing and
/// reloading them is lossless.
pub fn generate_synthetic_identities(spec: &SyntheticIdentitySpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let template = LandmarkTemplate {
        size: [spec.image_size[0], spec.image_size[1]],
        landmarks: scaled_landmarks(spec),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let patterns: Vec<IdentityPattern> = (0..spec.num_identities)
        .map(|_| IdentityPattern::draw(&mut rng, &template, spec.blobs_per_identity))
        .collect();
    let cells = spec.layout.board_cells(&spec.board);
    let [rows, cols, _] = spec.image_size;
    let mut photos = Vec::with_capacity(spec.num_identities * spec.images_per_identity);
    for (identity, pattern) in patterns.iter().enumerate() {
        for index in 0..spec.images_per_identity {
            let s = spec.max_shift_px;
            let b = spec.max_brightness;
            let dx = if s > 0.0 {
                rng.random_range(-s..=s)
            } else {
                0.0
            };
            let dy = if s > 0.0 {
                rng.random_range(-s..=s)
            } else {
                0.0
            };
            let db = if b > 0.0 {
                rng.random_range(-b..=b)
            } else {
                0.0
            };
            let mut image = ImageTensor::zeros(rows, cols, 3);
            for r in 0..rows {
                for c in 0..cols {
                    let rgb = pattern.sample(c as f64 - dx, r as f64 - dy, rows as f64);
                    for (ch, v) in rgb.iter().enumerate() {
                        let q = crate::image::quantize((v + db).clamp(0.0, 1.0));
                        image.set(r, c, ch, q as f64 / 255.0);
                    }
                }
            }
            photos.push(CapturePhoto {
                id: format!("id{identity:02}_{index:02}"),
                split: spec.split_of(index),
                identity: Some(identity),
                image,
                cells: cells.clone(),
                landmarks: template.landmarks.to_vec(),
            });
        }
    }
    Ok(SyntheticDataset {
        spec: spec.clone(),
        photos,
    })
}

/// Default template landmarks rescaled to the requested image size.
fn scaled_landmarks(spec: &SyntheticIdentitySpec) -> [Point2; 5] {
    let base = LandmarkTemplate::default();
    let sx = spec.image_size[1] as f64 / base.size[1] as f64;
    let sy = spec.image_size[0] as f64 / base.size[0] as f64;
    base.landmarks.map(|p| Point2::new(p.x * sx, p.y * sy))
}

impl SyntheticDataset {
    pub fn labels(&self) -> Vec<usize> {
        self.photos
            .iter()
            .map(|p| p.identity.unwrap_or(0))
            .collect()
    }

    pub fn photos_of(&self, identity: usize) -> impl Iterator<Item = &CapturePhoto> {
        self.photos
            .iter()
            .filter(move |p| p.identity == Some(identity))
    }

    /// Every photo, aligned to `template`, labelled with its identity.
    pub fn labeled(&self, template: &LandmarkTemplate) -> Result<Vec<LabeledImage>> {
        self.photos
            .iter()
            .map(|p| {
                Ok(LabeledImage {
                    image: p.aligned(template)?,
                    label: p.identity.unwrap_or(0),
                })
            })
            .collect()
    }

    /// Writes `images/<id>.png` and `manifest.json` under `dir`; returns the
    /// manifest path.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| io_error(&images, e))?;
        let mut entries = Vec::with_capacity(self.photos.len());
        for photo in &self.photos {
            let rel = PathBuf::from("images").join(format!("{}.png", photo.id));
            save_image(&photo.image, &dir.join(&rel))?;
            entries.push(ManifestEntry::from_photo(photo, rel));
        }
        let manifest = Manifest {
            version: 1,
            layout: Some(self.spec.layout),
            photos: entries,
        };
        let path = dir.join("manifest.json");
        save_manifest(&manifest, &path)?;
        Ok(path)
    }
}
