//! Plane geometry for patch projection and face alignment.
//!
//! Coordinates are continuous pixel positions in index space: the centre of
//! pixel `(row, col)` sits at `(x = col, y = row)`, origin top-left, `y`
//! pointing down. A patch of `w` columns therefore spans `x ∈ [-0.5, w - 0.5]`.
//!
//! Every warp is realised as a [`SamplingGrid`]: for each output pixel the grid
//! stores the source coordinate obtained by inverse mapping and the four
//! bilinear weights used to read it. Grids are computed once per photo and
//! reused for every attack iteration.

use nalgebra::{Matrix3, SMatrix, SVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("degenerate quadrilateral: three corners are collinear or coincide")]
    DegenerateQuad,
    #[error("homography linear system is singular")]
    SingularSystem,
    #[error("projective denominator vanishes at ({x}, {y})")]
    VanishingDenominator { x: f64, y: f64 },
    #[error("degenerate point configuration: source points coincide")]
    DegenerateConfiguration,
    #[error("point sets differ in length ({src} vs {dst})")]
    LengthMismatch { src: usize, dst: usize },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("patch corner ({x}, {y}) lies outside the {rows}x{cols} patch")]
    PatchCornerOutOfRange {
        x: f64,
        y: f64,
        rows: usize,
        cols: usize,
    },
    #[error("cell {cell_id}: {source}")]
    Cell {
        cell_id: i64,
        #[source]
        source: Box<GeometryError>,
    },
}

pub type Result<T> = std::result::Result<T, GeometryError>;

/// A point in continuous pixel coordinates. Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    /// `self + t·(other − self)`; exact at `t = 0` and `t = 1`.
    pub fn lerp(self, other: Point2, t: f64) -> Point2 {
        Point2::new(
            (1.0 - t) * self.x + t * other.x,
            (1.0 - t) * self.y + t * other.y,
        )
    }
}

impl From<[f64; 2]> for Point2 {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point2> for [f64; 2] {
    fn from(p: Point2) -> Self {
        [p.x, p.y]
    }
}

fn cross(o: Point2, a: Point2, b: Point2) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn check_finite(points: &[Point2]) -> Result<()> {
    if points.iter().all(Point2::is_finite) {
        Ok(())
    } else {
        Err(GeometryError::NonFinite)
    }
}

/// True when no three of the four corners are collinear (or coincide).
pub fn quad_is_non_degenerate(quad: &[Point2; 4]) -> bool {
    let extent = quad
        .iter()
        .flat_map(|p| quad.iter().map(move |q| p.distance(q)))
        .fold(0.0, f64::max);
    if extent == 0.0 || !extent.is_finite() {
        return false;
    }
    let tol = 1e-10 * extent * extent;
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES
        .iter()
        .all(|&[a, b, c]| cross(quad[a], quad[b], quad[c]).abs() > tol)
}

/// Inside-or-on-boundary test for a convex quadrilateral of either winding.
pub fn point_in_quad(quad: &[Point2; 4], p: Point2) -> bool {
    let scale = quad
        .iter()
        .map(|q| q.x.abs().max(q.y.abs()))
        .fold(1.0, f64::max);
    let tol = 1e-12 * scale * scale;
    let mut pos = false;
    let mut neg = false;
    for k in 0..4 {
        let c = cross(quad[k], quad[(k + 1) % 4], p);
        if c > tol {
            pos = true;
        } else if c < -tol {
            neg = true;
        }
    }
    !(pos && neg)
}

/// A plane projective transform, stored with `m[2][2] = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl Homography {
    pub const IDENTITY: Homography = Homography {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    /// Builds from a raw matrix, rescaling so that `m[2][2] = 1`.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let norm = m.iter().flatten().fold(0.0f64, |a, v| a.max(v.abs()));
        let w = m[2][2];
        if norm == 0.0 || w.abs() < 1e-12 * norm {
            return Err(GeometryError::SingularSystem);
        }
        let mut out = [[0.0; 3]; 3];
        for (row_out, row) in out.iter_mut().zip(&m) {
            for (o, v) in row_out.iter_mut().zip(row) {
                *o = v / w;
            }
        }
        out[2][2] = 1.0;
        let h = Homography { m: out };
        if h.determinant().abs() < 1e-12 {
            return Err(GeometryError::SingularSystem);
        }
        Ok(h)
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Homography {
            m: [[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]],
        }
    }

    pub fn matrix(&self) -> &[[f64; 3]; 3] {
        &self.m
    }

    pub fn determinant(&self) -> f64 {
        to_na(&self.m).determinant()
    }

    pub fn inverse(&self) -> Result<Homography> {
        let inv = to_na(&self.m)
            .try_inverse()
            .ok_or(GeometryError::SingularSystem)?;
        Homography::from_matrix(from_na(&inv))
    }

    pub fn apply(&self, p: Point2) -> Result<Point2> {
        apply_homography(self, p)
    }
}

fn to_na(m: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|r, c| m[r][c])
}

fn from_na(m: &Matrix3<f64>) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = m[(r, c)];
        }
    }
    out
}

/// Maps `p` through `h`, dividing by the homogeneous coordinate.
pub fn apply_homography(h: &Homography, p: Point2) -> Result<Point2> {
    let m = &h.m;
    let w = m[2][0] * p.x + m[2][1] * p.y + m[2][2];
    if !(w.abs() >= 1e-12) {
        return Err(GeometryError::VanishingDenominator { x: p.x, y: p.y });
    }
    Ok(Point2 {
        x: (m[0][0] * p.x + m[0][1] * p.y + m[0][2]) / w,
        y: (m[1][0] * p.x + m[1][1] * p.y + m[1][2]) / w,
    })
}

/// Similarity-normalizing transform: centroid to origin, mean distance √2.
fn normalizer(points: &[Point2; 4]) -> Matrix3<f64> {
    let cx = points.iter().map(|p| p.x).sum::<f64>() / 4.0;
    let cy = points.iter().map(|p| p.y).sum::<f64>() / 4.0;
    let mean = points
        .iter()
        .map(|p| (p.x - cx).hypot(p.y - cy))
        .sum::<f64>()
        / 4.0;
    let s = std::f64::consts::SQRT_2 / mean;
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Direct linear transform from exactly four correspondences.
///
/// Both point sets are normalized first; the 8×8 system with `h₃₃ = 1` is then
/// solved by LU and the result denormalized.
pub fn estimate_homography(src: &[Point2; 4], dst: &[Point2; 4]) -> Result<Homography> {
    check_finite(src)?;
    check_finite(dst)?;
    if !quad_is_non_degenerate(src) || !quad_is_non_degenerate(dst) {
        return Err(GeometryError::DegenerateQuad);
    }
    let ts = normalizer(src);
    let td = normalizer(dst);
    let norm =
        |t: &Matrix3<f64>, p: Point2| (t[(0, 0)] * p.x + t[(0, 2)], t[(1, 1)] * p.y + t[(1, 2)]);

    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for k in 0..4 {
        let (x, y) = norm(&ts, src[k]);
        let (u, v) = norm(&td, dst[k]);
        let r = 2 * k;
        a[(r, 0)] = x;
        a[(r, 1)] = y;
        a[(r, 2)] = 1.0;
        a[(r, 6)] = -u * x;
        a[(r, 7)] = -u * y;
        b[r] = u;
        a[(r + 1, 3)] = x;
        a[(r + 1, 4)] = y;
        a[(r + 1, 5)] = 1.0;
        a[(r + 1, 6)] = -v * x;
        a[(r + 1, 7)] = -v * y;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b).ok_or(GeometryError::SingularSystem)?;
    if h.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::SingularSystem);
    }
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0);
    let td_inv = td.try_inverse().ok_or(GeometryError::SingularSystem)?;
    Homography::from_matrix(from_na(&(td_inv * hn * ts)))
}

/// Uniform scale, rotation and translation: `p ↦ s·R(θ)·p + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    /// Radians, counter-clockwise in a y-up frame (clockwise on screen).
    pub rotation: f64,
    pub translation: Point2,
}

impl SimilarityTransform {
    pub const IDENTITY: SimilarityTransform = SimilarityTransform {
        scale: 1.0,
        rotation: 0.0,
        translation: Point2::new(0.0, 0.0),
    };

    pub fn new(scale: f64, rotation: f64, translation: Point2) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() || !rotation.is_finite() || !translation.is_finite()
        {
            return Err(GeometryError::DegenerateConfiguration);
        }
        Ok(Self {
            scale,
            rotation,
            translation,
        })
    }

    /// The 2×3 affine matrix `[s·R | t]`.
    pub fn matrix(&self) -> [[f64; 3]; 2] {
        let (sin, cos) = self.rotation.sin_cos();
        let (a, b) = (self.scale * cos, self.scale * sin);
        [[a, -b, self.translation.x], [b, a, self.translation.y]]
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let m = self.matrix();
        Point2 {
            x: m[0][0] * p.x + m[0][1] * p.y + m[0][2],
            y: m[1][0] * p.x + m[1][1] * p.y + m[1][2],
        }
    }

    pub fn inverse(&self) -> SimilarityTransform {
        let scale = 1.0 / self.scale;
        let rotation = -self.rotation;
        let (sin, cos) = rotation.sin_cos();
        let (tx, ty) = (self.translation.x, self.translation.y);
        SimilarityTransform {
            scale,
            rotation,
            translation: Point2 {
                x: -scale * (cos * tx - sin * ty),
                y: -scale * (sin * tx + cos * ty),
            },
        }
    }
}

/// Least-squares similarity fit of `src` onto `dst` (closed form on the
/// centred cross-covariance; reflections are excluded).
pub fn estimate_similarity(src: &[Point2], dst: &[Point2]) -> Result<SimilarityTransform> {
    if src.len() != dst.len() {
        return Err(GeometryError::LengthMismatch {
            src: src.len(),
            dst: dst.len(),
        });
    }
    if src.len() < 2 {
        return Err(GeometryError::TooFewPoints {
            needed: 2,
            got: src.len(),
        });
    }
    check_finite(src)?;
    check_finite(dst)?;
    let n = src.len() as f64;
    let mean = |pts: &[Point2]| {
        let (sx, sy) = pts.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
        Point2::new(sx / n, sy / n)
    };
    let ms = mean(src);
    let md = mean(dst);
    let (mut var, mut dot, mut crs) = (0.0, 0.0, 0.0);
    for (s, d) in src.iter().zip(dst) {
        let (sx, sy) = (s.x - ms.x, s.y - ms.y);
        let (dx, dy) = (d.x - md.x, d.y - md.y);
        var += sx * sx + sy * sy;
        dot += sx * dx + sy * dy;
        crs += sx * dy - sy * dx;
    }
    let spread = src.iter().map(|p| p.distance(&ms)).fold(0.0, f64::max);
    if var <= 0.0 || spread <= 1e-12 * (1.0 + ms.x.abs().max(ms.y.abs())) {
        return Err(GeometryError::DegenerateConfiguration);
    }
    let scale = dot.hypot(crs) / var;
    if !(scale > 0.0) {
        return Err(GeometryError::DegenerateConfiguration);
    }
    let rotation = crs.atan2(dot);
    let (sin, cos) = rotation.sin_cos();
    let translation = Point2 {
        x: md.x - scale * (cos * ms.x - sin * ms.y),
        y: md.y - scale * (sin * ms.x + cos * ms.y),
    };
    SimilarityTransform::new(scale, rotation, translation)
}

/// Marked correspondence between one chessboard cell in patch space and its
/// projected quadrilateral in a photo.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCorrespondence {
    pub id: i64,
    #[serde(rename = "patch")]
    pub patch_corners: [Point2; 4],
    #[serde(rename = "photo")]
    pub photo_corners: [Point2; 4],
}

/// One output pixel of a [`SamplingGrid`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridEntry {
    /// `(row, col)` in the output image.
    pub out_pixel: (usize, usize),
    pub src_coord: Point2,
    /// Weights for `src_indices`; all zero when `src_coord` is out of bounds.
    pub weights: [f64; 4],
    /// `(row, col)` of the four bilinear neighbours: top-left, top-right,
    /// bottom-left, bottom-right.
    pub src_indices: [(usize, usize); 4],
}

impl GridEntry {
    pub fn in_bounds(&self) -> bool {
        self.weights.iter().any(|&w| w != 0.0)
    }
}

/// A fixed sparse linear map from a source image to an output image.
///
/// Output pixels without an entry read zero. Entries are sorted by output
/// pixel in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingGrid {
    pub entries: Vec<GridEntry>,
    pub out_shape: (usize, usize),
    pub src_shape: (usize, usize),
}

impl SamplingGrid {
    pub fn empty(out_shape: (usize, usize), src_shape: (usize, usize)) -> Self {
        Self {
            entries: Vec::new(),
            out_shape,
            src_shape,
        }
    }

    /// Builds a grid by evaluating `map` at every output pixel centre.
    pub fn from_map(
        out_shape: (usize, usize),
        src_shape: (usize, usize),
        mut map: impl FnMut(Point2) -> Point2,
    ) -> Self {
        let mut entries = Vec::with_capacity(out_shape.0 * out_shape.1);
        for r in 0..out_shape.0 {
            for c in 0..out_shape.1 {
                let src = map(Point2::new(c as f64, r as f64));
                entries.push(bilinear_entry((r, c), src, src_shape));
            }
        }
        Self {
            entries,
            out_shape,
            src_shape,
        }
    }

    /// Output pixels written by this grid, as a row-major boolean mask.
    pub fn coverage(&self) -> Vec<bool> {
        let mut mask = vec![false; self.out_shape.0 * self.out_shape.1];
        for e in &self.entries {
            mask[e.out_pixel.0 * self.out_shape.1 + e.out_pixel.1] = true;
        }
        mask
    }

    /// Drops every entry that reads (with non-zero weight) a source pixel
    /// outside `mask`. Used for non-rectangular patches such as eyeglass rims.
    pub fn restrict_to_mask(&self, mask: &[bool]) -> SamplingGrid {
        assert_eq!(mask.len(), self.src_shape.0 * self.src_shape.1);
        let cols = self.src_shape.1;
        let entries = self
            .entries
            .iter()
            .filter(|e| {
                e.weights
                    .iter()
                    .zip(&e.src_indices)
                    .all(|(&w, &(r, c))| w == 0.0 || mask[r * cols + c])
            })
            .copied()
            .collect();
        SamplingGrid {
            entries,
            out_shape: self.out_shape,
            src_shape: self.src_shape,
        }
    }
}

/// Bilinear read of `src` at a continuous coordinate. Coordinates outside
/// `[0, cols-1] × [0, rows-1]` yield all-zero weights.
pub fn bilinear_entry(
    out_pixel: (usize, usize),
    src: Point2,
    src_shape: (usize, usize),
) -> GridEntry {
    let (rows, cols) = src_shape;
    let oob = rows == 0
        || cols == 0
        || !src.is_finite()
        || src.x < 0.0
        || src.y < 0.0
        || src.x > (cols - 1) as f64
        || src.y > (rows - 1) as f64;
    if oob {
        return GridEntry {
            out_pixel,
            src_coord: src,
            weights: [0.0; 4],
            src_indices: [(0, 0); 4],
        };
    }
    let c0 = (src.x.floor() as usize).min(cols - 1);
    let r0 = (src.y.floor() as usize).min(rows - 1);
    let c1 = (c0 + 1).min(cols - 1);
    let r1 = (r0 + 1).min(rows - 1);
    let fx = src.x - c0 as f64;
    let fy = src.y - r0 as f64;
    GridEntry {
        out_pixel,
        src_coord: src,
        weights: [
            (1.0 - fx) * (1.0 - fy),
            fx * (1.0 - fy),
            (1.0 - fx) * fy,
            fx * fy,
        ],
        src_indices: [(r0, c0), (r0, c1), (r1, c0), (r1, c1)],
    }
}

/// Sampling grid placing the patch into one photo.
///
/// Every photo pixel whose centre lies inside (or on the boundary of) some
/// projected cell is inverse-mapped through that cell's homography into patch
/// space. Pixels claimed by several cells go to the lowest `cell_id`. Patch
/// coordinates are clamped to the patch's pixel-centre range, so the grid never
/// reads outside the patch.
pub fn precompute_patch_grid(
    cells: &[CellCorrespondence],
    patch_shape: (usize, usize),
    photo_shape: (usize, usize),
) -> Result<SamplingGrid> {
    let (prows, pcols) = patch_shape;
    let (rows, cols) = photo_shape;
    let mut ordered: Vec<&CellCorrespondence> = cells.iter().collect();
    ordered.sort_by_key(|c| c.id);

    let mut claimed = vec![false; rows * cols];
    let mut entries = Vec::new();
    for cell in ordered {
        let tag = |source: GeometryError| GeometryError::Cell {
            cell_id: cell.id,
            source: Box::new(source),
        };
        for p in &cell.patch_corners {
            let slack = 1e-9;
            if !p.is_finite()
                || p.x < -0.5 - slack
                || p.y < -0.5 - slack
                || p.x > pcols as f64 - 0.5 + slack
                || p.y > prows as f64 - 0.5 + slack
            {
                return Err(tag(GeometryError::PatchCornerOutOfRange {
                    x: p.x,
                    y: p.y,
                    rows: prows,
                    cols: pcols,
                }));
            }
        }
        let to_patch =
            estimate_homography(&cell.photo_corners, &cell.patch_corners).map_err(tag)?;

        let quad = &cell.photo_corners;
        let (min_x, max_x) = quad
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.x), hi.max(p.x))
            });
        let (min_y, max_y) = quad
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.y), hi.max(p.y))
            });
        let Some((c_lo, c_hi)) = pixel_span(min_x, max_x, cols) else {
            continue;
        };
        let Some((r_lo, r_hi)) = pixel_span(min_y, max_y, rows) else {
            continue;
        };
        for r in r_lo..=r_hi {
            for c in c_lo..=c_hi {
                let idx = r * cols + c;
                let centre = Point2::new(c as f64, r as f64);
                if claimed[idx] || !point_in_quad(quad, centre) {
                    continue;
                }
                let mut src = apply_homography(&to_patch, centre).map_err(tag)?;
                src.x = snap(src.x).clamp(0.0, (pcols.max(1) - 1) as f64);
                src.y = snap(src.y).clamp(0.0, (prows.max(1) - 1) as f64);
                claimed[idx] = true;
                entries.push(bilinear_entry((r, c), src, patch_shape));
            }
        }
    }
    entries.sort_by_key(|e| e.out_pixel);
    Ok(SamplingGrid {
        entries,
        out_shape: photo_shape,
        src_shape: patch_shape,
    })
}

/// Rounds coordinates within solver roundoff of an integer onto it, so
/// pixel-aligned cells read single patch pixels.
fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() <= 1e-9 {
        r
    } else {
        v
    }
}

/// Integer pixel range covering `[lo, hi]`, clipped to `0..len`.
fn pixel_span(lo: f64, hi: f64, len: usize) -> Option<(usize, usize)> {
    if len == 0 || !(hi >= 0.0) || !(lo <= (len - 1) as f64) {
        return None;
    }
    let a = lo.max(0.0).ceil() as usize;
    let b = (hi.floor() as usize).min(len - 1);
    (a <= b).then_some((a, b))
}

/// Sampling grid producing the aligned crop: each output pixel reads the photo
/// at `sim⁻¹(pixel)`, where `sim` maps photo coordinates to the crop.
pub fn precompute_alignment_grid(
    sim: &SimilarityTransform,
    out_shape: (usize, usize),
    photo_shape: (usize, usize),
) -> SamplingGrid {
    let inv = sim.inverse();
    SamplingGrid::from_map(out_shape, photo_shape, |p| inv.apply(p))
}

/// Five-point destination template for the aligned crop
/// (eye centres, nose tip, mouth corners).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandmarkTemplate {
    pub size: [usize; 2],
    pub landmarks: [Point2; 5],
}

const DEFAULT_TEMPLATE_JSON: &str = include_str!("../assets/landmark_template.json");

impl Default for LandmarkTemplate {
    fn default() -> Self {
        serde_json::from_str(DEFAULT_TEMPLATE_JSON).expect("bundled landmark template is valid")
    }
}

impl LandmarkTemplate {
    pub fn out_shape(&self) -> (usize, usize) {
        (self.size[0], self.size[1])
    }

    /// Similarity taking the given photo landmarks onto this template.
    pub fn fit(&self, landmarks: &[Point2]) -> Result<SimilarityTransform> {
        estimate_similarity(landmarks, &self.landmarks)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> [Point2; 4] {
        [
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(1.0, 1.0),
            Point2::new(0.0, 1.0),
        ]
    }

    fn assert_matrix(h: &Homography, want: [[f64; 3]; 3]) {
        for r in 0..3 {
            for c in 0..3 {
                assert!(
                    (h.matrix()[r][c] - want[r][c]).abs() < 1e-12,
                    "{:?} vs {:?}",
                    h.matrix(),
                    want
                );
            }
        }
    }

    #[test]
    fn identity_homography() {
        let h = estimate_homography(&unit_square(), &unit_square()).unwrap();
        assert_matrix(&h, *Homography::IDENTITY.matrix());
    }

    #[test]
    fn translation_homography() {
        let dst = unit_square().map(|p| Point2::new(p.x + 2.0, p.y + 3.0));
        let h = estimate_homography(&unit_square(), &dst).unwrap();
        assert_matrix(&h, [[1.0, 0.0, 2.0], [0.0, 1.0, 3.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn axis_scaling_homography() {
        let dst = unit_square().map(|p| Point2::new(2.0 * p.x, p.y));
        let h = estimate_homography(&unit_square(), &dst).unwrap();
        assert_matrix(&h, [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    }

    #[test]
    fn collinear_or_duplicate_corners_rejected() {
        let mut bad = unit_square();
        bad[2] = Point2::new(2.0, 0.0);
        assert_eq!(
            estimate_homography(&bad, &unit_square()),
            Err(GeometryError::DegenerateQuad)
        );
        let mut dup = unit_square();
        dup[1] = dup[0];
        assert_eq!(
            estimate_homography(&unit_square(), &dup),
            Err(GeometryError::DegenerateQuad)
        );
    }

    #[test]
    fn apply_examples() {
        let p = apply_homography(&Homography::IDENTITY, Point2::new(3.5, 7.0)).unwrap();
        assert_eq!(p, Point2::new(3.5, 7.0));
        let s =
            Homography::from_matrix([[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(
            s.apply(Point2::new(1.0, 1.0)).unwrap(),
            Point2::new(2.0, 1.0)
        );
        let t = Homography::translation(2.0, 3.0);
        assert_eq!(
            t.apply(Point2::new(0.0, 0.0)).unwrap(),
            Point2::new(2.0, 3.0)
        );
    }

    #[test]
    fn vanishing_denominator() {
        let h =
            Homography::from_matrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]]).unwrap();
        assert!(matches!(
            h.apply(Point2::new(-1.0, 4.0)),
            Err(GeometryError::VanishingDenominator { .. })
        ));
    }

    #[test]
    fn similarity_examples() {
        let pts = [
            Point2::new(38.0, 51.0),
            Point2::new(73.0, 51.5),
            Point2::new(56.0, 71.0),
            Point2::new(41.0, 92.0),
            Point2::new(70.0, 92.5),
        ];
        let id = estimate_similarity(&pts, &pts).unwrap();
        assert!((id.scale - 1.0).abs() < 1e-12);
        assert!(id.rotation.abs() < 1e-12);
        assert!(id.translation.x.abs() < 1e-9 && id.translation.y.abs() < 1e-9);

        let rot: Vec<Point2> = pts.iter().map(|p| Point2::new(-p.y, p.x)).collect();
        let r = estimate_similarity(&pts, &rot).unwrap();
        assert!((r.scale - 1.0).abs() < 1e-12);
        assert!((r.rotation - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        assert!(r.translation.x.abs() < 1e-9 && r.translation.y.abs() < 1e-9);

        let scaled: Vec<Point2> = pts
            .iter()
            .map(|p| Point2::new(2.0 * p.x + 10.0, 2.0 * p.y))
            .collect();
        let s = estimate_similarity(&pts, &scaled).unwrap();
        assert!((s.scale - 2.0).abs() < 1e-12);
        assert!(s.rotation.abs() < 1e-12);
        assert!((s.translation.x - 10.0).abs() < 1e-9 && s.translation.y.abs() < 1e-9);
    }

    #[test]
    fn similarity_rejects_coincident_sources() {
        let src = [Point2::new(1.0, 1.0); 3];
        let dst = [
            Point2::new(0.0, 0.0),
            Point2::new(1.0, 0.0),
            Point2::new(0.0, 1.0),
        ];
        assert_eq!(
            estimate_similarity(&src, &dst),
            Err(GeometryError::DegenerateConfiguration)
        );
        assert!(matches!(
            estimate_similarity(&src[..1], &dst[..1]),
            Err(GeometryError::TooFewPoints { .. })
        ));
    }

    #[test]
    fn similarity_inverse_round_trip() {
        let s = SimilarityTransform::new(1.7, 0.4, Point2::new(-3.0, 12.0)).unwrap();
        let p = Point2::new(5.5, -2.25);
        let q = s.inverse().apply(s.apply(p));
        assert!(p.distance(&q) < 1e-12);
    }

    fn rect_cell(
        id: i64,
        patch: (f64, f64, f64, f64),
        photo: (f64, f64, f64, f64),
    ) -> CellCorrespondence {
        let quad = |(x0, y0, x1, y1): (f64, f64, f64, f64)| {
            [
                Point2::new(x0, y0),
                Point2::new(x1, y0),
                Point2::new(x1, y1),
                Point2::new(x0, y1),
            ]
        };
        CellCorrespondence {
            id,
            patch_corners: quad(patch),
            photo_corners: quad(photo),
        }
    }

    #[test]
    fn integer_aligned_cell_samples_single_pixels() {
        // 4x6 patch placed at photo offset (row 3, col 5)
        let cell = rect_cell(0, (-0.5, -0.5, 5.5, 3.5), (4.5, 2.5, 10.5, 6.5));
        let grid = precompute_patch_grid(&[cell], (4, 6), (12, 16)).unwrap();
        assert_eq!(grid.entries.len(), 24);
        for e in &grid.entries {
            let (r, c) = e.out_pixel;
            assert_eq!(e.weights[0], 1.0);
            assert_eq!(e.src_indices[0], (r - 3, c - 5));
            assert_eq!(e.weights[1..], [0.0; 3]);
        }
    }

    #[test]
    fn cell_outside_photo_has_no_entries() {
        let cell = rect_cell(0, (-0.5, -0.5, 1.5, 1.5), (40.0, 40.0, 50.0, 50.0));
        let grid = precompute_patch_grid(&[cell], (2, 2), (10, 10)).unwrap();
        assert!(grid.entries.is_empty());
    }

    #[test]
    fn overlapping_cells_go_to_lower_id() {
        let a = rect_cell(3, (-0.5, -0.5, 1.5, 1.5), (0.0, 0.0, 4.0, 4.0));
        let b = rect_cell(1, (-0.5, -0.5, 1.5, 1.5), (2.0, 0.0, 6.0, 4.0));
        let grid = precompute_patch_grid(&[a, b], (2, 2), (8, 8)).unwrap();
        // pixel (0, 3) lies in both; cell 1 maps x=3 to patch x=(3-2)/4*2-0.5=0
        let e = grid.entries.iter().find(|e| e.out_pixel == (0, 3)).unwrap();
        assert!((e.src_coord.x - 0.0).abs() < 1e-12);
        let mut seen = std::collections::HashSet::new();
        assert!(grid.entries.iter().all(|e| seen.insert(e.out_pixel)));
    }

    #[test]
    fn cell_errors_are_tagged() {
        let mut cell = rect_cell(7, (-0.5, -0.5, 1.5, 1.5), (0.0, 0.0, 4.0, 4.0));
        cell.photo_corners[2] = Point2::new(2.0, 0.0);
        match precompute_patch_grid(&[cell], (2, 2), (8, 8)) {
            Err(GeometryError::Cell { cell_id, source }) => {
                assert_eq!(cell_id, 7);
                assert_eq!(*source, GeometryError::DegenerateQuad);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn alignment_grid_identity_and_downscale() {
        let grid =
            precompute_alignment_grid(&SimilarityTransform::IDENTITY, (112, 112), (112, 112));
        assert_eq!(grid.entries.len(), 112 * 112);
        for e in &grid.entries {
            assert_eq!(e.weights, [1.0, 0.0, 0.0, 0.0]);
            assert_eq!(e.src_indices[0], e.out_pixel);
        }
        let half = SimilarityTransform::new(0.5, 0.0, Point2::default()).unwrap();
        let grid = precompute_alignment_grid(&half, (112, 112), (224, 224));
        for e in &grid.entries {
            let (r, c) = e.out_pixel;
            assert_eq!(e.src_coord, Point2::new(2.0 * c as f64, 2.0 * r as f64));
            assert_eq!(e.weights[0], 1.0);
        }
    }

    #[test]
    fn out_of_bounds_entries_have_zero_weights() {
        let e = bilinear_entry((0, 0), Point2::new(-0.01, 2.0), (4, 4));
        assert_eq!(e.weights, [0.0; 4]);
        let e = bilinear_entry((0, 0), Point2::new(3.0, 3.0), (4, 4));
        assert_eq!(e.weights, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(e.src_indices[0], (3, 3));
    }

    #[test]
    fn default_template_is_inside_crop() {
        let t = LandmarkTemplate::default();
        assert_eq!(t.out_shape(), (112, 112));
        assert!(t
            .landmarks
            .iter()
            .all(|p| p.x > 0.0 && p.y > 0.0 && p.x < 112.0 && p.y < 112.0));
    }

    #[test]
    fn point_serializes_as_pair() {
        let p: Point2 = serde_json::from_str("[1.5, -2]").unwrap();
        assert_eq!(p, Point2::new(1.5, -2.0));
        assert_eq!(serde_json::to_string(&p).unwrap(), "[1.5,-2.0]");
    }
}
