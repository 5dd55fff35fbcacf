//! Chessboard calibration pattern, patch cell layouts and printable export.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{PipelineError, Result};
use crate::geometry::{CellCorrespondence, Point2};
use crate::image::{load_png, read_png_dpi, save_png, ImageTensor, PngMetadata};

const CM_PER_INCH: f64 = 2.54;

/// Text chunk key carrying the physical size of an exported patch.
pub const LAYOUT_TEXT_KEY: &str = "patchforge-layout";

/// Single-channel chessboard: cell `(r, c)` has value `(r + c) mod 2`, so the
/// top-left cell is black. A non-zero `border_px` adds a white margin.
pub fn generate_chessboard(
    rows: usize,
    cols: usize,
    cell_px: usize,
    border_px: usize,
) -> Result<ImageTensor> {
    if rows == 0 || cols == 0 || cell_px == 0 {
        return Err(PipelineError::InvalidArgument(format!(
            "chessboard needs at least one cell and one pixel per cell, got {rows}x{cols} cells of {cell_px} px"
        )));
    }
    let h = rows * cell_px + 2 * border_px;
    let w = cols * cell_px + 2 * border_px;
    Ok(ImageTensor::from_fn(h, w, 1, |r, c, _| {
        let inside =
            (border_px..h - border_px).contains(&r) && (border_px..w - border_px).contains(&c);
        if !inside {
            return 1.0;
        }
        let (cr, cc) = ((r - border_px) / cell_px, (c - border_px) / cell_px);
        ((cr + cc) % 2) as f64
    }))
}

/// Grid of square cells making up a rectangular patch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PatchLayout {
    pub cell_rows: usize,
    pub cell_cols: usize,
    /// Patch pixels per cell side.
    pub cell_px: usize,
    /// Printed width of one cell.
    pub cm_per_cell: f64,
}

impl PatchLayout {
    /// 14 cells wide, 5 high, 1.0 cm per cell.
    pub const fn forehead(cell_px: usize) -> Self {
        PatchLayout {
            cell_rows: 5,
            cell_cols: 14,
            cell_px,
            cm_per_cell: 1.0,
        }
    }

    /// 12 cells wide, 6 high, 0.7 cm per cell.
    pub const fn nose(cell_px: usize) -> Self {
        PatchLayout {
            cell_rows: 6,
            cell_cols: 12,
            cell_px,
            cm_per_cell: 0.7,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.cell_rows == 0 || self.cell_cols == 0 || self.cell_px == 0 {
            return Err(PipelineError::InvalidArgument(
                "layout dimensions must be at least 1".into(),
            ));
        }
        if !(self.cm_per_cell.is_finite() && self.cm_per_cell > 0.0) {
            return Err(PipelineError::InvalidArgument(
                "cm_per_cell must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Patch tensor shape `(rows, cols)`.
    pub fn patch_shape(&self) -> (usize, usize) {
        (self.cell_rows * self.cell_px, self.cell_cols * self.cell_px)
    }

    pub fn cell_count(&self) -> usize {
        self.cell_rows * self.cell_cols
    }

    /// Row-major cell id.
    pub fn cell_id(&self, row: usize, col: usize) -> i64 {
        (row * self.cell_cols + col) as i64
    }

    /// Corners (TL, TR, BR, BL) of a cell in patch index space; pixel centres
    /// sit at integer coordinates, so cell edges fall on half-integers.
    pub fn patch_cell_corners(&self, row: usize, col: usize) -> [Point2; 4] {
        let k = self.cell_px as f64;
        let (x0, x1) = (col as f64 * k - 0.5, (col + 1) as f64 * k - 0.5);
        let (y0, y1) = (row as f64 * k - 0.5, (row + 1) as f64 * k - 0.5);
        [
            Point2::new(x0, y0),
            Point2::new(x1, y0),
            Point2::new(x1, y1),
            Point2::new(x0, y1),
        ]
    }

    /// Cell correspondences for a board whose outer corners (TL, TR, BR, BL)
    /// appear at `board` in a photo. Inner corners are bilinear in the outer
    /// ones, which is exact for an affine view and a close approximation for
    /// mild perspective.
    pub fn board_cells(&self, board: &[Point2; 4]) -> Vec<CellCorrespondence> {
        let at = |u: f64, v: f64| {
            let top = board[0].lerp(board[1], u);
            let bottom = board[3].lerp(board[2], u);
            top.lerp(bottom, v)
        };
        let (nr, nc) = (self.cell_rows as f64, self.cell_cols as f64);
        let mut cells = Vec::with_capacity(self.cell_count());
        for r in 0..self.cell_rows {
            for c in 0..self.cell_cols {
                let (u0, u1) = (c as f64 / nc, (c + 1) as f64 / nc);
                let (v0, v1) = (r as f64 / nr, (r + 1) as f64 / nr);
                cells.push(CellCorrespondence {
                    id: self.cell_id(r, c),
                    patch_corners: self.patch_cell_corners(r, c),
                    photo_corners: [at(u0, v0), at(u1, v0), at(u1, v1), at(u0, v1)],
                });
            }
        }
        cells
    }

    /// Printed size in centimetres `(width, height)`.
    pub fn physical_size_cm(&self) -> (f64, f64) {
        (
            self.cell_cols as f64 * self.cm_per_cell,
            self.cell_rows as f64 * self.cm_per_cell,
        )
    }

    /// Exported pixel size `(width, height)` at `dpi`.
    pub fn print_pixels(&self, dpi: f64) -> (usize, usize) {
        let (w, h) = self.physical_size_cm();
        (
            (w * dpi / CM_PER_INCH).round() as usize,
            (h * dpi / CM_PER_INCH).round() as usize,
        )
    }

    fn check_patch(&self, patch: &ImageTensor) -> Result<()> {
        let (rows, cols) = self.patch_shape();
        if patch.shape() != (rows, cols) || patch.channels() != 1 {
            return Err(PipelineError::LayoutMismatch {
                rows,
                cols,
                actual_rows: patch.rows(),
                actual_cols: patch.cols(),
            });
        }
        Ok(())
    }
}

/// Nearest-neighbour resample of every channel to `(rows, cols)`.
fn resample_nearest(src: &ImageTensor, rows: usize, cols: usize) -> ImageTensor {
    let (sr, sc) = src.shape();
    let pick = |i: usize, n_out: usize, n_src: usize| {
        (((i as f64 + 0.5) * n_src as f64 / n_out as f64).floor() as usize).min(n_src - 1)
    };
    ImageTensor::from_fn(rows, cols, src.channels(), |r, c, ch| {
        src.get(pick(r, rows, sr), pick(c, cols, sc), ch)
    })
}

/// What [`export_patch`] wrote.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExportInfo {
    pub width_px: usize,
    pub height_px: usize,
    pub dpi: f64,
    pub width_cm: f64,
    pub height_cm: f64,
}

/// Writes `patch` as a grayscale PNG sized for printing at `dpi`, carrying
/// the resolution in pHYs and the physical size in a text chunk.
pub fn export_patch(
    patch: &ImageTensor,
    layout: &PatchLayout,
    dpi: f64,
    path: &Path,
) -> Result<ExportInfo> {
    layout.validate()?;
    layout.check_patch(patch)?;
    if !(dpi.is_finite() && dpi > 0.0) {
        return Err(PipelineError::InvalidArgument(format!(
            "dpi must be positive, got {dpi}"
        )));
    }
    let (width_px, height_px) = layout.print_pixels(dpi);
    if width_px == 0 || height_px == 0 {
        return Err(PipelineError::InvalidArgument(format!(
            "{dpi} dpi leaves the printed patch without pixels"
        )));
    }
    let (width_cm, height_cm) = layout.physical_size_cm();
    let printable = resample_nearest(patch, height_px, width_px);
    let meta = PngMetadata {
        dots_per_inch: Some(dpi),
        text: vec![(
            LAYOUT_TEXT_KEY.to_string(),
            format!(
                "{}x{} cells, {} cm per cell, {width_cm:.2} x {height_cm:.2} cm",
                layout.cell_cols, layout.cell_rows, layout.cm_per_cell
            ),
        )],
    };
    save_png(&printable, path, &meta)?;
    Ok(ExportInfo {
        width_px,
        height_px,
        dpi,
        width_cm,
        height_cm,
    })
}

/// Reads an exported patch back at the layout's tensor resolution.
pub fn load_exported_patch(path: &Path, layout: &PatchLayout) -> Result<ImageTensor> {
    layout.validate()?;
    let img = load_png(path)?;
    let gray = if img.channels() == 1 {
        img
    } else {
        img.to_gray()
    };
    let (rows, cols) = layout.patch_shape();
    Ok(resample_nearest(&gray, rows, cols))
}

/// Resolution recorded in an exported patch, if any.
pub fn exported_dpi(path: &Path) -> Result<Option<f64>> {
    Ok(read_png_dpi(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_by_two_board() {
        let b = generate_chessboard(2, 2, 10, 0).unwrap();
        assert_eq!(b.shape(), (20, 20));
        assert_eq!(b.get(0, 0, 0), 0.0);
        assert_eq!(b.get(0, 19, 0), 1.0);
        assert_eq!(b.get(19, 0, 0), 1.0);
        assert_eq!(b.get(19, 19, 0), 0.0);
    }

    #[test]
    fn single_cell_is_black_and_border_white() {
        let b = generate_chessboard(1, 1, 3, 0).unwrap();
        assert!(b.data().iter().all(|&v| v == 0.0));
        let b = generate_chessboard(1, 1, 3, 2).unwrap();
        assert_eq!(b.shape(), (7, 7));
        assert_eq!(b.get(0, 0, 0), 1.0);
        assert_eq!(b.get(3, 3, 0), 0.0);
    }

    #[test]
    fn board_parity() {
        let b = generate_chessboard(5, 14, 3, 1).unwrap();
        for r in 0..5 {
            for c in 0..14 {
                assert_eq!(b.get(1 + 3 * r + 1, 1 + 3 * c + 2, 0), ((r + c) % 2) as f64);
            }
        }
        assert!(generate_chessboard(0, 1, 1, 0).is_err());
    }

    #[test]
    fn forehead_print_width() {
        let l = PatchLayout::forehead(4);
        let (w, h) = l.print_pixels(300.0);
        assert_eq!(w, (14.0f64 * 300.0 / 2.54).round() as usize);
        assert_eq!(h, (5.0f64 * 300.0 / 2.54).round() as usize);
        assert_eq!(w, 1654);
    }

    #[test]
    fn export_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let layout = PatchLayout::forehead(2);
        let (rows, cols) = layout.patch_shape();
        let patch = ImageTensor::from_fn(rows, cols, 1, |r, c, _| {
            ((r * 31 + c * 17) % 101) as f64 / 100.0
        });
        let path = dir.path().join("p.png");
        let info = export_patch(&patch, &layout, 150.0, &path).unwrap();
        assert_eq!(info.width_px, 827);
        let back = load_exported_patch(&path, &layout).unwrap();
        for (a, b) in patch.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let dpi = exported_dpi(&path).unwrap().unwrap();
        assert!((dpi - 150.0).abs() < 0.1);

        let wrong = ImageTensor::zeros(rows + 1, cols, 1);
        assert!(matches!(
            export_patch(&wrong, &layout, 300.0, &path),
            Err(PipelineError::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn board_cells_tile_the_board() {
        let layout = PatchLayout::forehead(4);
        let board = [
            Point2::new(10.0, 20.0),
            Point2::new(66.0, 20.0),
            Point2::new(66.0, 40.0),
            Point2::new(10.0, 40.0),
        ];
        let cells = layout.board_cells(&board);
        assert_eq!(cells.len(), 70);
        assert_eq!(cells[0].photo_corners[0], board[0]);
        assert_eq!(cells[69].photo_corners[2], board[2]);
        assert_eq!(cells[1].photo_corners[0], cells[0].photo_corners[1]);
        assert_eq!(cells[69].patch_corners[2], Point2::new(55.5, 19.5));
    }
}
