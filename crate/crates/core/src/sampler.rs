//! Bilinear sampling through precomputed grids, and its exact transpose.
//!
//! With the grid fixed, sampling is a sparse linear map `A`; [`sample_adjoint`]
//! applies `Aᵀ` by scatter-adding in entry order, so gradients are
//! bit-reproducible.

use thiserror::Error;

use crate::geometry::SamplingGrid;
use crate::image::ImageTensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SamplerError {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },
    #[error("patch must have one channel, got {0}")]
    PatchNotGray(usize),
}

pub type Result<T> = std::result::Result<T, SamplerError>;

fn check_shape(expected: (usize, usize), actual: (usize, usize)) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(SamplerError::ShapeMismatch { expected, actual })
    }
}

/// `out[r][c] = Σ_k w_k · src[idx_k]` per channel. Pixels without an entry,
/// and out-of-bounds entries, are zero.
pub fn sample_bilinear(src: &ImageTensor, grid: &SamplingGrid) -> Result<ImageTensor> {
    check_shape(grid.src_shape, src.shape())?;
    let ch = src.channels();
    let (rows, cols) = grid.out_shape;
    let mut out = ImageTensor::zeros(rows, cols, ch);
    let data = src.data();
    let dst = out.data_mut();
    for e in &grid.entries {
        let o = (e.out_pixel.0 * cols + e.out_pixel.1) * ch;
        for (&w, &(r, c)) in e.weights.iter().zip(&e.src_indices) {
            if w == 0.0 {
                continue;
            }
            let s = (r * src.cols() + c) * ch;
            for k in 0..ch {
                dst[o + k] += w * data[s + k];
            }
        }
    }
    Ok(out)
}

/// `Aᵀ · grad_out`: scatters each output gradient back onto the four source
/// pixels it was read from.
pub fn sample_adjoint(grad_out: &ImageTensor, grid: &SamplingGrid) -> Result<ImageTensor> {
    check_shape(grid.out_shape, grad_out.shape())?;
    let ch = grad_out.channels();
    let (rows, cols) = grid.src_shape;
    let mut grad = ImageTensor::zeros(rows, cols, ch);
    let g_out = grad_out.data();
    let dst = grad.data_mut();
    for e in &grid.entries {
        let o = (e.out_pixel.0 * grid.out_shape.1 + e.out_pixel.1) * ch;
        for (&w, &(r, c)) in e.weights.iter().zip(&e.src_indices) {
            if w == 0.0 {
                continue;
            }
            let s = (r * cols + c) * ch;
            for k in 0..ch {
                dst[s + k] += w * g_out[o + k];
            }
        }
    }
    Ok(grad)
}

/// A photo with the patch composited in, and which pixels the patch replaced.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeResult {
    pub image: ImageTensor,
    /// Row-major, `true` where the patch replaced the photo.
    pub coverage_mask: Vec<bool>,
}

/// Opaque composite of a grayscale patch onto a photo (before any alignment).
/// Covered pixels take the sampled patch value in every channel.
pub fn apply_patch(
    photo: &ImageTensor,
    patch: &ImageTensor,
    grid: &SamplingGrid,
) -> Result<CompositeResult> {
    if patch.channels() != 1 {
        return Err(SamplerError::PatchNotGray(patch.channels()));
    }
    check_shape(grid.out_shape, photo.shape())?;
    let sampled = sample_bilinear(patch, grid)?;
    let ch = photo.channels();
    let mut image = photo.clone();
    let coverage_mask = grid.coverage();
    let dst = image.data_mut();
    for (i, (&covered, &v)) in coverage_mask.iter().zip(sampled.data()).enumerate() {
        if covered {
            dst[i * ch..(i + 1) * ch].fill(v);
        }
    }
    Ok(CompositeResult {
        image,
        coverage_mask,
    })
}

/// Gradient of a composite with respect to the patch: covered pixels' channel
/// gradients are summed and scattered through the patch grid.
pub fn apply_patch_adjoint(
    grad_composite: &ImageTensor,
    grid: &SamplingGrid,
) -> Result<ImageTensor> {
    check_shape(grid.out_shape, grad_composite.shape())?;
    let ch = grad_composite.channels();
    let (rows, cols) = grid.out_shape;
    let mut gray = ImageTensor::zeros(rows, cols, 1);
    let src = grad_composite.data();
    let dst = gray.data_mut();
    for e in &grid.entries {
        let i = e.out_pixel.0 * cols + e.out_pixel.1;
        dst[i] = src[i * ch..(i + 1) * ch].iter().sum();
    }
    sample_adjoint(&gray, grid)
}

/// Warps a (patched) photo to the aligned crop defined by `align_grid`.
pub fn align_face(photo: &ImageTensor, align_grid: &SamplingGrid) -> Result<ImageTensor> {
    sample_bilinear(photo, align_grid)
}
