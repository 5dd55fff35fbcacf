//! Attack objective: `L(X, p) = L_adv(X, p) + τ·TV(p)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embednet::{EmbedError, Embedding, ModelCheckpoint};
use crate::geometry::SamplingGrid;
use crate::image::ImageTensor;
use crate::sampler::{align_face, apply_patch, apply_patch_adjoint, sample_adjoint, SamplerError};

/// Stabilizer inside the TV square root.
pub const TV_DELTA: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LossError {
    #[error("empty photo batch")]
    EmptyBatch,
    #[error("{photos} photos but {grids} grid pairs")]
    GridCountMismatch { photos: usize, grids: usize },
    #[error("embedding dimension {got} differs from reference dimension {want}")]
    DimensionMismatch { want: usize, got: usize },
    #[error("photo {index}: {source}")]
    Photo {
        index: usize,
        #[source]
        source: ChainError,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChainError {
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Which cosine the adversarial term drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackMode {
    /// Minimize `cos(e_xt, e)`: push away from the attacker's own identity.
    Untargeted,
    /// Minimize `-cos(e_xt, e_x')`: pull toward the chosen identity.
    Targeted,
}

impl AttackMode {
    /// Sign applied to the cosine with the reference embedding.
    pub fn sign(self) -> f64 {
        match self {
            AttackMode::Untargeted => 1.0,
            AttackMode::Targeted => -1.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            AttackMode::Untargeted => "untargeted",
            AttackMode::Targeted => "targeted",
        }
    }
}

impl std::str::FromStr for AttackMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "untargeted" => Ok(AttackMode::Untargeted),
            "targeted" => Ok(AttackMode::Targeted),
            other => Err(format!("unknown attack mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub adv: f64,
    pub tv: f64,
    /// Adversarial term of each photo before averaging.
    pub per_photo_adv: Vec<f64>,
}

/// Isotropic total variation of a single-channel patch.
///
/// Each pixel contributes `√(Δx² + Δy² + δ)` with forward differences; a
/// difference whose neighbour falls outside the patch is zero. The gradient is
/// exact for this stabilized expression.
pub fn tv_loss(patch: &ImageTensor) -> (f64, ImageTensor) {
    let (rows, cols) = patch.shape();
    let ch = patch.channels();
    assert_eq!(ch, 1, "tv_loss expects a single-channel patch");
    let p = patch.data();
    let mut grad = ImageTensor::zeros(rows, cols, 1);
    let g = grad.data_mut();
    let mut total = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let k = i * cols + j;
            let dx = if j + 1 < cols { p[k] - p[k + 1] } else { 0.0 };
            let dy = if i + 1 < rows {
                p[k] - p[k + cols]
            } else {
                0.0
            };
            let t = (dx * dx + dy * dy + TV_DELTA).sqrt();
            total += t;
            g[k] += (dx + dy) / t;
            if j + 1 < cols {
                g[k + 1] -= dx / t;
            }
            if i + 1 < rows {
                g[k + cols] -= dy / t;
            }
        }
    }
    (total, grad)
}

/// Batch-mean cosine objective and its gradient with respect to each embedding.
///
/// Untargeted: `mean(+⟨e_i, ref⟩)`. Targeted: `mean(-⟨e_i, ref⟩)`. Both are
/// minimized, so a negative value means the batch has crossed over: away from
/// the attacker's identity, or onto the target's side.
pub fn adv_loss(
    batch: &[Embedding],
    reference: &Embedding,
    mode: AttackMode,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if let Some(e) = batch.iter().find(|e| e.dim() != reference.dim()) {
        return Err(LossError::DimensionMismatch {
            want: reference.dim(),
            got: e.dim(),
        });
    }
    let n = batch.len() as f64;
    let sign = mode.sign();
    let loss = batch
        .iter()
        .map(|e| sign * e.cosine(reference))
        .sum::<f64>()
        / n;
    let grad: Vec<f64> = reference.as_slice().iter().map(|r| sign * r / n).collect();
    Ok((loss, vec![grad; batch.len()]))
}

/// Patch grid and alignment grid of one photo.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotoGrids {
    pub patch: SamplingGrid,
    pub align: SamplingGrid,
}

/// Everything fixed during an attack: photos, their grids, the model and the
/// reference embedding the adversarial term compares against.
#[derive(Debug, Clone, Copy)]
pub struct LossProblem<'a> {
    pub photos: &'a [ImageTensor],
    pub grids: &'a [PhotoGrids],
    pub model: &'a ModelCheckpoint,
    pub reference: &'a Embedding,
    pub mode: AttackMode,
    pub tau: f64,
}

/// Embedding of `photo` with `patch` applied, then aligned.
pub fn patched_embedding(
    photo: &ImageTensor,
    patch: &ImageTensor,
    grids: &PhotoGrids,
    model: &ModelCheckpoint,
) -> std::result::Result<Embedding, ChainError> {
    let composite = apply_patch(photo, patch, &grids.patch)?;
    let aligned = align_face(&composite.image, &grids.align)?;
    Ok(model.net.embed(&aligned)?)
}

/// Evaluates `L(X, p)` and `∇_p L` through the full chain
/// `apply_patch → align_face → embed → adv_loss`, plus `τ·TV(p)`.
///
/// Per-photo gradients are summed in photo order, so the result is
/// bit-reproducible.
pub fn total_loss(
    problem: &LossProblem<'_>,
    patch: &ImageTensor,
) -> Result<(LossBreakdown, ImageTensor)> {
    let LossProblem {
        photos,
        grids,
        model,
        reference,
        mode,
        tau,
    } = *problem;
    if photos.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if photos.len() != grids.len() {
        return Err(LossError::GridCountMismatch {
            photos: photos.len(),
            grids: grids.len(),
        });
    }
    if reference.dim() != model.net.config.embedding_dim {
        return Err(LossError::DimensionMismatch {
            want: model.net.config.embedding_dim,
            got: reference.dim(),
        });
    }
    let n = photos.len() as f64;
    let sign = mode.sign();
    let upstream: Vec<f64> = reference.as_slice().iter().map(|r| sign * r / n).collect();

    let (rows, cols) = patch.shape();
    let mut grad = ImageTensor::zeros(rows, cols, 1);
    let mut per_photo_adv = Vec::with_capacity(photos.len());
    for (index, (photo, g)) in photos.iter().zip(grids).enumerate() {
        let tag = |e: ChainError| LossError::Photo { index, source: e };
        let composite = apply_patch(photo, patch, &g.patch).map_err(|e| tag(e.into()))?;
        let aligned = align_face(&composite.image, &g.align).map_err(|e| tag(e.into()))?;
        let cache = model.net.forward(&aligned).map_err(|e| tag(e.into()))?;
        per_photo_adv.push(sign * cache.embedding().cosine(reference));
        if g.patch.entries.is_empty() {
            continue;
        }
        let g_aligned = model
            .net
            .backward(&cache, &upstream, true, None)
            .expect("pixel gradient requested");
        let g_photo = sample_adjoint(&g_aligned, &g.align).map_err(|e| tag(e.into()))?;
        let g_patch = apply_patch_adjoint(&g_photo, &g.patch).map_err(|e| tag(e.into()))?;
        for (a, b) in grad.data_mut().iter_mut().zip(g_patch.data()) {
            *a += b;
        }
    }
    let adv = per_photo_adv.iter().sum::<f64>() / n;
    let (tv, tv_grad) = tv_loss(patch);
    if tau != 0.0 {
        for (a, b) in grad.data_mut().iter_mut().zip(tv_grad.data()) {
            *a += tau * b;
        }
    }
    Ok((
        LossBreakdown {
            total: adv + tau * tv,
            adv,
            tv,
            per_photo_adv,
        },
        grad,
    ))
}
