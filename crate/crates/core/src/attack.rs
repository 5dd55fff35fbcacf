//! Momentum iterative sign-gradient optimisation of a grayscale patch.
//!
//! Each iteration evaluates `L(X, p)` and its gradient, accumulates the
//! L1-normalized gradient into a momentum buffer `g ← μ·g + ∇/‖∇‖₁`, and steps
//! `p ← clip(p − ε·sign(g), 0, 1)`. The loop stops early once the batch-mean
//! adversarial term drops below the configured threshold.

use std::io::Write;
use std::path::Path;
use std::time::{Duration, Instant};

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embednet::{Embedding, ModelCheckpoint};
use crate::image::ImageTensor;
pub use crate::losses::AttackMode;
use crate::losses::{
    patched_embedding, total_loss, ChainError, LossError, LossProblem, PhotoGrids,
};
use crate::pipeline::Split;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttackError {
    #[error("invalid attack configuration: {0}")]
    InvalidConfig(String),
    #[error("targeted mode requires a target embedding")]
    MissingTarget,
    #[error("no gallery class other than the ground truth is available")]
    NoEligibleClass,
    #[error("split {0} has no photos")]
    EmptySplit(String),
    #[error("no training photos supplied")]
    NoPhotos,
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("photo {index}: {source}")]
    Photo {
        index: usize,
        #[source]
        source: ChainError,
    },
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, AttackError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PatchInit {
    /// Every pixel at mid-gray 0.5.
    #[default]
    Constant,
    /// Independent uniform values in `[0, 1]` drawn from the seed.
    UniformRandom,
}

impl std::str::FromStr for PatchInit {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "constant" => Ok(PatchInit::Constant),
            "uniform-random" => Ok(PatchInit::UniformRandom),
            other => Err(format!("unknown patch init `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackConfig {
    /// Sign-step size ε.
    pub epsilon: f64,
    /// Momentum decay μ.
    pub mu: f64,
    /// TV weight τ.
    pub tau: f64,
    pub max_iters: usize,
    pub mode: AttackMode,
    /// Stop once the batch-mean adversarial loss falls below this value.
    pub stop_when_adv_below: f64,
    pub seed: u64,
    pub init: PatchInit,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0 / 16.0,
            mu: 0.9,
            tau: 1e-3,
            max_iters: 10_000,
            mode: AttackMode::Untargeted,
            stop_when_adv_below: 0.0,
            seed: 0,
            init: PatchInit::Constant,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AttackError::InvalidConfig(m.to_string()));
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return bad("epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.mu) {
            return bad("mu must lie in [0, 1)");
        }
        if !(self.tau >= 0.0) || !self.tau.is_finite() {
            return bad("tau must be non-negative");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1");
        }
        if self.stop_when_adv_below.is_nan() {
            return bad("stop threshold must be a number");
        }
        Ok(())
    }

    pub fn initial_patch(&self, rows: usize, cols: usize) -> ImageTensor {
        match self.init {
            PatchInit::Constant => ImageTensor::filled(rows, cols, 1, 0.5),
            PatchInit::UniformRandom => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                ImageTensor::from_fn(rows, cols, 1, |_, _, _| rng.random::<f64>())
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One momentum sign step. Returns the new accumulator and patch.
///
/// A zero gradient only decays the accumulator; `sign(0) = 0`, so pixels with
/// a zero accumulator stay put.
pub fn momentum_step(
    accum: &[f64],
    grad: &[f64],
    patch: &[f64],
    epsilon: f64,
    mu: f64,
) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(accum.len(), grad.len());
    assert_eq!(accum.len(), patch.len());
    let l1: f64 = grad.iter().map(|g| g.abs()).sum();
    let next: Vec<f64> = if l1 > 0.0 {
        accum
            .iter()
            .zip(grad)
            .map(|(a, g)| mu * a + g / l1)
            .collect()
    } else {
        accum.iter().map(|a| mu * a).collect()
    };
    let stepped = patch
        .iter()
        .zip(&next)
        .map(|(p, g)| (p - epsilon * sign(*g)).clamp(0.0, 1.0))
        .collect();
    (next, stepped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub adv: f64,
    pub tv: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    BudgetExhausted,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackTrace {
    /// Loss evaluated at the start of each iteration, before its step.
    pub records: Vec<IterationRecord>,
    pub stop_reason: StopReason,
    pub final_patch: ImageTensor,
    pub wall_time: Duration,
}

impl AttackTrace {
    /// Records and final patch match; wall time is ignored.
    pub fn same_outcome(&self, other: &AttackTrace) -> bool {
        self.records == other.records
            && self.stop_reason == other.stop_reason
            && self.final_patch == other.final_patch
    }

    pub fn last(&self) -> Option<&IterationRecord> {
        self.records.last()
    }

    /// `iter,adv,tv,total` with shortest round-trip float formatting.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,adv,tv,total\n");
        for r in &self.records {
            s.push_str(&format!("{},{},{},{}\n", r.iter, r.adv, r.tv, r.total));
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let io = |e: std::io::Error| AttackError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut f = std::fs::File::create(path).map_err(io)?;
        f.write_all(self.to_csv().as_bytes()).map_err(io)
    }
}

/// Inputs held fixed for one optimisation run.
#[derive(Debug, Clone, Copy)]
pub struct AttackInputs<'a> {
    pub photos: &'a [ImageTensor],
    pub grids: &'a [PhotoGrids],
    pub model: &'a ModelCheckpoint,
    pub gt_embedding: &'a Embedding,
    pub target_embedding: Option<&'a Embedding>,
    /// `(rows, cols)` of the patch.
    pub patch_shape: (usize, usize),
}

pub fn run_attack(inputs: &AttackInputs<'_>, config: &AttackConfig) -> Result<AttackTrace> {
    run_attack_observed(inputs, config, |_, _, _| {})
}

/// [`run_attack`], calling `observer(iter, before, after)` after every step.
pub fn run_attack_observed(
    inputs: &AttackInputs<'_>,
    config: &AttackConfig,
    mut observer: impl FnMut(usize, &ImageTensor, &ImageTensor),
) -> Result<AttackTrace> {
    config.validate()?;
    if inputs.photos.is_empty() {
        return Err(AttackError::NoPhotos);
    }
    let reference = match config.mode {
        AttackMode::Untargeted => inputs.gt_embedding,
        AttackMode::Targeted => inputs.target_embedding.ok_or(AttackError::MissingTarget)?,
    };
    let problem = LossProblem {
        photos: inputs.photos,
        grids: inputs.grids,
        model: inputs.model,
        reference,
        mode: config.mode,
        tau: config.tau,
    };
    let (rows, cols) = inputs.patch_shape;
    let start = Instant::now();
    let mut patch = config.initial_patch(rows, cols);
    let mut accum = vec![0.0; rows * cols];
    let mut records = Vec::new();
    let mut stop_reason = StopReason::BudgetExhausted;
    for iter in 1..=config.max_iters {
        let (loss, grad) = total_loss(&problem, &patch)?;
        records.push(IterationRecord {
            iter,
            adv: loss.adv,
            tv: loss.tv,
            total: loss.total,
        });
        if iter == 1 || iter % 50 == 0 {
            debug!(
                "iter {iter}: adv {:.4} tv {:.3} total {:.4}",
                loss.adv, loss.tv, loss.total
            );
        }
        if loss.adv < config.stop_when_adv_below {
            stop_reason = StopReason::Converged;
            info!(
                "adversarial loss {:.4} below threshold at iteration {iter}",
                loss.adv
            );
            break;
        }
        let (next_accum, next) =
            momentum_step(&accum, grad.data(), patch.data(), config.epsilon, config.mu);
        let next = ImageTensor::from_vec(rows, cols, 1, next);
        observer(iter, &patch, &next);
        accum = next_accum;
        patch = next;
    }
    Ok(AttackTrace {
        records,
        stop_reason,
        final_patch: patch,
        wall_time: start.elapsed(),
    })
}

/// Nearest gallery class to `attacker` by cosine, excluding `gt_class`.
/// Ties go to the lowest class id.
pub fn select_target_class(
    gallery: &[(usize, Embedding)],
    attacker: &Embedding,
    gt_class: usize,
) -> Result<(usize, Embedding)> {
    let mut best: Option<(usize, f64, &Embedding)> = None;
    for (class, e) in gallery {
        if *class == gt_class {
            continue;
        }
        let c = attacker.cosine(e);
        let better = match best {
            None => true,
            Some((bc, bv, _)) => c > bv || (c == bv && *class < bc),
        };
        if better {
            best = Some((*class, c, e));
        }
    }
    best.map(|(c, _, e)| (c, e.clone()))
        .ok_or(AttackError::NoEligibleClass)
}

/// Mean and standard error of the mean (`n − 1` sample deviation over `√n`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSem {
    pub mean: f64,
    /// Undefined for a single sample.
    pub sem: Option<f64>,
}

impl MeanSem {
    pub fn from_samples(values: &[f64]) -> Option<MeanSem> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let sem = (values.len() > 1).then(|| {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            var.sqrt() / n.sqrt()
        });
        Some(MeanSem { mean, sem })
    }
}

/// Photos of one split with their grids.
#[derive(Debug, Clone)]
pub struct EvalSplit {
    pub split: Split,
    pub photos: Vec<ImageTensor>,
    pub grids: Vec<PhotoGrids>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEvaluation {
    pub split: Split,
    pub n: usize,
    pub gt: MeanSem,
    pub target: Option<MeanSem>,
    pub gt_cosines: Vec<f64>,
    pub target_cosines: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationTable {
    pub splits: Vec<SplitEvaluation>,
}

impl EvaluationTable {
    pub fn split(&self, split: Split) -> Option<&SplitEvaluation> {
        self.splits.iter().find(|s| s.split == split)
    }
}

/// Cosines of the patched photos to the ground-truth (and target) embeddings,
/// summarised per split.
pub fn evaluate_patch(
    patch: &ImageTensor,
    splits: &[EvalSplit],
    model: &ModelCheckpoint,
    gt_embedding: &Embedding,
    target_embedding: Option<&Embedding>,
) -> Result<EvaluationTable> {
    let mut out = Vec::with_capacity(splits.len());
    for split in splits {
        if split.photos.is_empty() {
            return Err(AttackError::EmptySplit(split.split.to_string()));
        }
        if split.photos.len() != split.grids.len() {
            return Err(LossError::GridCountMismatch {
                photos: split.photos.len(),
                grids: split.grids.len(),
            }
            .into());
        }
        let mut gt = Vec::new();
        let mut target = Vec::new();
        for (index, (photo, grids)) in split.photos.iter().zip(&split.grids).enumerate() {
            let e = patched_embedding(photo, patch, grids, model)
                .map_err(|source| AttackError::Photo { index, source })?;
            gt.push(e.cosine(gt_embedding));
            if let Some(t) = target_embedding {
                target.push(e.cosine(t));
            }
        }
        out.push(SplitEvaluation {
            split: split.split,
            n: split.photos.len(),
            gt: MeanSem::from_samples(&gt).expect("non-empty"),
            target: MeanSem::from_samples(&target),
            gt_cosines: gt,
            target_cosines: target,
        });
    }
    Ok(EvaluationTable { splits: out })
}
