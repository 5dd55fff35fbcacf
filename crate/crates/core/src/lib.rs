//! Adversarial patch synthesis against face-embedding models.
//!
//! The crate is organised along the attack workflow:
//!
//! * [`geometry`] estimates per-cell homographies and landmark similarity
//!   transforms, and precomputes the sparse [`SamplingGrid`]s that realise them.
//! * [`sampler`] composites a grayscale patch onto a photo and warps the photo
//!   to the 112×112 model input, with exact adjoints for gradient flow.
//! * [`embednet`] is the small white-box embedding network used as the target,
//!   with its additive-angular-margin trainer and checkpoint format.
//! * [`losses`] holds the total-variation and cosine objectives and the full
//!   patch → embedding loss chain.
//! * [`attack`] runs the momentum sign-gradient optimisation and evaluates
//!   finished patches.
//! * [`pipeline`] covers manifests, synthetic identities, chessboards, patch
//!   export and report tables.

// Negated comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attack;
pub mod embednet;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod pipeline;
pub mod sampler;

pub use attack::{AttackConfig, AttackMode, AttackTrace, PatchInit, StopReason};
pub use embednet::{EmbedNetConfig, Embedding, ModelCheckpoint};
pub use geometry::{CellCorrespondence, Homography, Point2, SamplingGrid, SimilarityTransform};
pub use image::ImageTensor;
pub use losses::LossBreakdown;
pub use pipeline::{CapturePhoto, GalleryEntry, PatchLayout, Split, SyntheticIdentitySpec};
pub use sampler::CompositeResult;

/// Side length of the aligned face crop fed to the embedding network.
pub const ALIGNED_SIZE: usize = 112;
