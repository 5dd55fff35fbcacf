//! A small convolutional face-embedding network with hand-written
//! reverse-mode gradients.
//!
//! Architecture: `blocks × (3×3 conv, leaky ReLU, 2×2 max-pool)`, a dense
//! projection to `d` dimensions, then L2 normalization. Activations are stored
//! channel-major (`C × H × W`); images enter and gradients leave as
//! interleaved [`ImageTensor`]s.

mod arcface;
mod checkpoint;
mod layers;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::ImageTensor;

pub use arcface::{arcface_margin_loss, ArcFaceOutput};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use train::{nearest_center, train_target, LabeledImage, TrainConfig, TrainReport};

use layers::{conv3x3_backward, conv3x3_forward, maxpool2_backward, maxpool2_forward};

/// Slope of the leaky rectifier for negative inputs.
pub const LEAKY_SLOPE: f64 = 0.01;

/// Pixels enter the first conv as `INPUT_SCALE · (v − INPUT_CENTER)`, i.e. `[0, 1] → [−1, 1]`.
pub const INPUT_CENTER: f64 = 0.5;
pub const INPUT_SCALE: f64 = 2.0;

/// Subtracts the mean. The map is a symmetric projection, so the same call
/// serves as its own adjoint in the reverse pass.
fn center_in_place(v: &mut [f64]) {
    if v.is_empty() {
        return;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EmbedError {
    #[error("input shape mismatch: expected {expected:?}, got {actual:?}")]
    ShapeMismatch {
        expected: (usize, usize, usize),
        actual: (usize, usize, usize),
    },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid label {label} for {num_classes} classes")]
    InvalidLabel { label: usize, num_classes: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dataset too small: {0}")]
    DatasetTooSmall(String),
    #[error("training did not reach the accuracy gate; best accuracy {best_accuracy:.4} after {epochs} epochs")]
    NonConvergence { best_accuracy: f64, epochs: usize },
    #[error("checkpoint i/o on {path}: {message}")]
    Io { path: String, message: String },
}

pub type Result<T> = std::result::Result<T, EmbedError>;

/// Unit-L2 feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Normalizes `v` to unit length. Returns `None` for a zero or non-finite vector.
    pub fn normalize(v: Vec<f64>) -> Option<Self> {
        let norm = l2(&v);
        if !(norm > 0.0) || !norm.is_finite() {
            return None;
        }
        Some(Embedding(v.into_iter().map(|x| x / norm).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        l2(&self.0)
    }

    /// Cosine similarity; both sides are unit vectors so this is the dot product.
    pub fn cosine(&self, other: &Embedding) -> f64 {
        dot(&self.0, &other.0)
    }

    /// Normalized mean of several embeddings.
    pub fn mean(items: &[Embedding]) -> Option<Embedding> {
        let d = items.first()?.dim();
        let mut acc = vec![0.0; d];
        for e in items {
            for (a, v) in acc.iter_mut().zip(&e.0) {
                *a += v;
            }
        }
        Embedding::normalize(acc)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn l2(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedNetConfig {
    /// `[rows, cols, channels]`
    pub input: [usize; 3],
    /// Output channels of each conv block.
    pub channels: Vec<usize>,
    pub embedding_dim: usize,
    /// Additive angular margin `m` (radians).
    pub margin: f64,
    /// Logit scale `s`.
    pub scale: f64,
    pub seed: u64,
}

impl Default for EmbedNetConfig {
    fn default() -> Self {
        Self {
            input: [112, 112, 3],
            channels: vec![8, 16, 32],
            embedding_dim: 128,
            margin: 0.5,
            scale: 64.0,
            seed: 0,
        }
    }
}

impl EmbedNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(EmbedError::InvalidConfig(m));
        if self.input.contains(&0) || self.embedding_dim == 0 || self.channels.is_empty() {
            return bad("all dimensions must be positive and at least one block is needed".into());
        }
        if self.channels.contains(&0) {
            return bad("conv widths must be positive".into());
        }
        let div = 1usize << self.channels.len();
        if !self.input[0].is_multiple_of(div) || !self.input[1].is_multiple_of(div) {
            return bad(format!(
                "input {}x{} not divisible by 2^{} pooling",
                self.input[0],
                self.input[1],
                self.channels.len()
            ));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return bad(format!("margin {} outside [0, pi/2)", self.margin));
        }
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return bad(format!("scale {} must be positive", self.scale));
        }
        Ok(())
    }

    /// Flattened size entering the dense layer.
    pub fn dense_inputs(&self) -> usize {
        let div = 1usize << self.channels.len();
        (self.input[0] / div) * (self.input[1] / div) * self.channels.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[out][in][3][3]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    /// `[out][in]`
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Network weights (without class centres).
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedNet {
    pub config: EmbedNetConfig,
    pub convs: Vec<ConvLayer>,
    pub dense: DenseLayer,
}

/// Gradients with the same layout as [`EmbedNet`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NetGradients {
    pub convs: Vec<(Vec<f64>, Vec<f64>)>,
    pub dense: (Vec<f64>, Vec<f64>),
}

impl NetGradients {
    pub fn zeros_like(net: &EmbedNet) -> Self {
        Self {
            convs: net
                .convs
                .iter()
                .map(|c| (vec![0.0; c.weight.len()], vec![0.0; c.bias.len()]))
                .collect(),
            dense: (
                vec![0.0; net.dense.weight.len()],
                vec![0.0; net.dense.bias.len()],
            ),
        }
    }

    /// Parameter blocks in checkpoint order.
    pub(crate) fn blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for (w, b) in &mut self.convs {
            out.push(w);
            out.push(b);
        }
        out.push(&mut self.dense.0);
        out.push(&mut self.dense.1);
        out
    }
}

/// Activations retained by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of each conv block, channel-major.
    block_inputs: Vec<Vec<f64>>,
    /// Conv outputs before the rectifier.
    pre_activations: Vec<Vec<f64>>,
    /// Winning index inside each pooling window.
    pool_argmax: Vec<Vec<u32>>,
    dense_input: Vec<f64>,
    pre_norm: Vec<f64>,
    embedding: Embedding,
}

impl ForwardCache {
    pub fn embedding(&self) -> &Embedding {
        &self.embedding
    }

    /// Length of the embedding before normalization.
    /// Dense-layer output before L2 normalization.
    pub fn pre_norm(&self) -> &[f64] {
        &self.pre_norm
    }

    pub fn pre_norm_length(&self) -> f64 {
        l2(&self.pre_norm)
    }
}

impl EmbedNet {
    /// He-normal conv weights, scaled-normal dense weights, zero biases.
    pub fn init(config: &EmbedNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut convs = Vec::new();
        let mut in_ch = config.input[2];
        for &out_ch in &config.channels {
            let fan_in = (in_ch * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
            convs.push(ConvLayer {
                in_channels: in_ch,
                out_channels: out_ch,
                weight: (0..out_ch * in_ch * 9)
                    .map(|_| normal.sample(&mut rng))
                    .collect(),
                bias: vec![0.0; out_ch],
            });
            in_ch = out_ch;
        }
        let inputs = config.dense_inputs();
        let outputs = config.embedding_dim;
        let normal = Normal::new(0.0, (1.0 / inputs as f64).sqrt()).expect("valid std");
        let dense = DenseLayer {
            inputs,
            outputs,
            weight: (0..inputs * outputs)
                .map(|_| normal.sample(&mut rng))
                .collect(),
            bias: vec![0.0; outputs],
        };
        Ok(Self {
            config: config.clone(),
            convs,
            dense,
        })
    }

    pub fn input_shape(&self) -> (usize, usize, usize) {
        let [r, c, ch] = self.config.input;
        (r, c, ch)
    }

    pub(crate) fn blocks_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for conv in &mut self.convs {
            out.push(&mut conv.weight);
            out.push(&mut conv.bias);
        }
        out.push(&mut self.dense.weight);
        out.push(&mut self.dense.bias);
        out
    }

    pub(crate) fn blocks(&self) -> Vec<&Vec<f64>> {
        let mut out = Vec::new();
        for conv in &self.convs {
            out.push(&conv.weight);
            out.push(&conv.bias);
        }
        out.push(&self.dense.weight);
        out.push(&self.dense.bias);
        out
    }

    fn check_input(&self, image: &ImageTensor) -> Result<()> {
        let actual = (image.rows(), image.cols(), image.channels());
        let expected = self.input_shape();
        if actual != expected {
            return Err(EmbedError::ShapeMismatch { expected, actual });
        }
        Ok(())
    }

    pub fn embed(&self, image: &ImageTensor) -> Result<Embedding> {
        Ok(self.forward(image)?.embedding)
    }

    pub fn forward(&self, image: &ImageTensor) -> Result<ForwardCache> {
        self.check_input(image)?;
        let (mut h, mut w, ch) = self.input_shape();
        // interleaved HWC -> CHW
        let mut x = vec![0.0; h * w * ch];
        for (i, px) in image.data().chunks_exact(ch).enumerate() {
            for (k, &v) in px.iter().enumerate() {
                x[k * h * w + i] = INPUT_SCALE * (v - INPUT_CENTER);
            }
        }
        let mut block_inputs = Vec::with_capacity(self.convs.len());
        let mut pre_activations = Vec::with_capacity(self.convs.len());
        let mut pool_argmax = Vec::with_capacity(self.convs.len());
        for conv in &self.convs {
            let z = conv3x3_forward(&x, conv, h, w);
            let a: Vec<f64> = z
                .iter()
                .map(|&v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
                .collect();
            let (pooled, argmax) = maxpool2_forward(&a, conv.out_channels, h, w);
            block_inputs.push(std::mem::replace(&mut x, pooled));
            pre_activations.push(z);
            pool_argmax.push(argmax);
            h /= 2;
            w /= 2;
        }
        center_in_place(&mut x);
        let d = &self.dense;
        let mut pre_norm = d.bias.clone();
        for (o, out) in pre_norm.iter_mut().enumerate() {
            *out += dot(&d.weight[o * d.inputs..(o + 1) * d.inputs], &x);
        }
        let embedding = Embedding::normalize(pre_norm.clone())
            .unwrap_or_else(|| Embedding(vec![0.0; pre_norm.len()]));
        Ok(ForwardCache {
            block_inputs,
            pre_activations,
            pool_argmax,
            dense_input: x,
            pre_norm,
            embedding,
        })
    }

    /// Reverse pass for `⟨embedding, upstream⟩`.
    ///
    /// Returns the input-pixel gradient when `want_pixels` is set, and
    /// accumulates parameter gradients into `param_grads` when given.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &[f64],
        want_pixels: bool,
        mut param_grads: Option<&mut NetGradients>,
    ) -> Option<ImageTensor> {
        let e = cache.embedding.as_slice();
        let len = l2(&cache.pre_norm);
        let radial = dot(e, upstream);
        // d e / d u = (I - e eᵀ) / ‖u‖
        let g_u: Vec<f64> = if len > 0.0 {
            e.iter()
                .zip(upstream)
                .map(|(ei, gi)| (gi - ei * radial) / len)
                .collect()
        } else {
            vec![0.0; e.len()]
        };

        let d = &self.dense;
        if let Some(grads) = param_grads.as_deref_mut() {
            let (gw, gb) = &mut grads.dense;
            for (o, &g) in g_u.iter().enumerate() {
                gb[o] += g;
                if g != 0.0 {
                    for (w, &x) in gw[o * d.inputs..(o + 1) * d.inputs]
                        .iter_mut()
                        .zip(&cache.dense_input)
                    {
                        *w += g * x;
                    }
                }
            }
        }
        let mut g_x = vec![0.0; d.inputs];
        for (o, &g) in g_u.iter().enumerate() {
            if g != 0.0 {
                for (gx, &w) in g_x
                    .iter_mut()
                    .zip(&d.weight[o * d.inputs..(o + 1) * d.inputs])
                {
                    *gx += g * w;
                }
            }
        }

        center_in_place(&mut g_x);
        let (rows, cols, ch) = self.input_shape();
        for (b, conv) in self.convs.iter().enumerate().rev() {
            let (h, w) = (rows >> b, cols >> b);
            let mut g_z = maxpool2_backward(&g_x, &cache.pool_argmax[b], conv.out_channels, h, w);
            for (g, &z) in g_z.iter_mut().zip(&cache.pre_activations[b]) {
                if z <= 0.0 {
                    *g *= LEAKY_SLOPE;
                }
            }
            let need_input = b > 0 || want_pixels;
            let layer_grads = param_grads.as_deref_mut().map(|g| {
                let (w, bias) = &mut g.convs[b];
                (w, bias)
            });
            g_x = conv3x3_backward(
                &g_z,
                &cache.block_inputs[b],
                conv,
                h,
                w,
                need_input,
                layer_grads,
            )?;
        }
        if !want_pixels {
            return None;
        }
        let plane = rows * cols;
        let mut out = ImageTensor::zeros(rows, cols, ch);
        let dst = out.data_mut();
        for k in 0..ch {
            for i in 0..plane {
                dst[i * ch + k] = INPUT_SCALE * g_x[k * plane + i];
            }
        }
        Some(out)
    }
}

/// Network plus trained class centres and provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheckpoint {
    pub net: EmbedNet,
    pub num_classes: usize,
    /// `num_classes × d`, rows unit-normalized.
    pub centers: Vec<f64>,
    pub metadata: TrainingMetadata,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMetadata {
    pub epochs: usize,
    pub train_accuracy: f64,
}

impl ModelCheckpoint {
    pub fn config(&self) -> &EmbedNetConfig {
        &self.net.config
    }

    pub fn center(&self, class: usize) -> &[f64] {
        let d = self.net.config.embedding_dim;
        &self.centers[class * d..(class + 1) * d]
    }
}

/// Embedding of `image` under the checkpoint's network.
pub fn forward_embed(image: &ImageTensor, checkpoint: &ModelCheckpoint) -> Result<Embedding> {
    checkpoint.net.embed(image)
}

/// Gradient of `⟨embed(image), upstream⟩` with respect to the input pixels.
pub fn backward_to_pixels(
    image: &ImageTensor,
    checkpoint: &ModelCheckpoint,
    upstream: &[f64],
) -> Result<ImageTensor> {
    let net = &checkpoint.net;
    if upstream.len() != net.config.embedding_dim {
        return Err(EmbedError::InvalidConfig(format!(
            "upstream gradient has {} entries, embedding has {}",
            upstream.len(),
            net.config.embedding_dim
        )));
    }
    let cache = net.forward(image)?;
    Ok(net
        .backward(&cache, upstream, true, None)
        .expect("pixel gradient requested"))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> EmbedNetConfig {
        EmbedNetConfig {
            input: [8, 8, 3],
            channels: vec![3, 4],
            embedding_dim: 6,
            seed: 11,
            ..EmbedNetConfig::default()
        }
    }

    fn tiny_model(seed: u64) -> ModelCheckpoint {
        let mut config = tiny_config();
        config.seed = seed;
        let net = EmbedNet::init(&config).unwrap();
        ModelCheckpoint {
            net,
            num_classes: 1,
            centers: {
                let mut c = vec![0.0; config.embedding_dim];
                c[0] = 1.0;
                c
            },
            metadata: TrainingMetadata::default(),
        }
    }

    fn random_image(rows: usize, cols: usize, seed: u64) -> ImageTensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor::from_fn(rows, cols, 3, |_, _, _| rng.random::<f64>())
    }

    #[test]
    fn embeddings_are_unit_and_deterministic() {
        let model = tiny_model(3);
        let img = random_image(8, 8, 1);
        let a = forward_embed(&img, &model).unwrap();
        let b = forward_embed(&img, &model).unwrap();
        assert_eq!(a, b);
        assert!((a.norm() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn wrong_shape_rejected() {
        let model = tiny_model(3);
        let img = random_image(8, 4, 1);
        assert!(matches!(
            forward_embed(&img, &model),
            Err(EmbedError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn radial_upstream_is_annihilated() {
        let model = tiny_model(5);
        let img = random_image(8, 8, 2);
        let e = forward_embed(&img, &model).unwrap();
        let g = backward_to_pixels(&img, &model, e.as_slice()).unwrap();
        // compare against a tangential upstream to fix the scale
        let mut t = vec![0.0; e.dim()];
        t[1] = 1.0;
        let r = dot(&t, e.as_slice());
        let t: Vec<f64> = t.iter().zip(e.as_slice()).map(|(a, b)| a - r * b).collect();
        let gt = backward_to_pixels(&img, &model, &t).unwrap();
        let scale = l2(gt.data());
        assert!(scale > 0.0);
        assert!(l2(g.data()) <= 1e-6 * scale.max(1.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        let model = tiny_model(5);
        let img = random_image(8, 8, 2);
        let g = backward_to_pixels(&img, &model, &[0.0; 6]).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pixel_gradient_matches_finite_differences() {
        use rand::Rng;
        let model = tiny_model(9);
        let img = random_image(8, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let upstream: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
        let g = backward_to_pixels(&img, &model, &upstream).unwrap();
        let f = |im: &ImageTensor| dot(forward_embed(im, &model).unwrap().as_slice(), &upstream);
        let h = 1e-5;
        for _ in 0..12 {
            let i = rng.random_range(0..img.data().len());
            let mut plus = img.clone();
            plus.data_mut()[i] += h;
            let mut minus = img.clone();
            minus.data_mut()[i] -= h;
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            let an = g.data()[i];
            let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(err < 1e-4, "pixel {i}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn parameter_gradient_matches_finite_differences() {
        use rand::Rng;
        let model = tiny_model(13);
        let img = random_image(8, 8, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let upstream: Vec<f64> = (0..6).map(|_| rng.random::<f64>() - 0.5).collect();
        let mut grads = NetGradients::zeros_like(&model.net);
        let cache = model.net.forward(&img).unwrap();
        model
            .net
            .backward(&cache, &upstream, false, Some(&mut grads));
        let analytic: Vec<Vec<f64>> = grads.blocks_mut().into_iter().map(|b| b.clone()).collect();
        let h = 1e-5;
        for (bi, block) in analytic.iter().enumerate() {
            for _ in 0..3 {
                let i = rng.random_range(0..block.len());
                let eval = |delta: f64| {
                    let mut net = model.net.clone();
                    net.blocks_mut()[bi][i] += delta;
                    dot(net.embed(&img).unwrap().as_slice(), &upstream)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = block[i];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                assert!(err < 1e-4, "block {bi} idx {i}: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = EmbedNetConfig::default();
        assert!(c.validate().is_ok());
        c.margin = 2.0;
        assert!(c.validate().is_err());
        let c = EmbedNetConfig {
            input: [100, 100, 3],
            ..EmbedNetConfig::default()
        };
        assert!(c.validate().is_err());
        let c = EmbedNetConfig {
            scale: 0.0,
            ..EmbedNetConfig::default()
        };
        assert!(c.validate().is_err());
    }
}
