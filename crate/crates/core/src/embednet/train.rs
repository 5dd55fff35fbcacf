//! Mini-batch SGD with momentum on the margin loss.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    arcface_margin_loss, dot, EmbedError, EmbedNet, EmbedNetConfig, Embedding, ModelCheckpoint,
    NetGradients, Result, TrainingMetadata,
};
use crate::image::ImageTensor;

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: ImageTensor,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Training stops once nearest-centre accuracy reaches this value, but
    /// not before `min_epochs`.
    pub target_accuracy: f64,
    pub min_epochs: usize,
    /// After every step the dense bias moves against the batch mean of the
    /// pre-normalization outputs by this fraction, keeping embeddings centred
    /// on the origin across identities.
    pub centering_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            learning_rate: 0.003,
            momentum: 0.9,
            batch_size: 10,
            target_accuracy: 0.95,
            min_epochs: 20,
            centering_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean loss and accuracy after each epoch.
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
}

/// Index of the class centre with the highest cosine; ties go to the lower index.
pub fn nearest_center(embedding: &Embedding, checkpoint: &ModelCheckpoint) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for k in 0..checkpoint.num_classes {
        let c = dot(embedding.as_slice(), checkpoint.center(k));
        if c > best.1 {
            best = (k, c);
        }
    }
    best.0
}

fn normalize_rows(m: &mut [f64], d: usize) {
    for row in m.chunks_exact_mut(d) {
        let n = dot(row, row).sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

fn accuracy(checkpoint: &ModelCheckpoint, data: &[LabeledImage]) -> Result<f64> {
    let mut hits = 0usize;
    for item in data {
        let e = checkpoint.net.embed(&item.image)?;
        if nearest_center(&e, checkpoint) == item.label {
            hits += 1;
        }
    }
    Ok(hits as f64 / data.len() as f64)
}

/// Trains the embedding network and class centres from scratch.
///
/// Labels must be `0..num_classes` with at least two classes of at least ten
/// images each. Single-threaded and fully determined by `config.seed`.
pub fn train_target(
    data: &[LabeledImage],
    config: &EmbedNetConfig,
    train: &TrainConfig,
) -> Result<(ModelCheckpoint, TrainReport)> {
    config.validate()?;
    if train.batch_size == 0 || train.epochs == 0 || !(train.learning_rate > 0.0) {
        return Err(EmbedError::InvalidConfig(
            "epochs, batch size and learning rate must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&train.momentum) {
        return Err(EmbedError::InvalidConfig(
            "momentum must lie in [0, 1)".into(),
        ));
    }
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for item in data {
        *counts.entry(item.label).or_default() += 1;
    }
    if counts.len() < 2 {
        return Err(EmbedError::DatasetTooSmall(format!(
            "{} identities; at least 2 are required",
            counts.len()
        )));
    }
    if let Some((label, n)) = counts.iter().find(|(_, &n)| n < 10) {
        return Err(EmbedError::DatasetTooSmall(format!(
            "identity {label} has {n} images; at least 10 are required"
        )));
    }
    let num_classes = counts.keys().max().map_or(0, |m| m + 1);
    if counts.len() != num_classes {
        return Err(EmbedError::DatasetTooSmall(
            "labels must be contiguous from 0".into(),
        ));
    }

    let d = config.embedding_dim;
    let mut net = EmbedNet::init(config)?;
    // Centres come from a separate stream so the network init matches EmbedNet::init.
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut centers: Vec<f64> = (0..num_classes * d)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    normalize_rows(&mut centers, d);

    let mut velocity = NetGradients::zeros_like(&net);
    let mut center_velocity = vec![0.0; centers.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport {
        epoch_loss: Vec::new(),
        epoch_accuracy: Vec::new(),
    };
    let mut best = 0.0f64;

    for epoch in 1..=train.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(train.batch_size) {
            let mut grads = NetGradients::zeros_like(&net);
            let mut center_grads = vec![0.0; centers.len()];
            let mut pre_norm_sum = vec![0.0; d];
            for &i in batch {
                let item = &data[i];
                let cache = net.forward(&item.image)?;
                for (s, u) in pre_norm_sum.iter_mut().zip(cache.pre_norm()) {
                    *s += u;
                }
                let out = arcface_margin_loss(
                    cache.embedding().as_slice(),
                    item.label,
                    &centers,
                    num_classes,
                    config.scale,
                    config.margin,
                )?;
                loss_sum += out.loss;
                net.backward(&cache, &out.grad_embedding, false, Some(&mut grads));
                for (g, v) in center_grads.iter_mut().zip(&out.grad_centers) {
                    *g += v;
                }
            }
            let inv = 1.0 / batch.len() as f64;
            for (param, (vel, grad)) in net
                .blocks_mut()
                .into_iter()
                .zip(velocity.blocks_mut().into_iter().zip(grads.blocks_mut()))
            {
                for ((p, v), g) in param.iter_mut().zip(vel.iter_mut()).zip(grad.iter()) {
                    *v = train.momentum * *v + g * inv;
                    *p -= train.learning_rate * *v;
                }
            }
            for ((p, v), g) in centers
                .iter_mut()
                .zip(center_velocity.iter_mut())
                .zip(&center_grads)
            {
                *v = train.momentum * *v + g * inv;
                *p -= train.learning_rate * *v;
            }
            normalize_rows(&mut centers, d);
            for (b, s) in net.dense.bias.iter_mut().zip(&pre_norm_sum) {
                *b -= train.centering_rate * s * inv;
            }
        }

        let checkpoint = ModelCheckpoint {
            net: net.clone(),
            num_classes,
            centers: centers.clone(),
            metadata: TrainingMetadata::default(),
        };
        let acc = accuracy(&checkpoint, data)?;
        let mean_loss = loss_sum / data.len() as f64;
        report.epoch_loss.push(mean_loss);
        report.epoch_accuracy.push(acc);
        best = best.max(acc);
        debug!("epoch {epoch}: loss {mean_loss:.4} accuracy {acc:.4}");
        if !mean_loss.is_finite() {
            break;
        }
        if acc >= train.target_accuracy && epoch >= train.min_epochs {
            info!("reached accuracy {acc:.4} after {epoch} epochs");
            return Ok((
                ModelCheckpoint {
                    metadata: TrainingMetadata {
                        epochs: epoch,
                        train_accuracy: acc,
                    },
                    ..checkpoint
                },
                report,
            ));
        }
    }
    Err(EmbedError::NonConvergence {
        best_accuracy: best,
        epochs: report.epoch_accuracy.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_identity_is_too_small() {
        let data: Vec<LabeledImage> = (0..12)
            .map(|_| LabeledImage {
                image: ImageTensor::zeros(8, 8, 3),
                label: 0,
            })
            .collect();
        let config = EmbedNetConfig {
            input: [8, 8, 3],
            channels: vec![2],
            embedding_dim: 4,
            ..EmbedNetConfig::default()
        };
        assert!(matches!(
            train_target(&data, &config, &TrainConfig::default()),
            Err(EmbedError::DatasetTooSmall(_))
        ));
    }

    #[test]
    fn identity_with_few_images_is_too_small() {
        let mut data: Vec<LabeledImage> = (0..12)
            .map(|_| LabeledImage {
                image: ImageTensor::zeros(8, 8, 3),
                label: 0,
            })
            .collect();
        data.extend((0..4).map(|_| LabeledImage {
            image: ImageTensor::zeros(8, 8, 3),
            label: 1,
        }));
        let config = EmbedNetConfig {
            input: [8, 8, 3],
            channels: vec![2],
            embedding_dim: 4,
            ..EmbedNetConfig::default()
        };
        assert!(matches!(
            train_target(&data, &config, &TrainConfig::default()),
            Err(EmbedError::DatasetTooSmall(_))
        ));
    }
}
