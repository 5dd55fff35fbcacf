use super::{dot, EmbedError, Result};

/// Loss value and gradients of the additive-angular-margin softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcFaceOutput {
    pub loss: f64,
    pub grad_embedding: Vec<f64>,
    /// `num_classes × d`, same layout as the centre matrix.
    pub grad_centers: Vec<f64>,
    pub cosines: Vec<f64>,
}

/// `cos(θ + m)` as a function of `c = cos θ`, and its derivative in `c`.
///
/// Past `θ = π − m` the margined angle would wrap around, so the curve
/// continues as `c − m·sin m`, which stays monotone in `θ`.
fn margined_cosine(c: f64, margin: f64) -> (f64, f64) {
    if margin == 0.0 {
        return (c, 1.0);
    }
    let (sin_m, cos_m) = margin.sin_cos();
    let threshold = (std::f64::consts::PI - margin).cos();
    if c > threshold {
        let c = c.clamp(-1.0, 1.0);
        let sin_t = (1.0 - c * c).max(0.0).sqrt();
        let value = c * cos_m - sin_t * sin_m;
        let slope = cos_m + sin_m * c / sin_t.max(1e-12);
        (value, slope)
    } else {
        (c - margin * sin_m, 1.0)
    }
}

/// Cross-entropy over `s·cos θ_j`, with the true class's angle widened by `m`.
///
/// `embedding` is expected to be unit length and the rows of `centers`
/// (`num_classes × d`) unit-normalized; cosines are taken as plain dot
/// products, so gradients treat both as free variables.
pub fn arcface_margin_loss(
    embedding: &[f64],
    label: usize,
    centers: &[f64],
    num_classes: usize,
    scale: f64,
    margin: f64,
) -> Result<ArcFaceOutput> {
    if label >= num_classes {
        return Err(EmbedError::InvalidLabel { label, num_classes });
    }
    let d = embedding.len();
    assert_eq!(centers.len(), num_classes * d, "centre matrix shape");
    let cosines: Vec<f64> = centers.chunks_exact(d).map(|w| dot(w, embedding)).collect();
    let (phi, phi_slope) = margined_cosine(cosines[label], margin);
    let logits: Vec<f64> = cosines
        .iter()
        .enumerate()
        .map(|(j, &c)| scale * if j == label { phi } else { c })
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
    let log_z = max + sum.ln();
    let loss = log_z - logits[label];

    let mut grad_embedding = vec![0.0; d];
    let mut grad_centers = vec![0.0; centers.len()];
    for (j, &l) in logits.iter().enumerate() {
        let p = (l - log_z).exp();
        let d_cos = if j == label {
            scale * (p - 1.0) * phi_slope
        } else {
            scale * p
        };
        let w = &centers[j * d..(j + 1) * d];
        for (g, &wv) in grad_embedding.iter_mut().zip(w) {
            *g += d_cos * wv;
        }
        for (g, &e) in grad_centers[j * d..(j + 1) * d].iter_mut().zip(embedding) {
            *g += d_cos * e;
        }
    }
    Ok(ArcFaceOutput {
        loss,
        grad_embedding,
        grad_centers,
        cosines,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = dot(&v, &v).sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    #[test]
    fn two_class_reference_value() {
        let e = vec![1.0, 0.0];
        let centers = vec![1.0, 0.0, -1.0, 0.0];
        let out = arcface_margin_loss(&e, 0, &centers, 2, 1.0, 0.0).unwrap();
        let e1 = 1f64.exp();
        let want = -(e1 / (e1 + 1.0 / e1)).ln();
        assert!((out.loss - want).abs() < 1e-12);
        assert!((out.loss - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn zero_margin_unit_scale_is_plain_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = unit((0..5).map(|_| rng.random::<f64>() - 0.5).collect());
        let centers: Vec<f64> = (0..4)
            .flat_map(|_| unit((0..5).map(|_| rng.random::<f64>() - 0.5).collect()))
            .collect();
        let out = arcface_margin_loss(&e, 2, &centers, 4, 1.0, 0.0).unwrap();
        let cos: Vec<f64> = centers.chunks(5).map(|w| dot(w, &e)).collect();
        let z: f64 = cos.iter().map(|c| c.exp()).sum();
        assert!((out.loss - (z.ln() - cos[2])).abs() < 1e-12);
    }

    #[test]
    fn invalid_label() {
        assert!(matches!(
            arcface_margin_loss(&[1.0], 3, &[1.0, 1.0], 2, 1.0, 0.1),
            Err(EmbedError::InvalidLabel {
                label: 3,
                num_classes: 2
            })
        ));
    }

    #[test]
    fn margin_never_lowers_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..200 {
            let e = unit((0..4).map(|_| rng.random::<f64>() - 0.5).collect());
            let centers: Vec<f64> = (0..3)
                .flat_map(|_| unit((0..4).map(|_| rng.random::<f64>() - 0.5).collect()))
                .collect();
            let m = 0.5;
            let theta = dot(&centers[..4], &e).clamp(-1.0, 1.0).acos();
            if theta <= 0.0 || theta >= std::f64::consts::PI - m {
                continue;
            }
            let with = arcface_margin_loss(&e, 0, &centers, 3, 16.0, m)
                .unwrap()
                .loss;
            let without = arcface_margin_loss(&e, 0, &centers, 3, 16.0, 0.0)
                .unwrap()
                .loss;
            assert!(with >= without);
        }
    }

    #[test]
    fn fallback_branch_is_monotone() {
        let m = 0.5;
        let mut prev = f64::INFINITY;
        for i in 0..=2000 {
            let theta = std::f64::consts::PI * i as f64 / 2000.0;
            let (v, _) = margined_cosine(theta.cos(), m);
            assert!(v <= prev + 1e-12, "not monotone at theta={theta}");
            prev = v;
        }
    }
}
