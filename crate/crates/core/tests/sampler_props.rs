use patchforge::geometry::{precompute_alignment_grid, Point2, SamplingGrid, SimilarityTransform};
use patchforge::image::ImageTensor;
use patchforge::sampler::{apply_patch, apply_patch_adjoint, sample_adjoint, sample_bilinear};
use proptest::prelude::*;

fn image(rows: usize, cols: usize, ch: usize) -> impl Strategy<Value = ImageTensor> {
    prop::collection::vec(-1.0..1.0f64, rows * cols * ch)
        .prop_map(move |v| ImageTensor::from_vec(rows, cols, ch, v))
}

/// A random similarity warp from an `out`-sized grid into a `src`-sized image,
/// partly reaching outside the source.
fn warp_grid(out: (usize, usize), src: (usize, usize)) -> impl Strategy<Value = SamplingGrid> {
    (0.5..2.0f64, -0.6..0.6f64, -4.0..4.0f64, -4.0..4.0f64).prop_map(move |(s, r, tx, ty)| {
        let sim = SimilarityTransform::new(s, r, Point2::new(tx, ty)).unwrap();
        precompute_alignment_grid(&sim, out, src)
    })
}

fn dot(a: &ImageTensor, b: &ImageTensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn adjoint_matches_forward(
        grid in warp_grid((9, 11), (12, 10)),
        x in image(12, 10, 3),
        y in image(9, 11, 3),
    ) {
        let lhs = dot(&sample_bilinear(&x, &grid).unwrap(), &y);
        let rhs = dot(&x, &sample_adjoint(&y, &grid).unwrap());
        let scale = lhs.abs().max(rhs.abs()).max(1e-300);
        prop_assert!((lhs - rhs).abs() / scale <= 1e-10 || (lhs - rhs).abs() <= 1e-13);
    }

    #[test]
    fn sampling_is_linear(
        grid in warp_grid((8, 8), (10, 10)),
        x in image(10, 10, 1),
        y in image(10, 10, 1),
        a in -3.0..3.0f64,
        b in -3.0..3.0f64,
    ) {
        let combo = ImageTensor::from_vec(
            10, 10, 1,
            x.data().iter().zip(y.data()).map(|(p, q)| a * p + b * q).collect(),
        );
        let lhs = sample_bilinear(&combo, &grid).unwrap();
        let sx = sample_bilinear(&x, &grid).unwrap();
        let sy = sample_bilinear(&y, &grid).unwrap();
        for ((l, p), q) in lhs.data().iter().zip(sx.data()).zip(sy.data()) {
            prop_assert!((l - (a * p + b * q)).abs() <= 1e-12);
        }
    }

    #[test]
    fn in_bounds_weights_partition_unity(grid in warp_grid((10, 10), (10, 10)), c in 0.0..1.0f64) {
        let constant = ImageTensor::filled(10, 10, 1, c);
        let out = sample_bilinear(&constant, &grid).unwrap();
        for e in &grid.entries {
            let v = out.get(e.out_pixel.0, e.out_pixel.1, 0);
            if e.in_bounds() {
                prop_assert!((e.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!((v - c).abs() <= 1e-12);
            } else {
                prop_assert_eq!(v, 0.0);
            }
        }
    }

    #[test]
    fn composite_adjoint_matches_forward(
        grid in warp_grid((12, 12), (5, 7)),
        patch in image(5, 7, 1),
        photo in image(12, 12, 3),
        g in image(12, 12, 3),
    ) {
        let base = apply_patch(&photo, &ImageTensor::zeros(5, 7, 1), &grid).unwrap().image;
        let with = apply_patch(&photo, &patch, &grid).unwrap().image;
        // The composite is affine in the patch; its linear part is `with - base`.
        let diff = ImageTensor::from_vec(12, 12, 3, with.data().iter().zip(base.data()).map(|(a, b)| a - b).collect());
        let lhs = dot(&diff, &g);
        let rhs = dot(&patch, &apply_patch_adjoint(&g, &grid).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0));
    }
}
