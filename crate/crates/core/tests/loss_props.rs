use patchforge::attack::momentum_step;
use patchforge::embednet::Embedding;
use patchforge::image::ImageTensor;
use patchforge::losses::{adv_loss, tv_loss, AttackMode, TV_DELTA};
use proptest::prelude::*;

fn patch(rows: usize, cols: usize) -> impl Strategy<Value = ImageTensor> {
    prop::collection::vec(0.0..1.0f64, rows * cols)
        .prop_map(move |v| ImageTensor::from_vec(rows, cols, 1, v))
}

fn embedding(d: usize) -> impl Strategy<Value = Embedding> {
    prop::collection::vec(-1.0..1.0f64, d).prop_filter_map("zero vector", Embedding::normalize)
}

proptest! {
    #[test]
    fn tv_ignores_constant_offsets(p in patch(5, 7), c in -0.5..0.5f64) {
        let shifted = ImageTensor::from_vec(5, 7, 1, p.data().iter().map(|v| v + c).collect());
        let (a, _) = tv_loss(&p);
        let (b, _) = tv_loss(&shifted);
        prop_assert!((a - b).abs() <= 1e-9 * a.max(1.0));
    }

    #[test]
    fn tv_of_constant_is_the_stabilizer_floor(rows in 1usize..8, cols in 1usize..8, c in 0.0..1.0f64) {
        let (t, g) = tv_loss(&ImageTensor::filled(rows, cols, 1, c));
        prop_assert!((t - (rows * cols) as f64 * TV_DELTA.sqrt()).abs() <= 1e-15);
        prop_assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn tv_gradient_is_orthogonal_to_offsets(p in patch(6, 6)) {
        // TV is shift invariant, so its gradient sums to zero.
        let (_, g) = tv_loss(&p);
        prop_assert!(g.data().iter().sum::<f64>().abs() <= 1e-9);
    }

    #[test]
    fn targeted_and_untargeted_are_mirror_images(
        batch in prop::collection::vec(embedding(8), 1..5),
        reference in embedding(8),
    ) {
        let (u, gu) = adv_loss(&batch, &reference, AttackMode::Untargeted).unwrap();
        let (t, gt) = adv_loss(&batch, &reference, AttackMode::Targeted).unwrap();
        prop_assert_eq!(u, -t);
        prop_assert!((-1.0..=1.0).contains(&u));
        for (a, b) in gu.iter().flatten().zip(gt.iter().flatten()) {
            prop_assert_eq!(*a, -*b);
        }
    }

    #[test]
    fn momentum_step_moves_each_pixel_by_epsilon_or_clips(
        accum in prop::collection::vec(-2.0..2.0f64, 30),
        grad in prop::collection::vec(-1.0..1.0f64, 30),
        p in prop::collection::vec(0.0..1.0f64, 30),
        eps in 0.001..0.2f64,
        mu in 0.0..0.99f64,
    ) {
        let (_, next) = momentum_step(&accum, &grad, &p, eps, mu);
        for (before, after) in p.iter().zip(&next) {
            prop_assert!((0.0..=1.0).contains(after));
            let d = after - before;
            let clipped = *after == 0.0 || *after == 1.0;
            prop_assert!(d == 0.0 || (d.abs() - eps).abs() <= 1e-15 || (clipped && d.abs() < eps));
        }
    }
}
