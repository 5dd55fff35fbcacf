use patchforge::geometry::{
    estimate_homography, estimate_similarity, precompute_patch_grid, quad_is_non_degenerate,
    CellCorrespondence, Point2, SimilarityTransform,
};
use proptest::prelude::*;

fn point(range: f64) -> impl Strategy<Value = Point2> {
    (-range..range, -range..range).prop_map(|(x, y)| Point2::new(x, y))
}

/// Convex quads: a rectangle with every corner jittered by less than a
/// quarter of its shorter side.
fn convex_quad() -> impl Strategy<Value = [Point2; 4]> {
    (
        point(200.0),
        20.0..150.0f64,
        20.0..150.0f64,
        prop::array::uniform4(point(1.0)),
    )
        .prop_map(|(origin, w, h, jitter)| {
            let j = 0.24 * w.min(h);
            let base = [
                Point2::new(origin.x, origin.y),
                Point2::new(origin.x + w, origin.y),
                Point2::new(origin.x + w, origin.y + h),
                Point2::new(origin.x, origin.y + h),
            ];
            let mut q = base;
            for (p, d) in q.iter_mut().zip(jitter) {
                p.x += j * d.x;
                p.y += j * d.y;
            }
            q
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn homography_maps_corners_onto_corners(src in convex_quad(), dst in convex_quad()) {
        prop_assume!(quad_is_non_degenerate(&src) && quad_is_non_degenerate(&dst));
        let h = estimate_homography(&src, &dst).unwrap();
        for (s, d) in src.iter().zip(&dst) {
            let p = h.apply(*s).unwrap();
            prop_assert!(p.distance(d) <= 1e-9, "{p:?} vs {d:?}");
        }
    }

    #[test]
    fn homography_inverse_round_trips(src in convex_quad(), dst in convex_quad(), t in (0.0..1.0f64, 0.0..1.0f64)) {
        let h = estimate_homography(&src, &dst).unwrap();
        let inv = h.inverse().unwrap();
        // An interior point of the source quad.
        let top = src[0].lerp(src[1], t.0);
        let bottom = src[3].lerp(src[2], t.0);
        let p = top.lerp(bottom, t.1);
        let back = inv.apply(h.apply(p).unwrap()).unwrap();
        prop_assert!(back.distance(&p) <= 1e-8);
    }

    #[test]
    fn similarity_is_recovered(
        scale in 0.2..5.0f64,
        rotation in -3.1..3.1f64,
        t in point(150.0),
        pts in prop::array::uniform5(point(60.0)),
    ) {
        let spread = pts.iter().map(|p| p.distance(&pts[0])).fold(0.0, f64::max);
        prop_assume!(spread > 5.0);
        let truth = SimilarityTransform::new(scale, rotation, t).unwrap();
        let dst: Vec<Point2> = pts.iter().map(|p| truth.apply(*p)).collect();
        let est = estimate_similarity(&pts, &dst).unwrap();
        prop_assert!((est.scale - scale).abs() <= 1e-8 * scale.max(1.0));
        let dtheta = (est.rotation - rotation + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU)
            - std::f64::consts::PI;
        prop_assert!(dtheta.abs() <= 1e-8);
        prop_assert!(est.translation.distance(&t) <= 1e-8 * t.x.abs().max(t.y.abs()).max(1.0));
    }

    #[test]
    fn patch_grid_reads_stay_inside_the_patch(dst in convex_quad()) {
        // Shift the quad into a 400×400 photo.
        let (minx, miny) = dst.iter().fold((f64::MAX, f64::MAX), |(a, b), p| (a.min(p.x), b.min(p.y)));
        let quad = dst.map(|p| Point2::new(p.x - minx + 5.0, p.y - miny + 5.0));
        let cell = CellCorrespondence {
            id: 0,
            patch_corners: [
                Point2::new(-0.5, -0.5),
                Point2::new(7.5, -0.5),
                Point2::new(7.5, 5.5),
                Point2::new(-0.5, 5.5),
            ],
            photo_corners: quad,
        };
        let grid = precompute_patch_grid(&[cell], (6, 8), (400, 400)).unwrap();
        prop_assert!(!grid.entries.is_empty());
        for e in &grid.entries {
            prop_assert!(e.src_coord.x >= 0.0 && e.src_coord.x <= 7.0);
            prop_assert!(e.src_coord.y >= 0.0 && e.src_coord.y <= 5.0);
            let sum: f64 = e.weights.iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-12);
        }
    }
}
