use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use patchforge::attack::{AttackConfig, AttackMode};
use patchforge::embednet::backward_to_pixels;
use patchforge::geometry::{estimate_homography, precompute_patch_grid, Point2};
use patchforge::losses::{total_loss, tv_loss, LossProblem};
use patchforge::sampler::{apply_patch, sample_adjoint, sample_bilinear};
use patchforge::ImageTensor;
use patchforge_bench::{capture, grids, untrained_checkpoint};

fn geometry(c: &mut Criterion) {
    let src = [
        Point2::new(-0.5, -0.5),
        Point2::new(3.5, -0.5),
        Point2::new(3.5, 3.5),
        Point2::new(-0.5, 3.5),
    ];
    let dst = [
        Point2::new(27.0, 20.0),
        Point2::new(31.2, 20.1),
        Point2::new(31.0, 24.4),
        Point2::new(27.1, 24.2),
    ];
    c.bench_function("estimate_homography", |b| {
        b.iter(|| estimate_homography(black_box(&src), black_box(&dst)))
    });
    let photo = capture();
    let shape = patchforge::SyntheticIdentitySpec::default()
        .layout
        .patch_shape();
    c.bench_function("precompute_patch_grid/70_cells", |b| {
        b.iter(|| precompute_patch_grid(black_box(&photo.cells), shape, photo.image.shape()))
    });
}

fn sampling(c: &mut Criterion) {
    let photo = capture();
    let g = grids(&photo);
    let patch = ImageTensor::filled(g.patch.src_shape.0, g.patch.src_shape.1, 1, 0.5);
    c.bench_function("apply_patch", |b| {
        b.iter(|| apply_patch(black_box(&photo.image), black_box(&patch), &g.patch))
    });
    c.bench_function("align_face", |b| {
        b.iter(|| sample_bilinear(black_box(&photo.image), &g.align))
    });
    let upstream = ImageTensor::filled(112, 112, 3, 1.0);
    c.bench_function("align_face_adjoint", |b| {
        b.iter(|| sample_adjoint(black_box(&upstream), &g.align))
    });
    c.bench_function("tv_loss/20x56", |b| b.iter(|| tv_loss(black_box(&patch))));
}

fn network(c: &mut Criterion) {
    let ck = untrained_checkpoint();
    let photo = capture();
    let aligned = photo.aligned(&Default::default()).unwrap();
    let upstream = vec![1.0 / 128f64.sqrt(); 128];
    c.bench_function("embed/112x112", |b| {
        b.iter(|| ck.net.embed(black_box(&aligned)))
    });
    c.bench_function("backward_to_pixels/112x112", |b| {
        b.iter(|| backward_to_pixels(black_box(&aligned), &ck, &upstream))
    });

    let g = vec![grids(&photo)];
    let photos = vec![photo.image.clone()];
    let reference = ck.net.embed(&aligned).unwrap();
    let problem = LossProblem {
        photos: &photos,
        grids: &g,
        model: &ck,
        reference: &reference,
        mode: AttackMode::Untargeted,
        tau: AttackConfig::default().tau,
    };
    let (rows, cols) = g[0].patch.src_shape;
    let patch = ImageTensor::filled(rows, cols, 1, 0.5);
    c.bench_function("total_loss/one_photo", |b| {
        b.iter(|| total_loss(&problem, black_box(&patch)))
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = geometry, sampling, network
}
criterion_main!(benches);
