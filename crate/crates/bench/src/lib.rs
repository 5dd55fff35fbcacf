//! Fixtures shared by the benchmarks: a synthetic capture with its grids and
//! an untrained network of the default shape.

use patchforge::embednet::{EmbedNet, EmbedNetConfig, ModelCheckpoint, TrainingMetadata};
use patchforge::geometry::LandmarkTemplate;
use patchforge::losses::PhotoGrids;
use patchforge::pipeline::{generate_synthetic_identities, CapturePhoto};
use patchforge::SyntheticIdentitySpec;

pub fn capture() -> CapturePhoto {
    let spec = SyntheticIdentitySpec {
        num_identities: 1,
        images_per_identity: 1,
        train_per_identity: 1,
        val_per_identity: 0,
        ..SyntheticIdentitySpec::default()
    };
    generate_synthetic_identities(&spec)
        .expect("default spec is valid")
        .photos
        .remove(0)
}

pub fn grids(photo: &CapturePhoto) -> PhotoGrids {
    let shape = SyntheticIdentitySpec::default().layout.patch_shape();
    photo
        .grids(shape, &LandmarkTemplate::default(), None)
        .expect("synthetic annotations are valid")
}

pub fn untrained_checkpoint() -> ModelCheckpoint {
    let config = EmbedNetConfig::default();
    let d = config.embedding_dim;
    let net = EmbedNet::init(&config).expect("default config is valid");
    let mut centers = vec![0.0; 2 * d];
    centers[0] = 1.0;
    centers[d + 1] = 1.0;
    ModelCheckpoint {
        net,
        num_classes: 2,
        centers,
        metadata: TrainingMetadata::default(),
    }
}
