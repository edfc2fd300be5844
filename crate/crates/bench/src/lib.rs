//! Fixtures shared by the benchmarks.

use longseg_core::atlas::TetrahedralMesh;
use longseg_core::phantom::{self, StandardOptions};
use longseg_core::volio::{log_transform_relative, MultiContrastVolume};

/// Log-transformed standard phantom of edge `size` and an atlas built from
/// its own labels.
pub fn fixture(size: usize, spacing: usize) -> (MultiContrastVolume, TetrahedralMesh) {
    let spec = phantom::standard_spec(StandardOptions {
        size,
        ..Default::default()
    })
    .expect("standard phantom");
    let out = phantom::generate(&spec).expect("phantom generation");
    let atlas = phantom::atlas_from_labels(&[&out.labels[0]], spacing, 0.01).expect("atlas");
    let vol = log_transform_relative(&out.volumes[0], 1e-4).expect("log transform");
    (vol, atlas)
}
