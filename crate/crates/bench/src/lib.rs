//! Criterion benchmarks for the hot paths; run with `cargo bench -p causal-voxel-bench`.

use causal_voxel::phantom::{PhantomGenerator, VoxelGrid};

/// A generated volume and its latents, shared by the benchmarks.
pub fn fixture(seed: u64) -> (PhantomGenerator, Vec<f64>, VoxelGrid) {
    let gen = PhantomGenerator::default();
    let w: Vec<f64> = (0..gen.style_dim()).map(|i| 0.3 * ((i as f64 + seed as f64) * 1.7).sin()).collect();
    let image = gen.generate(&w, &gen.noise_from_seed(seed)).expect("default generator renders");
    (gen, w, image)
}
