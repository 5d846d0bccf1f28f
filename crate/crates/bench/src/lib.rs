//! Seeded fixtures shared by the benchmarks.

use kslt_core::checkpoint::TensorRecord;
use kslt_core::{Checkpoint, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TENSOR: &str = "embedding";

pub fn uniform_sample(seed: u64, n: usize) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Sample::new((0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("non-empty")
}

/// A `vocab x dim` base tensor and a copy where every other row is nudged.
pub fn checkpoint_pair(seed: u64, vocab: usize, dim: usize) -> (Checkpoint, Checkpoint) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f32> = (0..vocab * dim).map(|_| rng.gen_range(-0.1..0.1)).collect();
    let mut tuned = base.clone();
    for row in tuned.chunks_mut(dim).step_by(2) {
        for x in row {
            *x += rng.gen_range(0.0..0.05);
        }
    }
    let wrap = |data| {
        let record = TensorRecord::new(TENSOR, vec![vocab, dim], data).expect("shape matches");
        Checkpoint::new(vec![record]).expect("single tensor")
    };
    (wrap(base), wrap(tuned))
}
