//! Inputs shared by the benchmarks.

use roadfuse::synth::{synth_tiles, SynthConfig};
use roadfuse::{Scalar, Shape, Tensor, TileSample};

/// Deterministic values in `[-1, 1)` without a random generator.
pub fn pattern<T: Scalar>(shape: Shape, salt: usize) -> Tensor<T> {
    Tensor::from_fn(shape, |n, c, y, x| {
        let k = (n * 7919 + c * 104_729 + y * 1_299_709 + x * 15_485_863 + salt * 32_452_843) % 2000;
        T::from_f64(k as f64 / 1000.0 - 1.0).unwrap()
    })
}

/// Default synthetic tiles of side `size`.
pub fn tiles(size: usize, count: usize) -> Vec<TileSample> {
    synth_tiles(&SynthConfig::default(), size, count, 1)
        .expect("synthetic tiles")
        .into_iter()
        .map(|t| t.tile)
        .collect()
}
