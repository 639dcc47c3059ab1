//! Shared fixtures for the criterion benches.

use inrpack::DenseMatrix;

/// Deterministic pseudo-random normalized coordinates in `[-1, 1]^4`.
pub fn coord_batch(rows: usize, seed: u64) -> DenseMatrix<f32> {
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..rows * 4)
        .map(|_| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
        })
        .collect();
    DenseMatrix::from_vec(rows, 4, data).expect("rows * 4 values")
}

/// Deterministic pseudo-random points in the unit cube.
pub fn unit_points(count: usize, seed: u64) -> Vec<[f32; 3]> {
    let m = coord_batch(count, seed);
    m.as_slice()
        .chunks_exact(4)
        .map(|c| [c[0] * 0.5 + 0.5, c[1] * 0.5 + 0.5, c[2] * 0.5 + 0.5])
        .collect()
}
