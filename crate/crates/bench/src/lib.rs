//! Fixtures shared by the benchmarks.

use rand::Rng;
use ranger_core::memory::MemoryBank;
use ranger_core::rng;
use ranger_core::Matrix;

pub fn random_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
    let mut r = rng::stream(seed, "bench");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect())
        .expect("consistent shape")
}

pub fn random_bank(seed: u64, size: usize, dim: usize) -> MemoryBank {
    MemoryBank::new((0..size).map(|i| format!("s{i}")).collect(), random_matrix(seed, size, dim))
        .expect("valid bank")
}

/// Token sequences over a small alphabet so n-grams repeat.
pub fn random_corpus(seed: u64, cases: usize, len: usize) -> Vec<Vec<u32>> {
    let mut r = rng::stream(seed, "bench.corpus");
    (0..cases)
        .map(|_| (0..len).map(|_| r.random_range(0..50)).collect())
        .collect()
}
