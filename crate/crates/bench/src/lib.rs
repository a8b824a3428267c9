//! Inputs shared by the benchmarks.

use isdet_core::Tensor;

/// Deterministic pseudo-random values in `[-1, 1)`.
pub fn filled(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut state = 0x9e37_79b9_7f4a_7c15u64;
    let data = (0..n)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 52) as f64 - 1.0
        })
        .collect();
    Tensor::new(shape, data).expect("positive shape")
}
