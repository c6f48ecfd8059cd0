//! Fixtures shared by the benchmarks.

use asgd_core::{generate, initial_state, Dataset, InitStrategy, ModelState, SyntheticSpec};

/// A synthetic problem of the given shape and a sampled starting state.
pub fn fixture(n: usize, k: usize, m: usize) -> (Dataset, ModelState) {
    let spec = SyntheticSpec {
        n,
        k,
        m,
        seed: 1,
        ..SyntheticSpec::default()
    };
    let (data, _) = generate(&spec).expect("valid spec");
    let w = initial_state(&data, k, 2, InitStrategy::Sample).expect("k <= m");
    (data, w)
}
