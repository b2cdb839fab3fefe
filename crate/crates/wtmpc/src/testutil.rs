//! Shared fixtures for the benchmark double-integrator study used across
//! module tests.

use nalgebra::{dmatrix, DMatrix};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::geometry::Polytope;
use crate::lti::{
    error_stack, make_lqr_gain, ErrorStack, LinearSystem, NoiseDataset, RiccatiOptions,
    SamplingMode, UniformOnPolytope,
};

pub fn benchmark_ab() -> (DMatrix<f64>, DMatrix<f64>) {
    (dmatrix![1.0, 1.0; 0.0, 1.0], dmatrix![0.5; 1.0])
}

pub fn benchmark_gain() -> DMatrix<f64> {
    let (a, b) = benchmark_ab();
    make_lqr_gain(
        &a,
        &b,
        &DMatrix::identity(2, 2),
        &dmatrix![0.1],
        RiccatiOptions::default(),
    )
    .unwrap()
}

pub fn noise_box() -> Polytope {
    Polytope::hyper_box(&[-0.15, -0.15], &[0.15, 0.15]).unwrap()
}

/// State set: -10 <= x1 <= 2, -2 <= x2 <= 2.
pub fn state_set() -> Polytope {
    Polytope::hyper_box(&[-10.0, -2.0], &[2.0, 2.0]).unwrap()
}

/// Input set: -1 <= u <= 1.
pub fn input_set() -> Polytope {
    Polytope::hyper_box(&[-1.0], &[1.0]).unwrap()
}

pub fn benchmark_lti() -> LinearSystem {
    let (a, b) = benchmark_ab();
    LinearSystem::new(a, b, benchmark_gain(), noise_box()).unwrap()
}

pub fn benchmark_stack(horizon: usize) -> (LinearSystem, ErrorStack) {
    let sys = benchmark_lti();
    let stack = error_stack(&sys, horizon).unwrap();
    (sys, stack)
}

/// Fresh uniform pool of `n * horizon` draws, chunked into `n` trajectories.
pub fn benchmark_dataset(sys: &LinearSystem, n: usize, horizon: usize, seed: u64) -> NoiseDataset {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let sampler = UniformOnPolytope::new(&sys.w).unwrap();
    let pool = sampler.sample_many(n * horizon, &mut rng);
    NoiseDataset::from_pool(
        pool,
        n,
        horizon,
        seed ^ 0x5eed,
        SamplingMode::WithoutReplacement,
    )
    .unwrap()
}
