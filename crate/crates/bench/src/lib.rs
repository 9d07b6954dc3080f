//! Fixtures shared by the benchmarks.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rpetel::experiment::erm::initial_guess;
use rpetel::experiment::Scenario;
use rpetel::{LogTarget, ManifoldPoint};

/// Posterior for one simulated data set with a point near its mode.
pub fn scenario_target(scenario: Scenario, n: usize, seed: u64) -> (LogTarget, ManifoldPoint) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = scenario.sample(n, &mut rng);
    let loss = scenario.loss();
    let center = initial_guess(&loss, &data).expect("initial guess");
    (LogTarget::rpetel(loss, data).expect("target"), center)
}

/// `d x n` matrix of standard normal moment vectors shifted to have a feasible dual.
pub fn moment_matrix(d: usize, n: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = DMatrix::from_fn(d, n, |_, _| StandardNormal.sample(&mut rng));
    for mut row in g.row_iter_mut() {
        let mean = row.mean();
        row.add_scalar_mut(0.3 - mean);
    }
    g
}
