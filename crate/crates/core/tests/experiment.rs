use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rpetel::experiment::coverage::replicate_checks;
use rpetel::experiment::scenarios::raw_sphere_draws;
use rpetel::experiment::{generate_scenario, run_coverage_experiment, CoverageTable, ExperimentConfig, Scenario};
use rpetel::losses::Observation;
use rpetel::ManifoldPoint;

fn csv_bytes(table: &CoverageTable) -> (Vec<u8>, Vec<u8>) {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    table.write_coverage_csv(&mut a).unwrap();
    table.write_replicates_csv(&mut b).unwrap();
    (a, b)
}

#[test]
fn same_master_seed_gives_identical_csv() {
    let cfg = ExperimentConfig::desk(Scenario::SphereExtrinsic, 120, 4, 17);
    let first = csv_bytes(&run_coverage_experiment(&cfg).unwrap());
    let second = csv_bytes(&run_coverage_experiment(&cfg).unwrap());
    assert_eq!(first, second);
    let other = csv_bytes(&run_coverage_experiment(&ExperimentConfig { seed: 18, ..cfg }).unwrap());
    assert_ne!(first.1, other.1);
}

#[test]
fn raw_sphere_draws_center_on_the_stated_mean() {
    let n = 500;
    let draws = raw_sphere_draws(n, &mut ChaCha8Rng::seed_from_u64(3));
    let variances = [1.0, 2.0, 3.0];
    for (j, (mu, var)) in [1.0, 2.0, 3.0].iter().zip(variances).enumerate() {
        let mean = draws.iter().map(|x| x[j]).sum::<f64>() / n as f64;
        assert!((mean - mu).abs() < 3.0 * (var / n as f64).sqrt(), "coordinate {j}: {mean}");
    }
    let data = generate_scenario("sphere-extrinsic", n, 3).unwrap();
    assert_eq!(data.observations.len(), n);
    assert!(data.observations.iter().all(|x| (x.as_point().unwrap().norm() - 1.0).abs() < 1e-12));
}

#[test]
fn quantile_truth_median_column_is_beta() {
    let data = generate_scenario("quantile", 10, 0).unwrap();
    assert_eq!(&data.truth.coords().as_slice()[3..], &[1.0, 2.0, 3.0]);
    let q20 = 1.0 - 0.8416212335729143;
    for (got, b) in data.truth.coords().as_slice()[..3].iter().zip([1.0, 2.0, 3.0]) {
        assert!((got - q20 * b).abs() < 1e-15);
    }
}

#[test]
fn unknown_scenario_and_empty_data_are_rejected() {
    assert!(generate_scenario("torus", 10, 0).is_err());
    assert!(generate_scenario("sphere-extrinsic", 0, 0).is_err());
    assert!(ExperimentConfig::desk(Scenario::SphereExtrinsic, 10, 0, 0).validate().is_err());
}

#[test]
fn zero_noise_data_is_always_covered() {
    let point = ManifoldPoint::from_slice(&[0.0, 0.0, 1.0]);
    let data = vec![Observation::point(&[0.0, 0.0, 1.0]); 60];
    let cfg = ExperimentConfig::desk(Scenario::SphereExtrinsic, 60, 1, 0);
    let (checks, _) = replicate_checks(&cfg, data, &point, 5).unwrap();
    assert!(!checks.is_empty());
    assert!(checks.iter().all(|c| c.covered), "{checks:?}");
}

#[test]
fn wider_level_covers_at_least_as_often() {
    let table = run_coverage_experiment(&ExperimentConfig::desk(Scenario::SphereExtrinsic, 200, 12, 4)).unwrap();
    assert_eq!(table.failures(), 0);
    for target in ["theta1", "theta2", "theta3", "region"] {
        let high = table.row(target, 0.95).unwrap().coverage;
        let low = table.row(target, 0.90).unwrap().coverage;
        assert!(high >= low, "{target}: {high} < {low}");
    }
    for outcome in &table.replicates {
        for wide in outcome.checks.iter().filter(|c| c.nominal > 0.94) {
            let narrow = outcome.checks.iter().find(|c| c.target == wide.target && c.nominal < 0.94).unwrap();
            assert!(wide.covered || !narrow.covered);
        }
    }
}

fn mean_length(table: &CoverageTable, target: &str) -> f64 {
    let lengths: Vec<f64> = table
        .replicates
        .iter()
        .flat_map(|r| r.checks.iter().filter(|c| c.target == target && c.nominal > 0.94).map(|c| c.upper - c.lower))
        .collect();
    assert!(!lengths.is_empty());
    lengths.iter().sum::<f64>() / lengths.len() as f64
}

#[test]
fn ambient_baseline_intervals_are_not_shorter() {
    let cfg = ExperimentConfig::desk(Scenario::Quantile, 500, 20, 9);
    let constrained = run_coverage_experiment(&cfg).unwrap();
    let ambient = run_coverage_experiment(&cfg.clone().ambient_baseline()).unwrap();
    assert_eq!(constrained.failures() + ambient.failures(), 0);
    let (rp, el) = (mean_length(&constrained, "frobenius"), mean_length(&ambient, "frobenius"));
    assert!(el >= rp, "ambient {el} < constrained {rp}");
}
