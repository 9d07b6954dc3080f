use super::*;
use crate::etel::CustomTarget;
use crate::losses::{LossKind, LossModel, Observation};
use crate::manifold::ManifoldSpec;

fn circle() -> ManifoldSpec {
    ManifoldSpec::sphere(2).unwrap()
}

fn von_mises(kappa: f64) -> CustomTarget {
    CustomTarget::new(circle(), move |x| kappa * x[0]).with_gradient(move |_| DVector::from_column_slice(&[kappa, 0.0]))
}

fn angle(p: &ManifoldPoint) -> f64 {
    p.coords()[1].atan2(p.coords()[0])
}

/// Periodic trapezoid rule for `E[f(phi)]` under `exp(kappa cos phi)`.
fn circle_expectation(kappa: f64, f: impl Fn(f64) -> f64) -> f64 {
    let m = 4096;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..m {
        let phi = 2.0 * std::f64::consts::PI * k as f64 / m as f64;
        let w = (kappa * phi.cos()).exp();
        num += w * f(phi);
        den += w;
    }
    num / den
}

/// Mean and batch-means standard error.
fn batch_mean(values: &[f64], batches: usize) -> (f64, f64) {
    let size = values.len() / batches;
    let means: Vec<f64> = (0..batches).map(|b| values[b * size..(b + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let mean = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (mean, (var / batches as f64).sqrt())
}

fn start() -> ManifoldPoint {
    ManifoldPoint::from_slice(&[1.0, 0.0])
}

#[test]
fn config_validation() {
    assert!(SamplerConfig::identity(Algorithm::Rrwm, 0.0, 2).is_err());
    assert!(SamplerConfig::new(Algorithm::Rrwm, 0.1, 1.0, DMatrix::identity(2, 2)).is_err());
    let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
    assert!(matches!(SamplerConfig::new(Algorithm::Rrwm, 0.1, 0.0, asym), Err(Error::NotPsd(_))));
    let indef = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
    assert!(matches!(SamplerConfig::new(Algorithm::Rrwm, 0.1, 0.0, indef), Err(Error::NotPsd(_))));
    assert!((default_step(2, 100) - 1.0 / ((2.0 + 100f64.ln()) * 100.0)).abs() < 1e-15);
    assert_eq!("ambient-rwm".parse::<Algorithm>().unwrap(), Algorithm::AmbientRwm);
}

#[test]
fn fully_lazy_chain_never_moves() {
    let cfg = SamplerConfig::identity(Algorithm::Rrwm, 0.05, 2).unwrap().with_lazy(1.0).unwrap();
    let chain = run_chain(&start(), &von_mises(1.0), &cfg, 500, 0, 1).unwrap();
    assert!(chain.states.iter().all(|s| *s == start()));
    assert_eq!(chain.stats.lazy_holds, 500);
}

#[test]
fn lazy_hold_rate_matches_probability() {
    let zeta = 0.3;
    let cfg = SamplerConfig::new(Algorithm::Rrwm, 0.05, zeta, DMatrix::identity(2, 2)).unwrap();
    let k = 100_000;
    let chain = run_chain(&start(), &von_mises(0.0), &cfg, k, 0, 2).unwrap();
    let sd = (k as f64 * zeta * (1.0 - zeta)).sqrt();
    assert!((chain.stats.lazy_holds as f64 - k as f64 * zeta).abs() < 3.0 * sd);
}

#[test]
fn zero_displacement_is_always_accepted() {
    let m = circle();
    let target = von_mises(2.0);
    let cfg = SamplerConfig::identity(Algorithm::Rrwm, 0.05, 2).unwrap();
    let s = ChainState::new(&target, start(), &cfg).unwrap();
    assert_eq!(raw_log_ratio(&s, &s, &cfg, false), Some(0.0));
    assert_eq!(m.psi(&start(), &start()).unwrap().norm(), 0.0);
}

#[test]
fn uniform_circle_histogram_is_flat() {
    let cfg = SamplerConfig::identity(Algorithm::Rrwm, 0.05, 2).unwrap();
    let target = CustomTarget::new(circle(), |_| 0.0);
    let chain = run_chain(&start(), &target, &cfg, 200_000, 0, 3).unwrap();
    let bins = 36;
    let mut counts = vec![0usize; bins];
    // Thinned far beyond the mixing time so the draws are close to independent.
    for s in chain.states.iter().step_by(200) {
        let u = (angle(s) + std::f64::consts::PI) / (2.0 * std::f64::consts::PI);
        counts[((u * bins as f64) as usize).min(bins - 1)] += 1;
    }
    let total: usize = counts.iter().sum();
    let expect = total as f64 / bins as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
    let p = statrs::distribution::ContinuousCDF::sf(&statrs::distribution::ChiSquared::new((bins - 1) as f64).unwrap(), stat);
    assert!(p > 0.01, "chi-square {stat}, p {p}");
}

#[test]
fn rrwm_matches_von_mises_moments() {
    for (i, kappa) in [0.0, 1.0, 2.0].into_iter().enumerate() {
        let cfg = SamplerConfig::identity(Algorithm::Rrwm, 0.05, 2).unwrap();
        let chain = run_chain(&start(), &von_mises(kappa), &cfg, 200_000, 0, 10 + i as u64).unwrap();
        for (j, f) in [|a: f64| a.cos(), |a: f64| (2.0 * a).cos()].into_iter().enumerate() {
            let vals: Vec<f64> = chain.states.iter().map(|s| f(angle(s))).collect();
            let (mean, se) = batch_mean(&vals, 100);
            let truth = circle_expectation(kappa, f);
            assert!((mean - truth).abs() < 3.0 * se + 1e-3, "kappa {kappa} moment {j}: {mean} vs {truth} (se {se})");
        }
    }
}

#[test]
fn rmala_matches_von_mises_first_moment() {
    let kappa = 2.0;
    let cfg = SamplerConfig::identity(Algorithm::Rmala, 0.05, 2).unwrap();
    let chain = run_chain(&start(), &von_mises(kappa), &cfg, 200_000, 0, 21).unwrap();
    let vals: Vec<f64> = chain.states.iter().map(|s| s.coords()[0]).collect();
    let (mean, se) = batch_mean(&vals, 100);
    let truth = circle_expectation(kappa, f64::cos);
    assert!((mean - truth).abs() < 3.0 * se, "{mean} vs {truth} (se {se})");
    assert!(chain.stats.acceptance_rate() > 0.3);
}

#[test]
fn flat_target_langevin_ratio_equals_random_walk_ratio() {
    let flat = CustomTarget::new(circle(), |_| 0.0).with_gradient(|_| DVector::zeros(2));
    let walk = SamplerConfig::identity(Algorithm::Rrwm, 0.05, 2).unwrap();
    let lang = SamplerConfig::identity(Algorithm::Rmala, 0.05, 2).unwrap();
    let mut a = ChainState::new(&flat, start(), &walk).unwrap();
    let mut b = ChainState::new(&flat, start(), &lang).unwrap();
    let mut ra = ChaCha8Rng::seed_from_u64(4);
    let mut rb = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..200 {
        let x = rrwm_step(&mut a, &flat, &walk, &mut ra);
        let y = rmala_step(&mut b, &flat, &lang, &mut rb);
        match (x.log_ratio, y.log_ratio) {
            (Some(p), Some(q)) => assert!((p - q).abs() < 1e-12),
            (None, None) => assert_eq!(x.failure, y.failure),
            other => panic!("outcomes differ: {other:?}"),
        }
        assert_eq!(a.point, b.point);
    }
}

fn sphere_target(n: usize, seed: u64) -> (LogTarget, ManifoldPoint) {
    let m = ManifoldSpec::sphere(3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = DVector::from_column_slice(&[0.2, 0.3, 1.0]);
    let data: Vec<Observation> = (0..n)
        .map(|_| {
            let z = DVector::from_fn(3, |_, _| 0.3 * rng.sample::<f64, _>(StandardNormal));
            Observation::Point(m.project(&(&center + z)).unwrap().into_coords())
        })
        .collect();
    let mean: DVector<f64> = data.iter().map(|x| x.as_point().unwrap().clone()).sum::<DVector<f64>>() / n as f64;
    let erm = m.project(&mean).unwrap();
    let loss = LossModel::new(LossKind::ExtrinsicMean, m).unwrap();
    (LogTarget::rpetel(loss, data).unwrap(), erm)
}

#[test]
fn acceptance_ratios_are_reciprocal() {
    let (target, erm) = sphere_target(50, 5);
    let m = target.manifold().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let a = DMatrix::from_fn(3, 3, |_, _| rng.sample::<f64, _>(StandardNormal));
    let precond = &a * a.transpose() + DMatrix::identity(3, 3);
    for algorithm in [Algorithm::Rrwm, Algorithm::Rmala] {
        let cfg = SamplerConfig::new(algorithm, 1e-3, 0.0, precond.clone()).unwrap();
        let lang = algorithm.uses_gradient();
        let mut checked = 0;
        while checked < 100 {
            let space = m.tangent_space(&erm).unwrap();
            let x = m.retract(&erm, &m.random_tangent(&space, 0.03, &mut rng)).unwrap();
            let sx = m.tangent_space(&x).unwrap();
            let y = m.retract(&x, &m.random_tangent(&sx, 0.03, &mut rng)).unwrap();
            let (Ok(a), Ok(b)) = (ChainState::new(&target, x, &cfg), ChainState::new(&target, y, &cfg)) else { continue };
            if !a.log_density().is_finite() || !b.log_density().is_finite() {
                continue;
            }
            let fwd = raw_log_ratio(&a, &b, &cfg, lang).unwrap();
            let rev = raw_log_ratio(&b, &a, &cfg, lang).unwrap();
            assert!((fwd + rev).abs() < 1e-10);
            checked += 1;
        }
    }
}

#[test]
fn chains_are_deterministic_and_respect_burnin() {
    let (target, erm) = sphere_target(100, 7);
    let cfg = SamplerConfig::identity(Algorithm::Rmala, default_step(2, 100), 3).unwrap();
    let a = run_chain(&erm, &target, &cfg, 300, 100, 99).unwrap();
    let b = run_chain(&erm, &target, &cfg, 300, 100, 99).unwrap();
    assert_eq!(a.states, b.states);
    assert_eq!(a.accepted, b.accepted);
    assert_eq!(a.len(), 200);
    assert_eq!(a.stats.steps, 300);
    let m = target.manifold();
    assert!(a.states.iter().all(|s| m.contains(s.coords())));
    let one = run_chain(&erm, &target, &cfg, 11, 10, 1).unwrap();
    assert_eq!(one.len(), 1);
    assert!(run_chain(&erm, &target, &cfg, 10, 10, 1).is_err());
    let off = ManifoldPoint::from_slice(&[1.0, 1.0, 0.0]);
    assert!(matches!(run_chain(&off, &target, &cfg, 20, 0, 1), Err(Error::Membership { .. })));
    let many = run_chains(&[erm.clone(), erm.clone()], &target, &cfg, 50, 0, 5).unwrap();
    assert_eq!(many[0].seed, derive_seed(5, 0));
    assert_ne!(many[0].states, many[1].states);
}

#[test]
fn default_step_gives_moderate_acceptance_on_the_sphere() {
    let (target, erm) = sphere_target(200, 8);
    for algorithm in [Algorithm::Rrwm, Algorithm::Rmala] {
        let cfg = SamplerConfig::identity(algorithm, default_step(2, 200), 3).unwrap();
        let chain = run_chain(&erm, &target, &cfg, 3000, 0, 17).unwrap();
        let rate = chain.stats.acceptance_rate();
        assert!(rate > 0.1 && rate < 0.9, "{algorithm:?}: {rate}");
    }
}

#[test]
fn chain_csv_round_trips() {
    let cfg = SamplerConfig::identity(Algorithm::Rrwm, 0.05, 2).unwrap();
    let chain = run_chain(&start(), &von_mises(1.0), &cfg, 30, 10, 4).unwrap();
    let mut buf = Vec::new();
    chain.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("iter,accepted,x1,x2\n11,"));
    let back = read_chain_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), 20);
    for (a, b) in back.iter().zip(chain.states.iter()) {
        assert_eq!(a, b.coords());
    }
}

#[test]
fn identity_sandwich_completes_to_identity() {
    let m = ManifoldSpec::sphere(3).unwrap();
    let space = m.tangent_space(&ManifoldPoint::from_slice(&[0.0, 0.6, 0.8])).unwrap();
    let full = complete_preconditioner(&space, &DMatrix::identity(2, 2)).unwrap();
    assert!((full - DMatrix::<f64>::identity(3, 3)).amax() < 1e-14);
    let (target, erm) = sphere_target(30, 1);
    let id = estimate_preconditioner(PrecondMethod::Identity, &target, &erm, None).unwrap();
    assert_eq!(id, DMatrix::identity(3, 3));
    assert!(complete_preconditioner(&space, &DMatrix::zeros(2, 2)).is_err());
}

#[test]
fn plugin_and_pilot_preconditioners_agree() {
    let n = 2000;
    let (target, erm) = sphere_target(n, 9);
    let plugin = estimate_preconditioner(PrecondMethod::PluginSandwich, &target, &erm, None).unwrap();
    let cfg = SamplerConfig::identity(Algorithm::Rrwm, default_step(2, n), 3).unwrap();
    let pilot = run_chain(&erm, &target, &cfg, 5000, 500, 33).unwrap();
    let from_pilot = estimate_preconditioner(PrecondMethod::PilotCovariance, &target, &erm, Some(&pilot.states)).unwrap();
    let space = target.manifold().tangent_space(&erm).unwrap();
    let a = space.frame.tr_mul(&(&plugin * &space.frame));
    let b = space.frame.tr_mul(&(&from_pilot * &space.frame));
    let gap = (&a - &b).norm() / a.norm();
    assert!(gap < 0.3, "gap {gap}: plugin {a} pilot {b}");
    assert!(plugin.clone().cholesky().is_some() && from_pilot.cholesky().is_some());
}
