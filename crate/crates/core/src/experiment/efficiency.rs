use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use super::erm::{erm_oracle, initial_guess, ErmOptions};
use super::scenarios::Scenario;
use crate::diagnostics::{ess, iterations_to_threshold, PSRF_THRESHOLD};
use crate::error::{Error, Result};
use crate::etel::{AlphaRule, LogTarget, PosteriorKind, Prior, Target};
use crate::linalg::cholesky_lower;
use crate::manifold::ManifoldPoint;
use crate::samplers::{
    complete_preconditioner, default_step, derive_seed, estimate_preconditioner, run_chain, run_chains, Algorithm,
    PrecondMethod, SamplerConfig,
};

/// How the preconditioner of a compared sampler is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tuning {
    /// The ambient identity `I_D`.
    Identity,
    /// Multiple of the identity with the same tangent trace as the selected one.
    ScaledIdentity,
    /// Plug-in sandwich at the ERM.
    Sandwich,
    /// Pushforward covariance of a pilot chain.
    Pilot,
}

#[derive(Clone, Debug, Serialize)]
pub struct MethodSpec {
    pub name: String,
    pub algorithm: Algorithm,
    pub tuning: Tuning,
    /// Sample the unconstrained ambient parameter.
    pub ambient: bool,
}

impl MethodSpec {
    pub fn new(name: &str, algorithm: Algorithm, tuning: Tuning) -> Self {
        Self { name: name.to_string(), algorithm, tuning, ambient: algorithm == Algorithm::AmbientRwm }
    }
}

#[derive(Clone, Debug)]
pub struct EfficiencyConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub replicates: usize,
    /// Transitions per chain.
    pub length: usize,
    pub chains: usize,
    /// Leading fraction of each chain dropped before estimating ESS.
    pub warmup_fraction: f64,
    /// Spread of the starting points in posterior standard deviations.
    pub dispersion: f64,
    pub pilot: usize,
    pub methods: Vec<MethodSpec>,
    pub seed: u64,
}

impl EfficiencyConfig {
    pub fn new(scenario: Scenario, n: usize, replicates: usize, length: usize, methods: Vec<MethodSpec>, seed: u64) -> Self {
        Self { scenario, n, replicates, length, chains: 4, warmup_fraction: 0.1, dispersion: 3.0, pilot: 2000, methods, seed }
    }
}

/// One method on one replicate.
#[derive(Clone, Debug, Serialize)]
pub struct EfficiencyRecord {
    pub method: String,
    pub replicate: usize,
    /// Smallest per-coordinate ESS, each averaged over chains.
    pub min_ess: f64,
    /// Per-coordinate ESS averaged over coordinates and chains.
    pub mean_ess: f64,
    /// Iterations until every coordinate has PSRF below the threshold.
    pub iterations: Option<usize>,
    pub acceptance: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MethodSummary {
    pub method: String,
    pub replicates: usize,
    pub median_min_ess: f64,
    pub median_mean_ess: f64,
    /// Median iterations, with chains that never reached the threshold counted as `length + 1`.
    pub median_iterations: f64,
    pub reached: usize,
}

#[derive(Clone, Debug)]
pub struct EfficiencyReport {
    pub records: Vec<EfficiencyRecord>,
    pub summaries: Vec<MethodSummary>,
}

impl EfficiencyReport {
    pub fn summary(&self, method: &str) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["method", "replicate", "min_ess", "mean_ess", "iterations", "acceptance"])?;
        for r in &self.records {
            w.write_record([
                r.method.clone(),
                r.replicate.to_string(),
                format!("{:.4}", r.min_ess),
                format!("{:.4}", r.mean_ess),
                r.iterations.map_or("NA".to_string(), |v| v.to_string()),
                format!("{:.6}", r.acceptance),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every method on the same data and starting points per replicate and
/// compares effective sample sizes and iterations to PSRF convergence.
pub fn run_efficiency_experiment(cfg: &EfficiencyConfig) -> Result<EfficiencyReport> {
    if cfg.replicates == 0 || cfg.chains < 2 || cfg.methods.is_empty() {
        return Err(Error::Config("need replicates, at least two chains and one method".into()));
    }
    let mut records = Vec::new();
    for r in 0..cfg.replicates {
        let seed = derive_seed(cfg.seed, r as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
        let data = Arc::new(cfg.scenario.sample(cfg.n, &mut rng));
        let mut starts_by_space: Vec<(bool, Vec<ManifoldPoint>, LogTarget, DMatrix<f64>, DMatrix<f64>)> = Vec::new();
        for (mi, method) in cfg.methods.iter().enumerate() {
            if !starts_by_space.iter().any(|s| s.0 == method.ambient) {
                let loss = if method.ambient { cfg.scenario.ambient_loss() } else { cfg.scenario.loss() };
                let target = LogTarget::new(
                    loss,
                    data.clone(),
                    Prior::Uniform,
                    PosteriorKind::Rpetel { alpha: AlphaRule::default() },
                )?;
                let prepared = prepare_space(cfg, &target, seed)?;
                starts_by_space.push((method.ambient, prepared.0, target, prepared.1, prepared.2));
            }
            let (_, starts, target, selected, identity) =
                starts_by_space.iter().find(|s| s.0 == method.ambient).expect("prepared above");
            let precond = match method.tuning {
                Tuning::Identity => DMatrix::identity(target.manifold().ambient_dim(), target.manifold().ambient_dim()),
                Tuning::ScaledIdentity => identity.clone(),
                Tuning::Sandwich | Tuning::Pilot => selected.clone(),
            };
            let step = default_step(target.manifold().intrinsic_dim(), target.n());
            let sampler = SamplerConfig::new(method.algorithm, step, 0.0, precond)?;
            let chains = run_chains(starts, target, &sampler, cfg.length, 0, derive_seed(seed, 10 + mi as u64))?;
            records.push(measure(cfg, method, r, &chains)?);
        }
    }
    let summaries = cfg
        .methods
        .iter()
        .map(|m| {
            let rows: Vec<&EfficiencyRecord> = records.iter().filter(|r| r.method == m.name).collect();
            MethodSummary {
                method: m.name.clone(),
                replicates: rows.len(),
                median_min_ess: median(rows.iter().map(|r| r.min_ess).collect()),
                median_mean_ess: median(rows.iter().map(|r| r.mean_ess).collect()),
                median_iterations: median(rows.iter().map(|r| r.iterations.unwrap_or(cfg.length + 1) as f64).collect()),
                reached: rows.iter().filter(|r| r.iterations.is_some()).count(),
            }
        })
        .collect();
    Ok(EfficiencyReport { records, summaries })
}

// Dispersed starts around the ERM plus the selected and equal-trace identity
// preconditioners for one parameter space.
fn prepare_space(
    cfg: &EfficiencyConfig,
    target: &LogTarget,
    seed: u64,
) -> Result<(Vec<ManifoldPoint>, DMatrix<f64>, DMatrix<f64>)> {
    let loss = target.loss();
    let m = target.manifold();
    let opts = ErmOptions { restarts: 1, seed: derive_seed(seed, 3), ..ErmOptions::default() };
    let erm = match erm_oracle(loss, target.data(), &opts) {
        Ok(r) => r.point,
        Err(_) => initial_guess(loss, target.data())?,
    };
    let tuning = cfg.methods.iter().find(|x| x.ambient == m.is_ambient() && !matches!(x.tuning, Tuning::Identity | Tuning::ScaledIdentity)).map(|x| x.tuning);
    let selected = match tuning {
        Some(Tuning::Pilot) | None => {
            let base = estimate_preconditioner(PrecondMethod::PluginSandwich, target, &erm, None)
                .unwrap_or_else(|_| DMatrix::identity(m.ambient_dim(), m.ambient_dim()));
            let step = default_step(m.intrinsic_dim(), target.n());
            let pilot_cfg = SamplerConfig::new(Algorithm::Rrwm, step, 0.0, base.clone())?;
            let total = cfg.pilot.max(10);
            let pilot = run_chain(&erm, target, &pilot_cfg, total, total / 5, derive_seed(seed, 5))?;
            estimate_preconditioner(PrecondMethod::PilotCovariance, target, &erm, Some(&pilot.states)).unwrap_or(base)
        }
        _ => estimate_preconditioner(PrecondMethod::PluginSandwich, target, &erm, None)?,
    };
    let space = m.tangent_space(&erm)?;
    let block = space.frame.tr_mul(&(&selected * &space.frame));
    let d = space.dim();
    let identity = complete_preconditioner(&space, &(DMatrix::identity(d, d) * (block.trace() / d as f64)))?;
    // Starting points: retractions of N(0, dispersion^2 * block / n) tangent draws.
    let chol = cholesky_lower(&block).ok_or_else(|| Error::NotPsd("selected preconditioner".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 6));
    let scale = cfg.dispersion / (target.n() as f64).sqrt();
    let mut starts = Vec::with_capacity(cfg.chains);
    let mut attempts = 0;
    while starts.len() < cfg.chains {
        attempts += 1;
        if attempts > 100 * cfg.chains {
            return Err(Error::Numerical("could not place dispersed starting points".into()));
        }
        let z = nalgebra::DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let v = space.embed(&(&chol * z * scale));
        let Ok(p) = m.retract(&erm, &v) else { continue };
        let Ok(s) = m.tangent_space(&p) else { continue };
        if target.evaluate(&s, None, true).log_density.is_finite() {
            starts.push(p);
        }
    }
    Ok((starts, selected, identity))
}

fn measure(cfg: &EfficiencyConfig, method: &MethodSpec, replicate: usize, chains: &[crate::samplers::Chain]) -> Result<EfficiencyRecord> {
    let series: Vec<Vec<Vec<f64>>> = chains.iter().map(|c| c.coordinate_series()).collect();
    let dims = series[0].len();
    let skip = (cfg.warmup_fraction * cfg.length as f64) as usize;
    let mut per_coord = Vec::with_capacity(dims);
    let mut iterations = Some(0usize);
    for j in 0..dims {
        let mut total = 0.0;
        let mut frozen = 0;
        for s in &series {
            let e = ess(&s[j][skip..])?;
            // A chain that never moved carries a single draw's worth of information.
            if e.constant {
                frozen += 1;
                total += 1.0;
            } else {
                total += e.value;
            }
        }
        per_coord.push(if frozen == series.len() { f64::NAN } else { total / series.len() as f64 });
        let refs: Vec<&[f64]> = series.iter().map(|s| s[j].as_slice()).collect();
        let it = iterations_to_threshold(&refs, PSRF_THRESHOLD)?;
        iterations = match (iterations, it) {
            (Some(a), Some(b)) => Some(a.max(b)),
            _ => None,
        };
    }
    // Coordinates frozen in every chain (structurally fixed entries) are skipped.
    let informative: Vec<f64> = per_coord.iter().copied().filter(|v| v.is_finite()).collect();
    let min_ess = informative.iter().copied().fold(f64::INFINITY, f64::min);
    let mean_ess = informative.iter().sum::<f64>() / informative.len().max(1) as f64;
    let acceptance = chains.iter().map(|c| c.stats.acceptance_rate()).sum::<f64>() / chains.len() as f64;
    Ok(EfficiencyRecord { method: method.name.clone(), replicate, min_ess, mean_ess, iterations, acceptance })
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}
