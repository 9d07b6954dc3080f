use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::erm::{erm_oracle, initial_guess, ErmOptions};
use super::pipeline::{sample_posterior, ChainPlan};
use super::scenarios::{Functional, Scenario};
use crate::error::{Error, Result};
use crate::etel::{AlphaRule, LogTarget, PosteriorKind, Prior, Target};
use crate::inference::{credible_interval, credible_regions, Membership};
use crate::losses::{LossModel, Observation};
use crate::manifold::ManifoldPoint;
use crate::samplers::{derive_seed, Algorithm};

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub n: usize,
    pub replicates: usize,
    pub plan: ChainPlan,
    pub posterior: PosteriorKind,
    /// Sample the unconstrained ambient parameter (the Bayesian EL baseline).
    pub ambient: bool,
    /// Credible levels; nominal coverage is `1 - alpha`.
    pub alphas: Vec<f64>,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Desk-scale defaults: 1500 draws after 300 burn-in, levels 0.05 and 0.10,
    /// and the random-walk step `h = 2.38^2 / (2 d)` suited to a pilot-covariance
    /// preconditioner.
    pub fn desk(scenario: Scenario, n: usize, replicates: usize, seed: u64) -> Self {
        let d = scenario.manifold().intrinsic_dim();
        Self {
            scenario,
            n,
            replicates,
            plan: ChainPlan { step: Some(tuned_step(d)), ..ChainPlan::default() },
            posterior: PosteriorKind::Rpetel { alpha: AlphaRule::default() },
            ambient: false,
            alphas: vec![0.05, 0.10],
            seed,
        }
    }

    /// 3000 draws after 500 burn-in.
    pub fn paper_scale(mut self) -> Self {
        self.plan.draws = 3000;
        self.plan.burnin = 500;
        self
    }

    pub fn with_posterior(mut self, posterior: PosteriorKind) -> Self {
        self.posterior = posterior;
        self
    }

    /// Ambient random-walk on the unconstrained parameter space.
    pub fn ambient_baseline(mut self) -> Self {
        self.ambient = true;
        self.plan.algorithm = Algorithm::AmbientRwm;
        if self.plan.step.is_some() {
            self.plan.step = Some(tuned_step(self.scenario.manifold().ambient_dim()));
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("replicates must be at least 1".into()));
        }
        if self.n == 0 {
            return Err(Error::EmptyData);
        }
        if self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a > 0.0 && *a < 1.0)) {
            return Err(Error::Config("alpha levels must lie in (0, 1)".into()));
        }
        if self.plan.draws < 2 {
            return Err(Error::Config("need at least two kept draws".into()));
        }
        if !(0.0..1.0).contains(&self.plan.lazy) {
            return Err(Error::Config("lazy probability must lie in [0, 1)".into()));
        }
        if let Some(h) = self.plan.step {
            if !(h > 0.0) {
                return Err(Error::Config("step must be positive".into()));
            }
        }
        if self.plan.algorithm == Algorithm::Rmala && !self.scenario.loss().is_smooth() {
            return Err(Error::Config("rmala needs a smooth loss".into()));
        }
        if self.ambient != (self.plan.algorithm == Algorithm::AmbientRwm) {
            return Err(Error::Config("ambient-rwm goes with the ambient parameter space".into()));
        }
        Ok(())
    }

    fn loss(&self) -> LossModel {
        if self.ambient {
            self.scenario.ambient_loss()
        } else {
            self.scenario.loss()
        }
    }
}

/// Random-walk step giving the proposal covariance `2.38^2 / d` times the
/// posterior covariance when the preconditioner matches `n` times the latter.
pub fn tuned_step(d: usize) -> f64 {
    2.38 * 2.38 / (2.0 * d.max(1) as f64)
}

/// Whether one credible set covered the truth in one replicate.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageCheck {
    pub target: String,
    pub nominal: f64,
    pub covered: bool,
    /// Interval endpoints; for the region, the truth's quadratic form and the threshold.
    pub lower: f64,
    pub upper: f64,
}

#[derive(Clone, Debug)]
pub struct ReplicateOutcome {
    pub index: usize,
    pub seed: u64,
    pub acceptance: f64,
    pub checks: Vec<CoverageCheck>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageRow {
    pub target: String,
    pub nominal: f64,
    pub coverage: f64,
    pub replicates: usize,
    pub std_error: f64,
}

#[derive(Clone, Debug)]
pub struct CoverageTable {
    pub rows: Vec<CoverageRow>,
    pub replicates: Vec<ReplicateOutcome>,
}

impl CoverageTable {
    pub fn row(&self, target: &str, nominal: f64) -> Option<&CoverageRow> {
        self.rows.iter().find(|r| r.target == target && (r.nominal - nominal).abs() < 1e-12)
    }

    pub fn failures(&self) -> usize {
        self.replicates.iter().filter(|r| r.error.is_some()).count()
    }

    pub fn write_coverage_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["target", "nominal", "coverage", "replicates", "std_error"])?;
        for r in &self.rows {
            w.write_record([
                r.target.clone(),
                format!("{:.2}", r.nominal),
                format!("{:.6}", r.coverage),
                r.replicates.to_string(),
                format!("{:.6}", r.std_error),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_replicates_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["replicate", "seed", "status", "acceptance", "target", "nominal", "covered", "lower", "upper"])?;
        for r in &self.replicates {
            match &r.error {
                Some(e) => w.write_record([
                    r.index.to_string(),
                    r.seed.to_string(),
                    format!("error: {e}"),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                ])?,
                None => {
                    for c in &r.checks {
                        w.write_record([
                            r.index.to_string(),
                            r.seed.to_string(),
                            "ok".to_string(),
                            format!("{:.6}", r.acceptance),
                            c.target.clone(),
                            format!("{:.2}", c.nominal),
                            u8::from(c.covered).to_string(),
                            format!("{:.10e}", c.lower),
                            format!("{:.10e}", c.upper),
                        ])?;
                    }
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Writes `coverage.csv` and `replicates.csv` into `dir`.
    pub fn write_to_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_coverage_csv(BufWriter::new(File::create(dir.join("coverage.csv"))?))?;
        self.write_replicates_csv(BufWriter::new(File::create(dir.join("replicates.csv"))?))?;
        Ok(())
    }
}

/// Simulates replicates in parallel and tabulates how often each credible set
/// covers the scenario truth. Replicate failures are recorded, not fatal.
pub fn run_coverage_experiment(cfg: &ExperimentConfig) -> Result<CoverageTable> {
    cfg.validate()?;
    let truth = cfg.scenario.truth()?;
    let replicates: Vec<ReplicateOutcome> = (0..cfg.replicates)
        .into_par_iter()
        .map(|i| {
            let seed = derive_seed(cfg.seed, i as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
            let data = cfg.scenario.sample(cfg.n, &mut rng);
            match replicate_checks(cfg, data, &truth, seed) {
                Ok((checks, acceptance)) => ReplicateOutcome { index: i, seed, acceptance, checks, error: None },
                Err(e) => ReplicateOutcome { index: i, seed, acceptance: 0.0, checks: Vec::new(), error: Some(e.to_string()) },
            }
        })
        .collect();
    Ok(CoverageTable { rows: tabulate(cfg, &replicates), replicates })
}

fn tabulate(cfg: &ExperimentConfig, replicates: &[ReplicateOutcome]) -> Vec<CoverageRow> {
    let ok: Vec<&ReplicateOutcome> = replicates.iter().filter(|r| r.error.is_none()).collect();
    let mut targets: Vec<String> = cfg.scenario.functionals().iter().map(|f| f.name.to_string()).collect();
    targets.push("region".to_string());
    let mut rows = Vec::new();
    for &alpha in &cfg.alphas {
        let nominal = 1.0 - alpha;
        for t in &targets {
            let hits = ok
                .iter()
                .filter(|r| r.checks.iter().any(|c| &c.target == t && (c.nominal - nominal).abs() < 1e-12 && c.covered))
                .count();
            let count = ok.len();
            let coverage = if count > 0 { hits as f64 / count as f64 } else { f64::NAN };
            let std_error = if count > 0 { (coverage * (1.0 - coverage) / count as f64).sqrt() } else { f64::NAN };
            rows.push(CoverageRow { target: t.clone(), nominal, coverage, replicates: count, std_error });
        }
    }
    rows
}

/// Samples the posterior for one data set and checks every credible set
/// against `truth`. Returns the checks and the main chain's acceptance rate.
pub fn replicate_checks(
    cfg: &ExperimentConfig,
    data: Vec<Observation>,
    truth: &ManifoldPoint,
    seed: u64,
) -> Result<(Vec<CoverageCheck>, f64)> {
    let loss = cfg.loss();
    let m = loss.manifold().clone();
    let n = data.len();
    let target = LogTarget::new(loss.clone(), Arc::new(data), Prior::Uniform, cfg.posterior.clone())?;
    let opts = ErmOptions { restarts: 1, seed: derive_seed(seed, 3), ..ErmOptions::default() };
    let erm = match erm_oracle(&loss, target.data(), &opts) {
        Ok(r) => r.point,
        Err(_) => initial_guess(&loss, target.data())?,
    };
    let start = perturbed_start(&target, &erm, n, derive_seed(seed, 4))?;
    let run = sample_posterior(&target, &start, &cfg.plan, seed)?;
    let states = &run.chain.states;
    let functionals: Vec<Functional> = cfg.scenario.functionals();
    let summaries = credible_regions(states, &m, &cfg.alphas)?;
    let mut checks = Vec::new();
    for (summary, &alpha) in summaries.iter().zip(&cfg.alphas) {
        let nominal = 1.0 - alpha;
        for f in &functionals {
            let interval = credible_interval(states, f.name, |p| (f.eval)(p.coords()), alpha)?;
            let value = (f.eval)(truth.coords());
            checks.push(CoverageCheck {
                target: f.name.to_string(),
                nominal,
                covered: interval.contains(value),
                lower: interval.lower,
                upper: interval.upper,
            });
        }
        let membership = summary.membership(truth);
        checks.push(CoverageCheck {
            target: "region".to_string(),
            nominal,
            covered: membership == Membership::Inside,
            lower: summary.quadratic_form(truth.coords()),
            upper: summary.q_alpha,
        });
    }
    Ok((checks, run.chain.stats.acceptance_rate()))
}

// Retraction of a small random tangent vector at the ERM; falls back to the ERM
// itself when the perturbed point has zero posterior density.
fn perturbed_start(target: &LogTarget, erm: &ManifoldPoint, n: usize, seed: u64) -> Result<ManifoldPoint> {
    let m = target.manifold();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let space = m.tangent_space(erm)?;
    let v = m.random_tangent(&space, 0.5 / (n as f64).sqrt(), &mut rng);
    if let Ok(p) = m.retract(erm, &v) {
        if let Ok(s) = m.tangent_space(&p) {
            if target.evaluate(&s, None, false).log_density.is_finite() {
                return Ok(p);
            }
        }
    }
    Ok(erm.clone())
}
