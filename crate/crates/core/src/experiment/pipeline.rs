use nalgebra::DMatrix;

use crate::error::Result;
use crate::etel::{LogTarget, Target};
use crate::manifold::ManifoldPoint;
use crate::samplers::{default_step, derive_seed, estimate_preconditioner, run_chain, Algorithm, Chain, PrecondMethod, SamplerConfig};

/// Chain settings for one posterior run.
#[derive(Clone, Debug)]
pub struct ChainPlan {
    pub algorithm: Algorithm,
    /// Unscaled step `h`; the proposal uses `h / n`. Defaults to `1 / (d + ln n)`.
    pub step: Option<f64>,
    pub lazy: f64,
    pub precond: PrecondMethod,
    /// Draws kept after burn-in.
    pub draws: usize,
    pub burnin: usize,
    /// Transitions of the pilot chain used by the pilot-covariance preconditioner.
    pub pilot: usize,
}

impl Default for ChainPlan {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Rrwm,
            step: None,
            lazy: 0.0,
            precond: PrecondMethod::PilotCovariance,
            draws: 1500,
            burnin: 300,
            pilot: 1000,
        }
    }
}

impl ChainPlan {
    /// Proposal step `h / n` for this target.
    pub fn scaled_step(&self, target: &LogTarget) -> f64 {
        let n = target.n();
        match self.step {
            Some(h) => h / n as f64,
            None => default_step(target.manifold().intrinsic_dim(), n),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PosteriorRun {
    pub chain: Chain,
    pub preconditioner: DMatrix<f64>,
    /// Acceptance rate of the pilot chain, when one was run.
    pub pilot_acceptance: Option<f64>,
}

/// Plug-in sandwich at `center`, or the identity when the sandwich is unavailable.
pub fn sandwich_or_identity(target: &LogTarget, center: &ManifoldPoint) -> DMatrix<f64> {
    estimate_preconditioner(PrecondMethod::PluginSandwich, target, center, None).unwrap_or_else(|_| {
        let dim = target.manifold().ambient_dim();
        DMatrix::identity(dim, dim)
    })
}

/// Preconditioner selection followed by the main chain from `start`.
///
/// The pilot-covariance method first runs a random-walk pilot preconditioned by
/// the plug-in sandwich (identity if that fails) and then uses the pilot's
/// pushforward covariance; the main chain starts where the pilot ended.
pub fn sample_posterior(target: &LogTarget, start: &ManifoldPoint, plan: &ChainPlan, seed: u64) -> Result<PosteriorRun> {
    let step = plan.scaled_step(target);
    let dim = target.manifold().ambient_dim();
    let mut init = start.clone();
    let mut pilot_acceptance = None;
    let precond = match plan.precond {
        PrecondMethod::Identity => DMatrix::identity(dim, dim),
        PrecondMethod::PluginSandwich => sandwich_or_identity(target, start),
        PrecondMethod::PilotCovariance => {
            let base = sandwich_or_identity(target, start);
            let pilot_alg = if plan.algorithm == Algorithm::Rmala { Algorithm::Rrwm } else { plan.algorithm };
            let cfg = SamplerConfig::new(pilot_alg, step, 0.0, base.clone())?;
            let total = plan.pilot.max(10);
            let pilot = run_chain(start, target, &cfg, total, total / 5, derive_seed(seed, 1))?;
            pilot_acceptance = Some(pilot.stats.acceptance_rate());
            init = pilot.states.last().expect("pilot keeps draws").clone();
            estimate_preconditioner(PrecondMethod::PilotCovariance, target, start, Some(&pilot.states))
                .ok()
                .filter(|m| SamplerConfig::new(plan.algorithm, step, 0.0, m.clone()).is_ok())
                .unwrap_or(base)
        }
    };
    let cfg = SamplerConfig::new(plan.algorithm, step, 0.0, precond.clone())?.with_lazy(plan.lazy)?;
    let chain = run_chain(&init, target, &cfg, plan.draws + plan.burnin, plan.burnin, derive_seed(seed, 2))?;
    Ok(PosteriorRun { chain, preconditioner: precond, pilot_acceptance })
}
