//! Riemannian random-walk Metropolis and Riemannian MALA over the
//! tangent-projection parametrization, chain execution and preconditioners.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::etel::{Evaluation, LogTarget, Target};
use crate::linalg::{cholesky_lower, pinv_sym, sym};
use crate::manifold::{ManifoldPoint, TangentSpace};

/// Largest distance between `phi_y(psi_y(theta))` and `theta` accepted by the reverse check.
pub const REVERSE_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Rrwm,
    Rmala,
    /// Random walk on an ambient parameter space.
    AmbientRwm,
}

impl Algorithm {
    pub fn uses_gradient(self) -> bool {
        self == Algorithm::Rmala
    }

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Rrwm => "rrwm",
            Algorithm::Rmala => "rmala",
            Algorithm::AmbientRwm => "ambient-rwm",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rrwm" => Ok(Algorithm::Rrwm),
            "rmala" => Ok(Algorithm::Rmala),
            "ambient-rwm" => Ok(Algorithm::AmbientRwm),
            other => Err(Error::Config(format!("unknown algorithm `{other}`"))),
        }
    }
}

/// Step size, laziness and proposal preconditioner.
#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub algorithm: Algorithm,
    pub step: f64,
    pub lazy: f64,
    precond: DMatrix<f64>,
    precond_chol: DMatrix<f64>,
    /// Extra cap on tangent proposal norms, on top of the manifold's own radius.
    pub trust_radius: Option<f64>,
}

impl SamplerConfig {
    pub fn new(algorithm: Algorithm, step: f64, lazy: f64, precond: DMatrix<f64>) -> Result<Self> {
        if !(step > 0.0) || !step.is_finite() {
            return Err(Error::Config(format!("step size must be positive, got {step}")));
        }
        if !(0.0..1.0).contains(&lazy) {
            return Err(Error::Config(format!("lazy probability must lie in [0, 1), got {lazy}")));
        }
        if !precond.is_square() {
            return Err(Error::NotPsd("preconditioner must be square".into()));
        }
        let scale = precond.amax().max(1.0);
        if (&precond - precond.transpose()).amax() > 1e-10 * scale {
            return Err(Error::NotPsd("preconditioner must be symmetric".into()));
        }
        let precond = sym(&precond);
        let precond_chol = cholesky_lower(&precond)
            .ok_or_else(|| Error::NotPsd("preconditioner must be positive definite".into()))?;
        Ok(Self { algorithm, step, lazy, precond, precond_chol, trust_radius: None })
    }

    pub fn identity(algorithm: Algorithm, step: f64, dim: usize) -> Result<Self> {
        Self::new(algorithm, step, 0.0, DMatrix::identity(dim, dim))
    }

    /// Forces every step to hold with probability `lazy`; `lazy = 1` is allowed here
    /// to build a chain that never moves.
    pub fn with_lazy(mut self, lazy: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&lazy) {
            return Err(Error::Config(format!("lazy probability must lie in [0, 1], got {lazy}")));
        }
        self.lazy = lazy;
        Ok(self)
    }

    pub fn with_trust_radius(mut self, radius: f64) -> Self {
        self.trust_radius = Some(radius);
        self
    }

    pub fn with_step(mut self, step: f64) -> Result<Self> {
        if !(step > 0.0) {
            return Err(Error::Config("step size must be positive".into()));
        }
        self.step = step;
        Ok(self)
    }

    pub fn precond(&self) -> &DMatrix<f64> {
        &self.precond
    }

    pub fn dim(&self) -> usize {
        self.precond.nrows()
    }
}

/// `h / n` with `h = 1 / (d + log n)`.
pub fn default_step(intrinsic_dim: usize, n: usize) -> f64 {
    let n = n.max(1) as f64;
    1.0 / ((intrinsic_dim as f64 + n.ln()) * n)
}

/// Current point with its tangent space, proposal metric and target evaluation.
#[derive(Clone, Debug)]
pub struct ChainState {
    pub point: ManifoldPoint,
    pub space: TangentSpace,
    pub eval: Evaluation,
    /// Inverse of the tangent block `V' I V` of the preconditioner.
    metric_inv: DMatrix<f64>,
    half_logdet: f64,
}

impl ChainState {
    pub fn new<T: Target + ?Sized>(target: &T, point: ManifoldPoint, cfg: &SamplerConfig) -> Result<Self> {
        let m = target.manifold();
        if cfg.dim() != m.ambient_dim() {
            return Err(Error::Dimension { expected: m.ambient_dim(), got: cfg.dim() });
        }
        let space = m.tangent_space(&point)?;
        let eval = target.evaluate(&space, None, cfg.algorithm.uses_gradient());
        Self::assemble(space, eval, cfg).ok_or_else(|| Error::Numerical("tangent block of the preconditioner is singular".into()))
    }

    fn assemble(space: TangentSpace, eval: Evaluation, cfg: &SamplerConfig) -> Option<Self> {
        let gram = space.frame.tr_mul(&(&cfg.precond * &space.frame));
        let ch = gram.cholesky()?;
        let half_logdet = ch.l_dirty().diagonal().iter().take(space.dim()).map(|v| v.ln()).sum();
        let metric_inv = ch.inverse();
        Some(Self { point: space.base.clone(), space, eval, metric_inv, half_logdet })
    }

    pub fn log_density(&self) -> f64 {
        self.eval.log_density
    }

    /// Mean of the tangent proposal in frame coordinates.
    fn drift(&self, cfg: &SamplerConfig, langevin: bool) -> Option<DVector<f64>> {
        if !langevin {
            return Some(DVector::zeros(self.space.dim()));
        }
        let g = self.eval.grad.as_ref()?;
        Some(self.space.frame.tr_mul(&(&cfg.precond * g)) * -cfg.step)
    }

    /// Log density of the tangent proposal at frame coordinates `c`.
    fn log_kernel(&self, c: &DVector<f64>, cfg: &SamplerConfig, langevin: bool) -> Option<f64> {
        let r = c - self.drift(cfg, langevin)?;
        Some(-self.half_logdet - (r.transpose() * &self.metric_inv * &r)[0] / (4.0 * cfg.step))
    }
}

/// Why a proposal was rejected before the Metropolis test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Failure {
    TrustRadius,
    Retraction,
    Reverse,
    Target,
    Gradient,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub accepted: bool,
    pub lazy: bool,
    /// Log acceptance ratio before truncation at zero.
    pub log_ratio: Option<f64>,
    pub failure: Option<Failure>,
}

impl StepOutcome {
    fn hold(lazy: bool, failure: Option<Failure>) -> Self {
        Self { accepted: false, lazy, log_ratio: None, failure }
    }
}

/// One random-walk transition.
pub fn rrwm_step<T: Target + ?Sized, R: Rng>(state: &mut ChainState, target: &T, cfg: &SamplerConfig, rng: &mut R) -> StepOutcome {
    transition(state, target, cfg, rng, false)
}

/// One Langevin transition; the state must carry a gradient.
pub fn rmala_step<T: Target + ?Sized, R: Rng>(state: &mut ChainState, target: &T, cfg: &SamplerConfig, rng: &mut R) -> StepOutcome {
    transition(state, target, cfg, rng, true)
}

fn transition<T: Target + ?Sized, R: Rng>(
    state: &mut ChainState,
    target: &T,
    cfg: &SamplerConfig,
    rng: &mut R,
    langevin: bool,
) -> StepOutcome {
    if cfg.lazy > 0.0 && rng.gen::<f64>() < cfg.lazy {
        return StepOutcome::hold(true, None);
    }
    let m = target.manifold();
    let dim = m.ambient_dim();
    let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let u: f64 = rng.gen();
    let drift = match state.drift(cfg, langevin) {
        Some(d) => d,
        None => return StepOutcome::hold(false, Some(Failure::Gradient)),
    };
    let noise = &cfg.precond_chol * z * (2.0 * cfg.step).sqrt();
    let c = state.space.frame.tr_mul(&noise) + drift;
    let v = state.space.embed(&c);
    let radius = cfg.trust_radius.map_or(m.trust_radius(), |r| r.min(m.trust_radius()));
    if !(v.norm() <= radius) {
        return StepOutcome::hold(false, Some(Failure::TrustRadius));
    }
    let out = m.phi_in(&state.space, &v);
    if !out.converged {
        return StepOutcome::hold(false, Some(Failure::Retraction));
    }
    let space_y = match m.tangent_space(&out.point) {
        Ok(s) => s,
        Err(_) => return StepOutcome::hold(false, Some(Failure::Retraction)),
    };
    let back = space_y.psi(state.point.coords());
    if !(back.norm() <= radius) {
        return StepOutcome::hold(false, Some(Failure::Reverse));
    }
    let rev = m.phi_in(&space_y, &back);
    if !rev.converged || (rev.point.coords() - state.point.coords()).norm() > REVERSE_TOL {
        return StepOutcome::hold(false, Some(Failure::Reverse));
    }
    let eval = target.evaluate(&space_y, state.eval.lambda.as_ref(), langevin);
    if !eval.log_density.is_finite() {
        return StepOutcome::hold(false, Some(Failure::Target));
    }
    if langevin && eval.grad.is_none() {
        return StepOutcome::hold(false, Some(Failure::Gradient));
    }
    let proposal = match ChainState::assemble(space_y, eval, cfg) {
        Some(s) => s,
        None => return StepOutcome::hold(false, Some(Failure::Retraction)),
    };
    let c_back = proposal.space.coordinates(&back);
    let (fwd, rev) = match (state.log_kernel(&c, cfg, langevin), proposal.log_kernel(&c_back, cfg, langevin)) {
        (Some(a), Some(b)) => (a, b),
        _ => return StepOutcome::hold(false, Some(Failure::Gradient)),
    };
    let log_ratio = proposal.log_density() - state.log_density() + rev - fwd;
    let accepted = u.ln() < log_ratio;
    if accepted {
        *state = proposal;
    }
    StepOutcome { accepted, lazy: false, log_ratio: Some(log_ratio), failure: None }
}

/// Log acceptance ratio for a move `from -> to`, before truncation, with both
/// tangent displacements given by the projections `psi`.
pub fn raw_log_ratio(from: &ChainState, to: &ChainState, cfg: &SamplerConfig, langevin: bool) -> Option<f64> {
    let v = from.space.coordinates(&from.space.psi(to.point.coords()));
    let w = to.space.coordinates(&to.space.psi(from.point.coords()));
    Some(to.log_density() - from.log_density() + to.log_kernel(&w, cfg, langevin)? - from.log_kernel(&v, cfg, langevin)?)
}

/// Counters over all transitions, burn-in included.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainStats {
    pub steps: usize,
    pub accepted: usize,
    pub lazy_holds: usize,
    pub trust_radius_failures: usize,
    pub retraction_failures: usize,
    pub reverse_failures: usize,
    pub target_failures: usize,
    pub gradient_failures: usize,
}

impl ChainStats {
    fn record(&mut self, out: &StepOutcome) {
        self.steps += 1;
        self.accepted += out.accepted as usize;
        self.lazy_holds += out.lazy as usize;
        match out.failure {
            Some(Failure::TrustRadius) => self.trust_radius_failures += 1,
            Some(Failure::Retraction) => self.retraction_failures += 1,
            Some(Failure::Reverse) => self.reverse_failures += 1,
            Some(Failure::Target) => self.target_failures += 1,
            Some(Failure::Gradient) => self.gradient_failures += 1,
            None => {}
        }
    }

    /// Accepted moves over non-lazy proposals.
    pub fn acceptance_rate(&self) -> f64 {
        let proposals = self.steps - self.lazy_holds;
        if proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / proposals as f64
        }
    }
}

/// Post-burn-in states of one run.
#[derive(Clone, Debug)]
pub struct Chain {
    pub states: Vec<ManifoldPoint>,
    pub accepted: Vec<bool>,
    pub seed: u64,
    pub burnin: usize,
    pub config: SamplerConfig,
    pub stats: ChainStats,
}

impl Chain {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// One scalar series per ambient coordinate.
    pub fn coordinate_series(&self) -> Vec<Vec<f64>> {
        let dim = self.states.first().map_or(0, |s| s.dim());
        (0..dim).map(|j| self.states.iter().map(|s| s.coords()[j]).collect()).collect()
    }

    /// Writes `iter,accepted,x1,...,xD` rows; `iter` counts from the start of the run.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let dim = self.states.first().map_or(0, |s| s.dim());
        let mut header = vec!["iter".to_string(), "accepted".to_string()];
        header.extend((1..=dim).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for (i, (s, a)) in self.states.iter().zip(self.accepted.iter()).enumerate() {
            let mut row = vec![(self.burnin + i + 1).to_string(), (*a as u8).to_string()];
            row.extend(s.coords().iter().map(|v| format!("{v:.16e}")));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads the ambient states back from a chain CSV.
pub fn read_chain_csv<R: std::io::Read>(input: R) -> Result<Vec<DVector<f64>>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let vals = rec
            .iter()
            .skip(2)
            .map(|f| f.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad number `{f}` in chain file"))))
            .collect::<Result<Vec<f64>>>()?;
        out.push(DVector::from_vec(vals));
    }
    Ok(out)
}

/// Stream seed for chain `index` under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Runs `total` transitions from `init` and keeps the last `total - burnin`.
pub fn run_chain<T: Target + ?Sized>(
    init: &ManifoldPoint,
    target: &T,
    cfg: &SamplerConfig,
    total: usize,
    burnin: usize,
    seed: u64,
) -> Result<Chain> {
    if total <= burnin {
        return Err(Error::Config(format!("chain length {total} must exceed burn-in {burnin}")));
    }
    let m = target.manifold();
    if cfg.algorithm == Algorithm::AmbientRwm && !m.is_ambient() {
        return Err(Error::Config("ambient-rwm needs an ambient parameter space".into()));
    }
    if cfg.algorithm.uses_gradient() && !target.supports_gradient() {
        return Err(Error::Config("rmala needs a target with a gradient".into()));
    }
    m.check_point(init.coords())?;
    let mut state = ChainState::new(target, init.clone(), cfg)?;
    if !state.log_density().is_finite() {
        return Err(Error::Config("initial point has zero target density".into()));
    }
    if cfg.algorithm.uses_gradient() && state.eval.grad.is_none() {
        return Err(Error::UndefinedGradient("no gradient at the initial point".into()));
    }
    let langevin = cfg.algorithm.uses_gradient();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep = total - burnin;
    let mut states = Vec::with_capacity(keep);
    let mut accepted = Vec::with_capacity(keep);
    let mut stats = ChainStats::default();
    for k in 0..total {
        let out = transition(&mut state, target, cfg, &mut rng, langevin);
        stats.record(&out);
        if k >= burnin {
            states.push(state.point.clone());
            accepted.push(out.accepted);
        }
    }
    Ok(Chain { states, accepted, seed, burnin, config: cfg.clone(), stats })
}

/// Independent chains from several starting points, seeded by `derive_seed(master, i)`.
pub fn run_chains<T: Target + ?Sized>(
    inits: &[ManifoldPoint],
    target: &T,
    cfg: &SamplerConfig,
    total: usize,
    burnin: usize,
    master: u64,
) -> Result<Vec<Chain>> {
    inits
        .par_iter()
        .enumerate()
        .map(|(i, init)| run_chain(init, target, cfg, total, burnin, derive_seed(master, i as u64)))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecondMethod {
    Identity,
    PluginSandwich,
    PilotCovariance,
}

impl std::str::FromStr for PrecondMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(PrecondMethod::Identity),
            "plugin-sandwich" => Ok(PrecondMethod::PluginSandwich),
            "pilot-covariance" => Ok(PrecondMethod::PilotCovariance),
            other => Err(Error::Config(format!("unknown preconditioner method `{other}`"))),
        }
    }
}

/// `V M V' + (tr M / d)(I - P)`: the tangent block is `M` in the frame of `space`.
pub fn complete_preconditioner(space: &TangentSpace, tangent_block: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = space.dim();
    if tangent_block.nrows() != d || tangent_block.ncols() != d {
        return Err(Error::Dimension { expected: d, got: tangent_block.nrows() });
    }
    let m = sym(tangent_block);
    if d > 0 && m.clone().cholesky().is_none() {
        return Err(Error::NotPsd("tangent covariance is not positive definite; use the identity preconditioner".into()));
    }
    let dim = space.base.dim();
    let c = if d > 0 { m.trace() / d as f64 } else { 1.0 };
    let out = &space.frame * m * space.frame.transpose() + (DMatrix::identity(dim, dim) - &space.projector) * c;
    Ok(sym(&out))
}

/// Frame coordinates of the projected mean gradient at `y`, expressed in the frame of `space`.
fn mean_gradient_coords(target: &LogTarget, space: &TangentSpace, y: &ManifoldPoint) -> Result<DVector<f64>> {
    let m = target.manifold();
    let loss = target.loss();
    let prep = loss.prepare(y.coords())?;
    let mut acc = DVector::zeros(m.ambient_dim());
    let mut buf = vec![0.0; m.ambient_dim()];
    for x in target.data() {
        loss.gradient_into(&prep, x, &mut buf)?;
        acc += DVector::from_column_slice(&buf);
    }
    acc /= target.n() as f64;
    let p = m.tangent_projector(y)?;
    Ok(space.frame.tr_mul(&(p * acc)))
}

/// Sandwich `H^+ Delta H^+` at `center`, in the frame of the returned tangent space.
/// `H` is a central difference of the mean projected gradient; for non-smooth
/// losses the difference step is widened to `0.5 n^(-1/3)` so it averages over kinks.
pub fn plugin_sandwich(target: &LogTarget, center: &ManifoldPoint) -> Result<(TangentSpace, DMatrix<f64>)> {
    let m = target.manifold();
    let space = m.tangent_space(center)?;
    let d = space.dim();
    let n = target.n();
    let t = if target.loss().is_smooth() { 1e-5 } else { 0.5 * (n as f64).powf(-1.0 / 3.0) };
    let mut h = DMatrix::zeros(d, d);
    for j in 0..d {
        let u = space.frame.column(j).into_owned();
        let plus = m.retract(center, &(&u * t))?;
        let minus = m.retract(center, &(&u * -t))?;
        let col = (mean_gradient_coords(target, &space, &plus)? - mean_gradient_coords(target, &space, &minus)?) / (2.0 * t);
        h.set_column(j, &col);
    }
    let h = sym(&h);
    let (hinv, rank) = pinv_sym(&h);
    if rank < d {
        return Err(Error::Numerical(format!(
            "risk Hessian has rank {rank} < {d}; fall back to the identity preconditioner"
        )));
    }
    let loss = target.loss();
    let prep = loss.prepare(center.coords())?;
    let mut delta = DMatrix::zeros(d, d);
    let mut buf = vec![0.0; m.ambient_dim()];
    for x in target.data() {
        loss.gradient_into(&prep, x, &mut buf)?;
        let c = space.frame.tr_mul(&DVector::from_column_slice(&buf));
        delta += &c * c.transpose();
    }
    delta /= n as f64;
    let s = &hinv * delta * &hinv;
    Ok((space, sym(&s)))
}

/// Preconditioner from either the plug-in sandwich at `center` or the
/// pushforward covariance of pilot draws (scaled by `n`).
pub fn estimate_preconditioner(
    method: PrecondMethod,
    target: &LogTarget,
    center: &ManifoldPoint,
    pilot: Option<&[ManifoldPoint]>,
) -> Result<DMatrix<f64>> {
    let dim = target.manifold().ambient_dim();
    match method {
        PrecondMethod::Identity => Ok(DMatrix::identity(dim, dim)),
        PrecondMethod::PluginSandwich => {
            let (space, s) = plugin_sandwich(target, center)?;
            complete_preconditioner(&space, &s)
        }
        PrecondMethod::PilotCovariance => {
            let draws = pilot.ok_or_else(|| Error::Config("pilot-covariance needs pilot draws".into()))?;
            let summary = crate::inference::pushforward(draws, target.manifold())?;
            complete_preconditioner(&summary.space, &(summary.covariance * target.n() as f64))
        }
    }
}

#[cfg(test)]
mod tests;
