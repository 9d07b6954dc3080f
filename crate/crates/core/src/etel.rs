//! Exponentially tilted empirical likelihood on tangent spaces, the RPETEL
//! and calibrated-Gibbs log densities, and the gradient of the RPETEL
//! potential used by the Langevin sampler.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::pinv_sym;
use crate::losses::{LossKind, LossModel, Observation, Prepared};
use crate::manifold::{ManifoldKind, ManifoldPoint, ManifoldSpec, TangentBasis, TangentSpace, TangentVector};

/// Newton stopping tolerance on the step norm.
pub const NEWTON_TOL: f64 = 1e-9;
pub const NEWTON_MAX_ITER: usize = 50;
/// Smallest damping factor tried in the line search (`2^-30`).
pub const MIN_DAMPING: f64 = 9.313225746154785e-10;
/// Largest moment residual accepted as converged.
pub const RESIDUAL_TOL: f64 = 1e-8;

/// Dual solution in tangent coordinates.
#[derive(Clone, Debug)]
pub struct DualSolution {
    pub lambda: DVector<f64>,
    pub weights: DVector<f64>,
    pub converged: bool,
    pub residual: f64,
    pub iterations: usize,
    /// The Newton system was singular and a least-squares step was used.
    pub singular: bool,
    /// `sum_i log p_i`, or `-inf` when not converged.
    pub log_likelihood: f64,
    /// `log mean exp(lambda' g_i)` after each accepted iterate.
    pub objective_path: Vec<f64>,
}

/// Multiplier, tilted weights and convergence metadata at one parameter.
#[derive(Clone, Debug)]
pub struct EtelSolution {
    pub lambda: TangentVector,
    pub weights: DVector<f64>,
    pub converged: bool,
    pub residual: f64,
    pub iterations: usize,
}

fn log_mean_exp(coords: &DMatrix<f64>, lambda: &DVector<f64>) -> f64 {
    let s = coords.tr_mul(lambda);
    let m = s.max();
    if !m.is_finite() {
        return f64::NAN;
    }
    let total: f64 = s.iter().map(|v| (v - m).exp()).sum();
    m + (total / s.len() as f64).ln()
}

/// Damped Newton iterations for `argmin_l sum_i exp(l' c_i)` where `c_i` are
/// the columns of the `d x n` matrix `coords`.
pub fn solve_dual(coords: &DMatrix<f64>, init: Option<&DVector<f64>>) -> DualSolution {
    let d = coords.nrows();
    let n = coords.ncols();
    let mut lambda = match init {
        Some(l) if l.len() == d && l.iter().all(|v| v.is_finite()) => l.clone(),
        _ => DVector::zeros(d),
    };
    let mut singular = false;
    let mut settled = false;
    let mut iterations = 0;
    let mut current = log_mean_exp(coords, &lambda);
    let mut objective_path = vec![current];
    let mut weights = DVector::zeros(n);
    let mut grad = DVector::zeros(d);
    let mut hess = DMatrix::zeros(d, d);

    while iterations < NEWTON_MAX_ITER {
        iterations += 1;
        tilted_moments(coords, &lambda, &mut weights, &mut grad, &mut hess);
        let step = match hess.clone().cholesky() {
            Some(ch) => ch.solve(&(-&grad)),
            None => {
                singular = true;
                let (hp, _) = pinv_sym(&hess);
                -(hp * &grad)
            }
        };
        if !step.iter().all(|v| v.is_finite()) {
            break;
        }
        if step.norm() <= NEWTON_TOL {
            settled = true;
        }
        // Exact change of the objective relative to the current weights.
        let ds = coords.tr_mul(&step);
        let change = |gamma: f64| -> f64 {
            let mean: f64 = weights.iter().zip(ds.iter()).map(|(w, v)| w * (gamma * v).exp_m1()).sum();
            mean.ln_1p()
        };
        let mut gamma = 1.0;
        let mut accepted = false;
        while gamma >= MIN_DAMPING {
            let delta = change(gamma);
            if delta <= 0.0 {
                lambda.axpy(gamma, &step, 1.0);
                current += delta;
                objective_path.push(current);
                accepted = true;
                break;
            }
            gamma *= 0.5;
        }
        if !accepted || settled {
            settled = true;
            break;
        }
    }

    tilted_moments(coords, &lambda, &mut weights, &mut grad, &mut hess);
    let residual = grad.norm();
    let converged = settled && residual <= RESIDUAL_TOL && residual.is_finite();
    let log_likelihood = if converged {
        weights.iter().map(|p| p.ln()).sum()
    } else {
        f64::NEG_INFINITY
    };
    DualSolution { lambda, weights, converged, residual, iterations, singular, log_likelihood, objective_path }
}

/// Normalized tilted weights, mean and second moment of the columns.
fn tilted_moments(
    coords: &DMatrix<f64>,
    lambda: &DVector<f64>,
    weights: &mut DVector<f64>,
    grad: &mut DVector<f64>,
    hess: &mut DMatrix<f64>,
) {
    let s = coords.tr_mul(lambda);
    let m = s.max();
    let mut total = 0.0;
    for (w, v) in weights.iter_mut().zip(s.iter()) {
        *w = (v - m).exp();
        total += *w;
    }
    *weights /= total;
    coords.mul_to(weights, grad);
    hess.fill(0.0);
    let d = coords.nrows();
    for (i, &w) in weights.iter().enumerate() {
        let c = coords.column(i);
        for a in 0..d {
            let wa = w * c[a];
            for b in 0..=a {
                hess[(a, b)] += wa * c[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            hess[(b, a)] = hess[(a, b)];
        }
    }
}

/// Solves for the multiplier given tangent vectors sharing one base point.
pub fn solve_lambda(grads: &[TangentVector], basis: &TangentBasis, warm: Option<&DVector<f64>>) -> Result<EtelSolution> {
    if grads.is_empty() {
        return Err(Error::EmptyData);
    }
    let dim = basis.base.dim();
    let mut coords = DMatrix::zeros(basis.dim(), grads.len());
    for (i, g) in grads.iter().enumerate() {
        if g.coords.len() != dim {
            return Err(Error::Dimension { expected: dim, got: g.coords.len() });
        }
        if (g.base.coords() - basis.base.coords()).norm() > 1e-12 * (1.0 + basis.base.coords().norm()) {
            return Err(Error::Config("gradients must share the basis point".into()));
        }
        coords.set_column(i, &basis.coordinates(&g.coords));
    }
    let init = warm.map(|l| basis.coordinates(l));
    let sol = solve_dual(&coords, init.as_ref());
    Ok(EtelSolution {
        lambda: TangentVector::new(basis.base.clone(), basis.embed(&sol.lambda)),
        weights: sol.weights,
        converged: sol.converged,
        residual: sol.residual,
        iterations: sol.iterations,
    })
}

/// `alpha_n` as a multiple of `log n`, or a fixed value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AlphaRule {
    LogMultiple(f64),
    Fixed(f64),
}

impl AlphaRule {
    pub fn value(&self, n: usize) -> f64 {
        match *self {
            AlphaRule::LogMultiple(c) => c * (n as f64).ln(),
            AlphaRule::Fixed(a) => a,
        }
    }
}

impl Default for AlphaRule {
    fn default() -> Self {
        AlphaRule::LogMultiple(2.0)
    }
}

impl fmt::Display for AlphaRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlphaRule::LogMultiple(c) => write!(f, "{c}log"),
            AlphaRule::Fixed(a) => write!(f, "{a}"),
        }
    }
}

impl std::str::FromStr for AlphaRule {
    type Err = Error;

    /// Accepts `"2log"`, `"0.5log"`, `"log"`, or a plain number.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        let rule = if let Some(head) = t.strip_suffix("log") {
            let head = head.trim().trim_end_matches('*');
            let c = if head.is_empty() { 1.0 } else { head.parse::<f64>().map_err(|_| Error::Config(format!("bad alpha rule `{s}`")))? };
            AlphaRule::LogMultiple(c)
        } else {
            AlphaRule::Fixed(t.parse::<f64>().map_err(|_| Error::Config(format!("bad alpha rule `{s}`")))?)
        };
        let v = match rule {
            AlphaRule::LogMultiple(c) | AlphaRule::Fixed(c) => c,
        };
        if !(v >= 0.0) {
            return Err(Error::Config("alpha must be nonnegative".into()));
        }
        Ok(rule)
    }
}

impl Serialize for AlphaRule {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            AlphaRule::Fixed(a) => s.serialize_f64(*a),
            other => s.serialize_str(&other.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for AlphaRule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(a) if a >= 0.0 => Ok(AlphaRule::Fixed(a)),
            Raw::Num(_) => Err(serde::de::Error::custom("alpha must be nonnegative")),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PosteriorKind {
    Rpetel { alpha: AlphaRule },
    Gibbs { beta: f64 },
}

/// Prior density with respect to the volume measure of the manifold.
#[derive(Clone, Debug, PartialEq)]
pub enum Prior {
    Uniform,
    /// Isotropic Gaussian in ambient coordinates, restricted to the manifold.
    Gaussian { mean: DVector<f64>, scale: f64 },
}

impl Prior {
    pub fn log_density(&self, theta: &DVector<f64>) -> f64 {
        match self {
            Prior::Uniform => 0.0,
            Prior::Gaussian { mean, scale } => -(theta - mean).norm_squared() / (2.0 * scale * scale),
        }
    }

    /// Euclidean gradient of `-log prior`.
    pub fn potential_gradient(&self, theta: &DVector<f64>) -> DVector<f64> {
        match self {
            Prior::Uniform => DVector::zeros(theta.len()),
            Prior::Gaussian { mean, scale } => (theta - mean) / (scale * scale),
        }
    }
}

/// Log density plus what the sampler needs to carry between steps.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub log_density: f64,
    /// Ambient multiplier, reused to warm-start the next solve.
    pub lambda: Option<DVector<f64>>,
    /// Riemannian gradient of `-log density` (ambient coordinates).
    pub grad: Option<DVector<f64>>,
    pub grad_error: Option<String>,
}

impl Evaluation {
    pub fn rejected() -> Self {
        Self { log_density: f64::NEG_INFINITY, lambda: None, grad: None, grad_error: None }
    }
}

/// Unnormalized log density on a manifold, evaluated at a precomputed tangent space.
pub trait Target: Send + Sync {
    fn manifold(&self) -> &ManifoldSpec;
    fn evaluate(&self, space: &TangentSpace, warm: Option<&DVector<f64>>, with_grad: bool) -> Evaluation;
    fn supports_gradient(&self) -> bool;
}

/// Pseudo-posterior built from a loss and data.
#[derive(Clone, Debug)]
pub struct LogTarget {
    loss: LossModel,
    data: Arc<Vec<Observation>>,
    prior: Prior,
    kind: PosteriorKind,
}

/// Per-parameter moment quantities.
struct Moments {
    prep: Prepared,
    risk: f64,
    /// `D x n` Euclidean (sub)gradients.
    euclid: DMatrix<f64>,
    /// `d x n` tangent coordinates of the projected gradients.
    coords: DMatrix<f64>,
}

impl LogTarget {
    pub fn new(loss: LossModel, data: Arc<Vec<Observation>>, prior: Prior, kind: PosteriorKind) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyData);
        }
        for x in data.iter() {
            loss.check_observation(x)?;
        }
        match &kind {
            PosteriorKind::Rpetel { alpha } => {
                if !(alpha.value(data.len()) >= 0.0) {
                    return Err(Error::Config("alpha_n must be nonnegative".into()));
                }
            }
            PosteriorKind::Gibbs { beta } => {
                if !(*beta > 0.0) {
                    return Err(Error::Config("beta must be positive".into()));
                }
            }
        }
        if let Prior::Gaussian { mean, scale } = &prior {
            if mean.len() != loss.manifold().ambient_dim() || !(*scale > 0.0) {
                return Err(Error::Config("gaussian prior needs an ambient mean and a positive scale".into()));
            }
        }
        Ok(Self { loss, data, prior, kind })
    }

    pub fn rpetel(loss: LossModel, data: Vec<Observation>) -> Result<Self> {
        Self::new(loss, Arc::new(data), Prior::Uniform, PosteriorKind::Rpetel { alpha: AlphaRule::default() })
    }

    pub fn with_kind(&self, kind: PosteriorKind) -> Result<Self> {
        Self::new(self.loss.clone(), self.data.clone(), self.prior.clone(), kind)
    }

    pub fn loss(&self) -> &LossModel {
        &self.loss
    }

    pub fn data(&self) -> &[Observation] {
        &self.data
    }

    pub fn shared_data(&self) -> Arc<Vec<Observation>> {
        self.data.clone()
    }

    pub fn prior(&self) -> &Prior {
        &self.prior
    }

    pub fn kind(&self) -> &PosteriorKind {
        &self.kind
    }

    pub fn n(&self) -> usize {
        self.data.len()
    }

    pub fn alpha_n(&self) -> f64 {
        match &self.kind {
            PosteriorKind::Rpetel { alpha } => alpha.value(self.n()),
            PosteriorKind::Gibbs { .. } => 0.0,
        }
    }

    fn moments(&self, space: &TangentSpace) -> Result<Moments> {
        let theta = space.base.coords();
        let prep = self.loss.prepare(theta)?;
        let dim = theta.len();
        let n = self.n();
        let mut euclid = DMatrix::zeros(dim, n);
        let mut risk = 0.0;
        {
            let buf = euclid.as_mut_slice();
            for (i, x) in self.data.iter().enumerate() {
                risk += self.loss.value_at(&prep, x)?;
                self.loss.gradient_into(&prep, x, &mut buf[i * dim..(i + 1) * dim])?;
            }
        }
        risk /= n as f64;
        let coords = space.frame.tr_mul(&euclid);
        Ok(Moments { prep, risk, euclid, coords })
    }

    /// Multiplier and weights at `theta`.
    pub fn etel_solution(&self, theta: &ManifoldPoint, warm: Option<&DVector<f64>>) -> Result<EtelSolution> {
        let space = self.manifold().tangent_space(theta)?;
        let mo = self.moments(&space)?;
        let init = warm.map(|l| space.coordinates(l));
        let sol = solve_dual(&mo.coords, init.as_ref());
        Ok(EtelSolution {
            lambda: TangentVector::new(theta.clone(), space.embed(&sol.lambda)),
            weights: sol.weights,
            converged: sol.converged,
            residual: sol.residual,
            iterations: sol.iterations,
        })
    }

    /// `sum_i log p_i(theta)`, or `-inf` when the moment condition is infeasible.
    pub fn log_retel(&self, theta: &ManifoldPoint) -> Result<f64> {
        let space = self.manifold().tangent_space(theta)?;
        let mo = self.moments(&space)?;
        Ok(solve_dual(&mo.coords, None).log_likelihood)
    }

    /// Unnormalized log posterior; `-inf` marks an infeasible or out-of-domain point.
    pub fn log_posterior(&self, theta: &ManifoldPoint) -> Result<f64> {
        let space = self.manifold().tangent_space(theta)?;
        Ok(self.evaluate(&space, None, false).log_density)
    }

    /// Riemannian gradient of the potential `-log posterior`, prior included.
    pub fn potential_rgrad(&self, theta: &ManifoldPoint) -> Result<TangentVector> {
        let space = self.manifold().tangent_space(theta)?;
        let ev = self.evaluate(&space, None, true);
        match ev.grad {
            Some(g) => Ok(TangentVector::new(theta.clone(), g)),
            None => Err(Error::UndefinedGradient(ev.grad_error.unwrap_or_else(|| "target is not finite here".into()))),
        }
    }

    /// Empirical risk at `theta`.
    pub fn risk(&self, theta: &ManifoldPoint) -> Result<f64> {
        self.loss.empirical_risk(&self.data, theta)
    }

    fn prior_grad_coords(&self, space: &TangentSpace) -> DVector<f64> {
        space.coordinates(&self.prior.potential_gradient(space.base.coords()))
    }

    /// Derivatives of the tangent projector along each frame direction, as `V' dP_j`.
    fn projector_derivatives(&self, space: &TangentSpace) -> Result<Vec<DMatrix<f64>>> {
        let m = self.manifold();
        let d = space.dim();
        let dim = m.ambient_dim();
        let constant = match m.kind() {
            ManifoldKind::Ambient | ManifoldKind::Symmetric { .. } => true,
            ManifoldKind::Solution(c) => c.name() == "symmetric",
            _ => false,
        };
        if constant {
            return Ok(vec![DMatrix::zeros(d, dim); d]);
        }
        let h = 1e-5;
        let mut out = Vec::with_capacity(d);
        for j in 0..d {
            let u = space.frame.column(j).into_owned();
            let plus = m.retract(&space.base, &(&u * h))?;
            let minus = m.retract(&space.base, &(&u * -h))?;
            let pp = m.tangent_projector(&plus)?;
            let pm = m.tangent_projector(&minus)?;
            out.push(space.frame.tr_mul(&((pp - pm) / (2.0 * h))));
        }
        Ok(out)
    }

    /// For each observation, the `d x d` matrix whose column `j` holds the
    /// tangent coordinates of the derivative of its projected gradient along frame vector `j`.
    fn field_jacobians(&self, space: &TangentSpace, mo: &Moments) -> Result<Vec<DMatrix<f64>>> {
        let d = space.dim();
        let dproj = self.projector_derivatives(space)?;
        let hess_scale = match self.loss.kind() {
            LossKind::ExtrinsicMean => Some(2.0),
            LossKind::SpectralProjector | LossKind::MultiQuantile(_) => Some(0.0),
            _ => None,
        };
        let frame_cols: Vec<DVector<f64>> = (0..d).map(|j| space.frame.column(j).into_owned()).collect();
        let mut out = Vec::with_capacity(self.n());
        for (i, x) in self.data.iter().enumerate() {
            let e = mo.euclid.column(i);
            let mut mi = DMatrix::zeros(d, d);
            for j in 0..d {
                let mut col = &dproj[j] * e;
                match hess_scale {
                    Some(s) => col[j] += s,
                    None => {
                        let hv = self.loss.gradient_derivative(&mo.prep, x, &frame_cols[j])?;
                        col += space.frame.tr_mul(&hv);
                    }
                }
                mi.set_column(j, &col);
            }
            out.push(mi);
        }
        Ok(out)
    }

    fn rpetel_grad_coords(&self, space: &TangentSpace, mo: &Moments, sol: &DualSolution) -> Result<DVector<f64>> {
        let n = self.n() as f64;
        let d = space.dim();
        let jac = self.field_jacobians(space, mo)?;
        let c = &mo.coords;
        let p = &sol.weights;
        let l = &sol.lambda;
        let total: DVector<f64> = c.column_sum();
        let mut hp = DMatrix::zeros(d, d);
        for (i, &w) in p.iter().enumerate() {
            let ci = c.column(i);
            hp += &ci * ci.transpose() * w;
        }
        let (hinv, rank) = pinv_sym(&hp);
        if rank == 0 && total.amax() > 0.0 {
            return Err(Error::UndefinedGradient("tilted second moment is zero".into()));
        }
        let a = hinv * &total;
        let mut dlog = DVector::zeros(d);
        for (i, mi) in jac.iter().enumerate() {
            let ci = c.column(i);
            let lm = mi.tr_mul(l);
            let am = mi.tr_mul(&a);
            let ac = a.dot(&ci);
            let coef = 1.0 - n * p[i];
            for j in 0..d {
                dlog[j] += -p[i] * (am[j] + ac * lm[j]) + coef * lm[j];
            }
        }
        let alpha = self.alpha_n();
        Ok(total * (alpha / n) - dlog)
    }

    fn evaluate_inner(&self, space: &TangentSpace, warm: Option<&DVector<f64>>, with_grad: bool) -> Result<Evaluation> {
        let mo = self.moments(space)?;
        let log_prior = self.prior.log_density(space.base.coords());
        let n = self.n() as f64;
        let mut out = Evaluation::rejected();
        match &self.kind {
            PosteriorKind::Gibbs { beta } => {
                out.log_density = log_prior - beta * n * mo.risk;
                if with_grad {
                    let g = mo.coords.column_sum() * *beta + self.prior_grad_coords(space);
                    out.grad = Some(space.embed(&g));
                }
            }
            PosteriorKind::Rpetel { .. } => {
                let init = warm.map(|l| space.coordinates(l));
                let sol = solve_dual(&mo.coords, init.as_ref());
                if !sol.converged {
                    return Ok(out);
                }
                out.log_density = log_prior - self.alpha_n() * mo.risk + sol.log_likelihood;
                out.lambda = Some(space.embed(&sol.lambda));
                if with_grad {
                    if !self.loss.is_smooth() {
                        out.grad_error = Some("loss is not smooth".into());
                    } else {
                        match self.rpetel_grad_coords(space, &mo, &sol) {
                            Ok(g) => out.grad = Some(space.embed(&(g + self.prior_grad_coords(space)))),
                            Err(e) => out.grad_error = Some(e.to_string()),
                        }
                    }
                }
            }
        }
        if !out.log_density.is_finite() {
            out.log_density = f64::NEG_INFINITY;
        }
        Ok(out)
    }
}

impl Target for LogTarget {
    fn manifold(&self) -> &ManifoldSpec {
        self.loss.manifold()
    }

    /// Loss-domain failures (e.g. an indefinite matrix) evaluate to `-inf`.
    fn evaluate(&self, space: &TangentSpace, warm: Option<&DVector<f64>>, with_grad: bool) -> Evaluation {
        self.evaluate_inner(space, warm, with_grad).unwrap_or_else(|_| Evaluation::rejected())
    }

    fn supports_gradient(&self) -> bool {
        self.loss.is_smooth()
    }
}

type DensityFn = dyn Fn(&DVector<f64>) -> f64 + Send + Sync;
type GradientFn = dyn Fn(&DVector<f64>) -> DVector<f64> + Send + Sync;

/// Target given by closures: the log density and, optionally, its Euclidean
/// gradient in ambient coordinates.
#[derive(Clone)]
pub struct CustomTarget {
    manifold: ManifoldSpec,
    log_density: Arc<DensityFn>,
    gradient: Option<Arc<GradientFn>>,
}

impl CustomTarget {
    pub fn new(manifold: ManifoldSpec, log_density: impl Fn(&DVector<f64>) -> f64 + Send + Sync + 'static) -> Self {
        Self { manifold, log_density: Arc::new(log_density), gradient: None }
    }

    /// Adds the Euclidean gradient of the log density.
    pub fn with_gradient(mut self, grad: impl Fn(&DVector<f64>) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(grad));
        self
    }
}

impl fmt::Debug for CustomTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomTarget").field("manifold", &self.manifold.label()).finish()
    }
}

impl Target for CustomTarget {
    fn manifold(&self) -> &ManifoldSpec {
        &self.manifold
    }

    fn evaluate(&self, space: &TangentSpace, _warm: Option<&DVector<f64>>, with_grad: bool) -> Evaluation {
        let x = space.base.coords();
        let mut out = Evaluation::rejected();
        let v = (self.log_density)(x);
        out.log_density = if v.is_finite() { v } else { f64::NEG_INFINITY };
        if with_grad {
            match &self.gradient {
                Some(g) => out.grad = Some(space.project(&-(g(x)))),
                None => out.grad_error = Some("no gradient supplied".into()),
            }
        }
        out
    }

    fn supports_gradient(&self) -> bool {
        self.gradient.is_some()
    }
}
