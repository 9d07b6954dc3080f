//! Empirical risk minimization by Riemannian gradient descent with multi-start.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::linalg::{as_vector, pinv};
use crate::losses::{LossKind, LossModel, Observation, QuantileLevels};
use crate::manifold::{ManifoldKind, ManifoldPoint, ManifoldSpec};

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 60;
// Smoothing widths for the check loss, relative to the mean absolute response.
const SMOOTHING_SCHEDULE: [f64; 6] = [1e-1, 3e-2, 1e-2, 3e-3, 1e-3, 3e-4];

#[derive(Clone, Debug)]
pub struct ErmOptions {
    pub restarts: usize,
    pub max_iter: usize,
    /// Riemannian gradient tolerance for smooth losses.
    pub grad_tol: f64,
    /// Tolerance on the smoothed subgradient for the check loss.
    pub subgrad_tol: f64,
    /// Restarts are screened on this many observations before polishing on all data.
    pub screen_size: usize,
    pub seed: u64,
}

impl Default for ErmOptions {
    fn default() -> Self {
        Self { restarts: 8, max_iter: 2000, grad_tol: 1e-6, subgrad_tol: 1e-4, screen_size: 20_000, seed: 0 }
    }
}

#[derive(Clone, Debug)]
pub struct ErmResult {
    pub point: ManifoldPoint,
    pub risk: f64,
    /// Final Riemannian gradient norm (smoothed surrogate for the check loss).
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged_restarts: usize,
}

/// Risk and Euclidean gradient of a (possibly surrogate) objective.
pub trait Objective {
    fn value(&self, theta: &DVector<f64>) -> Option<f64>;
    fn gradient(&self, theta: &DVector<f64>) -> Option<DVector<f64>>;
}

/// Mean loss over a data set.
pub struct RiskObjective<'a> {
    pub loss: &'a LossModel,
    pub data: &'a [Observation],
}

impl Objective for RiskObjective<'_> {
    fn value(&self, theta: &DVector<f64>) -> Option<f64> {
        let prep = self.loss.prepare(theta).ok()?;
        let mut total = 0.0;
        for x in self.data {
            total += self.loss.value_at(&prep, x).ok()?;
        }
        let v = total / self.data.len() as f64;
        v.is_finite().then_some(v)
    }

    fn gradient(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        let prep = self.loss.prepare(theta).ok()?;
        let mut acc = vec![0.0; theta.len()];
        let mut buf = vec![0.0; theta.len()];
        for x in self.data {
            self.loss.gradient_into(&prep, x, &mut buf).ok()?;
            acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += b);
        }
        let n = self.data.len() as f64;
        Some(DVector::from_iterator(acc.len(), acc.into_iter().map(|a| a / n)))
    }
}

/// Check loss with the kink replaced by `tau t + delta softplus(-t / delta)`.
pub struct SmoothedQuantile<'a> {
    pub levels: &'a QuantileLevels,
    pub data: &'a [Observation],
    pub delta: f64,
}

impl SmoothedQuantile<'_> {
    fn residuals(&self, theta: &DVector<f64>, x: &DVector<f64>, y: f64) -> impl Iterator<Item = (usize, f64, f64)> + '_ {
        let q = self.levels;
        let p = q.covariate_dim;
        let off = if q.intercept { q.levels.len() } else { 0 };
        let fits: Vec<f64> = (0..q.levels.len())
            .map(|k| {
                let base = off + k * p;
                let lin: f64 = (0..p).map(|j| x[j] * theta[base + j]).sum();
                lin + if q.intercept { theta[k] } else { 0.0 }
            })
            .collect();
        q.levels.iter().enumerate().map(move |(k, &tau)| (k, tau, y - fits[k]))
    }
}

impl Objective for SmoothedQuantile<'_> {
    fn value(&self, theta: &DVector<f64>) -> Option<f64> {
        let mut total = 0.0;
        for obs in self.data {
            let Observation::Labeled { covariates, response } = obs else { return None };
            for (_, tau, t) in self.residuals(theta, covariates, *response) {
                let z = -t / self.delta;
                total += tau * t + self.delta * (z.max(0.0) + (-z.abs()).exp().ln_1p());
            }
        }
        Some(total / self.data.len() as f64)
    }

    fn gradient(&self, theta: &DVector<f64>) -> Option<DVector<f64>> {
        let q = self.levels;
        let p = q.covariate_dim;
        let off = if q.intercept { q.levels.len() } else { 0 };
        let mut g = DVector::zeros(theta.len());
        for obs in self.data {
            let Observation::Labeled { covariates, response } = obs else { return None };
            for (k, tau, t) in self.residuals(theta, covariates, *response) {
                // d/dt of the smoothed loss; the parameter enters with a minus sign.
                let slope = tau - 1.0 / (1.0 + (t / self.delta).exp());
                if q.intercept {
                    g[k] -= slope;
                }
                for j in 0..p {
                    g[off + k * p + j] -= slope * covariates[j];
                }
            }
        }
        Some(g / self.data.len() as f64)
    }
}

#[derive(Clone, Debug)]
pub struct Descent {
    pub point: ManifoldPoint,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Riemannian gradient descent with Barzilai-Borwein steps and Armijo backtracking.
pub fn riemannian_descent(
    obj: &dyn Objective,
    m: &ManifoldSpec,
    start: &ManifoldPoint,
    tol: f64,
    max_iter: usize,
) -> Result<Descent> {
    let rgrad = |x: &ManifoldPoint| -> Option<DVector<f64>> {
        let g = obj.gradient(x.coords())?;
        Some(m.tangent_projector(x).ok()? * g)
    };
    let mut x = start.clone();
    let mut f = obj.value(x.coords()).ok_or_else(|| Error::Numerical("objective undefined at the start".into()))?;
    let mut g = rgrad(&x).ok_or_else(|| Error::Numerical("gradient undefined at the start".into()))?;
    let radius = m.trust_radius();
    let mut step = 1.0 / g.norm().max(1.0);
    let mut iterations = 0;
    while iterations < max_iter {
        let gn = g.norm();
        if gn <= tol {
            return Ok(Descent { point: x, value: f, grad_norm: gn, iterations, converged: true });
        }
        iterations += 1;
        let mut t = if radius.is_finite() { step.min(0.5 * radius / gn) } else { step };
        let mut next = None;
        for _ in 0..MAX_HALVINGS {
            if let Ok(y) = m.retract(&x, &(&g * -t)) {
                if let Some(fy) = obj.value(y.coords()) {
                    // The second clause accepts rounding-level ties so the gradient can still shrink.
                    let tie = (fy - f).abs() <= 1e-13 * f.abs().max(1.0);
                    if fy <= f - ARMIJO * t * gn * gn || tie {
                        if let Some(gy) = rgrad(&y) {
                            if !tie || gy.norm() < gn {
                                next = Some((y, fy, gy));
                                break;
                            }
                        }
                    }
                }
            }
            t *= 0.5;
        }
        let Some((y, fy, gy)) = next else {
            return Ok(Descent { point: x, value: f, grad_norm: gn, iterations, converged: false });
        };
        let s = y.coords() - x.coords();
        let dy = &gy - &g;
        let sy = s.dot(&dy);
        step = if sy > 0.0 { s.norm_squared() / sy } else { 2.0 * t };
        x = y;
        f = fy;
        g = gy;
    }
    let gn = g.norm();
    Ok(Descent { point: x, value: f, grad_norm: gn, iterations, converged: gn <= tol })
}

/// Best of several restarts of Riemannian gradient descent on the empirical risk.
///
/// The extrinsic mean has the closed form `project(sample mean)`. The check loss
/// is minimized through a smoothing continuation; convergence is then judged on
/// the gradient of the narrowest surrogate.
pub fn erm_oracle(loss: &LossModel, data: &[Observation], opts: &ErmOptions) -> Result<ErmResult> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    for x in data {
        loss.check_observation(x)?;
    }
    let m = loss.manifold();
    if *loss.kind() == LossKind::ExtrinsicMean {
        let point = m.project(&point_mean(data))?;
        let risk = RiskObjective { loss, data }.value(point.coords()).unwrap_or(f64::NAN);
        return Ok(ErmResult { point, risk, grad_norm: 0.0, iterations: 0, converged_restarts: 1 });
    }
    let starts = starting_points(loss, data, opts)?;
    let screen = if data.len() > opts.screen_size { &data[..opts.screen_size] } else { data };
    let mut best: Option<(Descent, f64)> = None;
    let mut converged_restarts = 0;
    for start in &starts {
        let Ok(d) = minimize(loss, screen, start, opts) else { continue };
        if d.converged {
            converged_restarts += 1;
        }
        let Some(score) = RiskObjective { loss, data: screen }.value(d.point.coords()) else { continue };
        if best.as_ref().map_or(true, |(_, s)| score < *s) {
            best = Some((d, score));
        }
    }
    let (mut winner, _) = best.ok_or_else(|| Error::Numerical("every restart failed".into()))?;
    if screen.len() < data.len() {
        winner = minimize(loss, data, &winner.point, opts)?;
    } else if converged_restarts == 0 {
        winner.converged = false;
    }
    if !winner.converged {
        return Err(Error::Numerical(format!(
            "no restart converged (gradient norm {:.3e} after {} iterations)",
            winner.grad_norm, winner.iterations
        )));
    }
    let risk = RiskObjective { loss, data }.value(winner.point.coords()).unwrap_or(f64::NAN);
    Ok(ErmResult {
        point: winner.point,
        risk,
        grad_norm: winner.grad_norm,
        iterations: winner.iterations,
        converged_restarts: converged_restarts.max(1),
    })
}

fn minimize(loss: &LossModel, data: &[Observation], start: &ManifoldPoint, opts: &ErmOptions) -> Result<Descent> {
    let m = loss.manifold();
    match loss.kind() {
        LossKind::MultiQuantile(q) => {
            let scale = data
                .iter()
                .map(|x| match x {
                    Observation::Labeled { response, .. } => response.abs(),
                    Observation::Point(_) => 0.0,
                })
                .sum::<f64>()
                / data.len() as f64;
            let scale = if scale > 0.0 { scale } else { 1.0 };
            let mut x = start.clone();
            let mut last = None;
            for (i, rel) in SMOOTHING_SCHEDULE.iter().enumerate() {
                let obj = SmoothedQuantile { levels: q, data, delta: rel * scale };
                let final_stage = i + 1 == SMOOTHING_SCHEDULE.len();
                let tol = if final_stage { opts.subgrad_tol } else { opts.subgrad_tol * 10.0 };
                let d = riemannian_descent(&obj, m, &x, tol, opts.max_iter)?;
                x = d.point.clone();
                last = Some(d);
            }
            Ok(last.expect("non-empty schedule"))
        }
        _ => riemannian_descent(&RiskObjective { loss, data }, m, start, opts.grad_tol, opts.max_iter),
    }
}

fn point_mean(data: &[Observation]) -> DVector<f64> {
    let mut acc: Option<DVector<f64>> = None;
    for x in data {
        if let Some(v) = x.as_point() {
            match acc.as_mut() {
                Some(a) => *a += v,
                None => acc = Some(v.clone()),
            }
        }
    }
    acc.map(|a| a / data.len() as f64).unwrap_or_else(|| DVector::zeros(0))
}

/// Data-driven starting point: the projected mean, the projected second moment
/// for the projector loss, or least squares for the check loss.
pub fn initial_guess(loss: &LossModel, data: &[Observation]) -> Result<ManifoldPoint> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let m = loss.manifold();
    Ok(match loss.kind() {
        LossKind::SpectralProjector => {
            let p = data[0].as_point().map_or(0, |v| v.len());
            let mut s = DMatrix::zeros(p, p);
            for x in data {
                let v = x.as_point().expect("validated observations");
                s += v * v.transpose();
            }
            m.project(&as_vector(&(s / data.len() as f64)))?
        }
        LossKind::MultiQuantile(q) => m.project(&least_squares_start(q, data))?,
        _ => m.project(&point_mean(data))?,
    })
}

/// Data-driven first start, then random restarts.
fn starting_points(loss: &LossModel, data: &[Observation], opts: &ErmOptions) -> Result<Vec<ManifoldPoint>> {
    let m = loss.manifold();
    let first = initial_guess(loss, data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let compact = matches!(
        m.kind(),
        ManifoldKind::Sphere | ManifoldKind::SpecialOrthogonal { .. } | ManifoldKind::Grassmann { .. } | ManifoldKind::Solution(_)
    );
    let mut out = vec![first.clone()];
    let space = m.tangent_space(&first)?;
    let spread = 0.5 * first.coords().norm().max(1.0);
    while out.len() < opts.restarts.max(1) {
        let cand = if compact {
            m.random_point(&mut rng)
        } else {
            let v = m.random_tangent(&space, spread, &mut rng);
            match m.retract(&first, &v) {
                Ok(p) => p,
                Err(_) => first.clone(),
            }
        };
        out.push(cand);
    }
    Ok(out)
}

// Ordinary least squares of the response on the covariates, copied into every level.
fn least_squares_start(q: &QuantileLevels, data: &[Observation]) -> DVector<f64> {
    let p = q.covariate_dim;
    let cols = p + usize::from(q.intercept);
    let mut xtx = DMatrix::zeros(cols, cols);
    let mut xty = DVector::zeros(cols);
    for obs in data {
        if let Observation::Labeled { covariates, response } = obs {
            let row = DVector::from_fn(cols, |i, _| if q.intercept { if i == 0 { 1.0 } else { covariates[i - 1] } } else { covariates[i] });
            xtx += &row * row.transpose();
            xty += &row * *response;
        }
    }
    let coef = pinv(&xtx) * xty;
    let nk = q.levels.len();
    let mut theta = Vec::with_capacity(nk * cols);
    if q.intercept {
        theta.extend(std::iter::repeat(coef[0]).take(nk));
    }
    let slopes = if q.intercept { coef.rows(1, p).into_owned() } else { coef };
    // Identical columns have rank one; a small level-specific offset keeps
    // higher-rank coefficient manifolds projectable.
    let bump = 0.01 * slopes.amax().max(1e-3);
    for k in 0..nk {
        let mut col = slopes.clone();
        col[k % p] += bump * k as f64;
        theta.extend(col.iter().copied());
    }
    DVector::from_vec(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::scenarios::{Scenario, NORMAL_Q20};

    #[test]
    fn extrinsic_closed_form_matches_gradient_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = Scenario::SphereExtrinsic;
        let data = s.sample(400, &mut rng);
        let loss = s.loss();
        let closed = erm_oracle(&loss, &data, &ErmOptions::default()).unwrap();
        let start = ManifoldPoint::from_slice(&[1.0, 0.0, 0.0]);
        let d = riemannian_descent(&RiskObjective { loss: &loss, data: &data }, loss.manifold(), &start, 1e-10, 5000).unwrap();
        assert!(d.converged);
        assert!((d.point.coords() - closed.point.coords()).norm() < 1e-8);
    }

    #[test]
    fn constant_data_gives_its_projection() {
        let loss = Scenario::SphereExtrinsic.loss();
        let data = vec![Observation::point(&[0.0, 3.0, 4.0]); 5];
        let r = erm_oracle(&loss, &data, &ErmOptions::default()).unwrap();
        assert!((r.point.coords() - DVector::from_vec(vec![0.0, 0.6, 0.8])).norm() < 1e-12);
    }

    #[test]
    fn frechet_sphere_reaches_gradient_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = Scenario::SphereFrechet;
        let data = s.sample(2000, &mut rng);
        let r = erm_oracle(&s.loss(), &data, &ErmOptions::default()).unwrap();
        assert!(r.grad_norm <= 1e-6);
        let loss = s.loss();
        let g = RiskObjective { loss: &loss, data: &data }.gradient(r.point.coords()).unwrap();
        let pg = loss.manifold().tangent_projector(&r.point).unwrap() * g;
        assert!(pg.norm() <= 1e-6);
    }

    #[test]
    fn bw_and_pca_minimizers_are_stationary() {
        for s in [Scenario::BwBarycenter, Scenario::SpectralProjector] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let data = s.sample(1000, &mut rng);
            let r = erm_oracle(&s.loss(), &data, &ErmOptions::default()).unwrap();
            assert!(r.grad_norm <= 1e-6, "{s}: {}", r.grad_norm);
        }
    }

    #[test]
    fn quantile_oracle_is_near_the_population_solution() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = Scenario::Quantile;
        let data = s.sample(20_000, &mut rng);
        let r = erm_oracle(&s.loss(), &data, &ErmOptions::default()).unwrap();
        let truth: Vec<f64> = [1.0, 2.0, 3.0].iter().map(|b| (1.0 + NORMAL_Q20) * b).chain([1.0, 2.0, 3.0]).collect();
        let gap = (r.point.coords() - DVector::from_vec(truth)).norm();
        assert!(gap < 0.15, "gap {gap}");
    }
}
