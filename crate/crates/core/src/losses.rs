//! Loss functions, their Euclidean (sub)gradients, and the tangent-projected
//! vector fields fed to the tilted likelihood.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{as_matrix, as_vector, psd_sqrt, sorted_eigen, spd_sqrt};
use crate::manifold::{ManifoldKind, ManifoldPoint, ManifoldSpec, TangentVector};

const ARCCOS_CLAMP: f64 = 1e-12;
const NEAR_COINCIDENT: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantileLevels {
    pub levels: Vec<f64>,
    /// Number of covariates `p`; the coefficient matrix is `p x K`.
    pub covariate_dim: usize,
    /// Prepend one free intercept per level to the parameter vector.
    #[serde(default)]
    pub intercept: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LossKind {
    /// `|theta - x|^2`
    ExtrinsicMean,
    /// `arccos^2(x' theta)` on the unit sphere.
    FrechetSphere,
    /// `arccos^2(x11 y11 + x21 y21)` on rotations of the plane.
    FrechetSo2,
    /// Squared Bures-Wasserstein distance between covariance matrices.
    BwBarycenter,
    /// `-tr(theta x x')` over rank-r projectors.
    SpectralProjector,
    /// Sum of check losses over the quantile levels.
    MultiQuantile(QuantileLevels),
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::ExtrinsicMean => "extrinsic-mean",
            LossKind::FrechetSphere => "frechet-sphere",
            LossKind::FrechetSo2 => "frechet-so2",
            LossKind::BwBarycenter => "bw-barycenter",
            LossKind::SpectralProjector => "spectral-projector",
            LossKind::MultiQuantile(_) => "multi-quantile",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Observation {
    /// Ambient vector (matrices column-vectorized).
    Point(DVector<f64>),
    /// Covariate vector with a scalar response.
    Labeled { covariates: DVector<f64>, response: f64 },
}

impl Observation {
    pub fn point(xs: &[f64]) -> Self {
        Observation::Point(DVector::from_column_slice(xs))
    }

    pub fn labeled(covariates: &[f64], response: f64) -> Self {
        Observation::Labeled { covariates: DVector::from_column_slice(covariates), response }
    }

    pub fn as_point(&self) -> Option<&DVector<f64>> {
        match self {
            Observation::Point(x) => Some(x),
            Observation::Labeled { .. } => None,
        }
    }

    /// Flat row used for CSV output: the vector, or covariates followed by the response.
    pub fn to_row(&self) -> Vec<f64> {
        match self {
            Observation::Point(x) => x.iter().copied().collect(),
            Observation::Labeled { covariates, response } => {
                covariates.iter().copied().chain(std::iter::once(*response)).collect()
            }
        }
    }
}

/// Check loss `rho_tau(t) = t (tau - 1(t <= 0))`.
pub fn check_loss(tau: f64, t: f64) -> f64 {
    t * (tau - if t <= 0.0 { 1.0 } else { 0.0 })
}

/// Subgradient of the check loss; at `t = 0` the indicator is active.
pub fn check_loss_slope(tau: f64, t: f64) -> f64 {
    tau - if t <= 0.0 { 1.0 } else { 0.0 }
}

/// Per-parameter precomputation reused across observations.
#[derive(Clone, Debug)]
pub struct Prepared {
    theta: DVector<f64>,
    /// `(theta^{1/2}, theta^{-1/2})` for the Bures-Wasserstein loss.
    roots: Option<(DMatrix<f64>, DMatrix<f64>)>,
}

impl Prepared {
    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }
}

#[derive(Clone, Debug)]
pub struct LossModel {
    kind: LossKind,
    manifold: ManifoldSpec,
}

impl LossModel {
    pub fn new(kind: LossKind, manifold: ManifoldSpec) -> Result<Self> {
        let ok = match (&kind, manifold.kind()) {
            (LossKind::ExtrinsicMean, _) => true,
            (LossKind::FrechetSphere, ManifoldKind::Sphere) => true,
            (LossKind::FrechetSphere, ManifoldKind::Solution(c)) => c.name() == "unit-sphere",
            (LossKind::FrechetSo2, ManifoldKind::SpecialOrthogonal { p: 2 }) => true,
            (LossKind::BwBarycenter, ManifoldKind::Symmetric { .. }) => true,
            (LossKind::BwBarycenter, ManifoldKind::Solution(c)) => c.name() == "symmetric",
            (LossKind::SpectralProjector, ManifoldKind::Grassmann { .. }) => true,
            (LossKind::SpectralProjector, ManifoldKind::Solution(c)) => c.name() == "grassmann",
            (LossKind::MultiQuantile(q), m) => {
                validate_levels(&q.levels)?;
                let k = q.levels.len();
                let p = q.covariate_dim;
                let coef_ok = |s: &ManifoldSpec| match s.kind() {
                    ManifoldKind::FixedRank { rows, cols, .. } => *rows == p && *cols == k,
                    ManifoldKind::Ambient => s.ambient_dim() == p * k,
                    _ => false,
                };
                if q.intercept {
                    match m {
                        ManifoldKind::Product(a, b) => a.is_ambient() && a.ambient_dim() == k && coef_ok(b),
                        ManifoldKind::Ambient => manifold.ambient_dim() == k + p * k,
                        _ => false,
                    }
                } else {
                    coef_ok(&manifold)
                }
            }
            _ => false,
        };
        if !ok {
            return Err(Error::Config(format!(
                "loss `{}` is not compatible with manifold {}",
                kind.name(),
                manifold.label()
            )));
        }
        Ok(Self { kind, manifold })
    }

    pub fn kind(&self) -> &LossKind {
        &self.kind
    }

    pub fn manifold(&self) -> &ManifoldSpec {
        &self.manifold
    }

    /// Smooth losses admit the Langevin sampler; the check loss does not.
    pub fn is_smooth(&self) -> bool {
        !matches!(self.kind, LossKind::MultiQuantile(_))
    }

    fn matrix_side(&self) -> usize {
        (self.manifold.ambient_dim() as f64).sqrt().round() as usize
    }

    /// Validates the payload shape of one observation.
    pub fn check_observation(&self, x: &Observation) -> Result<()> {
        let dim = self.manifold.ambient_dim();
        match (&self.kind, x) {
            (LossKind::MultiQuantile(q), Observation::Labeled { covariates, response }) => {
                if covariates.len() != q.covariate_dim {
                    return Err(Error::Dimension { expected: q.covariate_dim, got: covariates.len() });
                }
                if !response.is_finite() || covariates.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config("non-finite observation".into()));
                }
                Ok(())
            }
            (LossKind::MultiQuantile(_), Observation::Point(_)) => {
                Err(Error::Config("multi-quantile loss needs covariate/response observations".into()))
            }
            (LossKind::SpectralProjector, Observation::Point(v)) => {
                let p = self.matrix_side();
                if v.len() != p {
                    return Err(Error::Dimension { expected: p, got: v.len() });
                }
                Ok(())
            }
            (LossKind::BwBarycenter, Observation::Point(v)) => {
                if v.len() != dim {
                    return Err(Error::Dimension { expected: dim, got: v.len() });
                }
                let p = self.matrix_side();
                check_psd(&as_matrix(v, p, p), "observation")
            }
            (_, Observation::Point(v)) => {
                if v.len() != dim {
                    return Err(Error::Dimension { expected: dim, got: v.len() });
                }
                Ok(())
            }
            (_, Observation::Labeled { .. }) => {
                Err(Error::Config(format!("loss `{}` needs vector observations", self.kind.name())))
            }
        }
    }

    /// Precomputes parameter-dependent quantities.
    pub fn prepare(&self, theta: &DVector<f64>) -> Result<Prepared> {
        if theta.len() != self.manifold.ambient_dim() {
            return Err(Error::Dimension { expected: self.manifold.ambient_dim(), got: theta.len() });
        }
        let roots = if self.kind == LossKind::BwBarycenter {
            let p = self.matrix_side();
            let m = as_matrix(theta, p, p);
            check_psd(&m, "parameter")?;
            spd_sqrt(&m).or_else(|| Some((psd_sqrt(&m), DMatrix::from_element(p, p, f64::NAN))))
        } else {
            None
        };
        Ok(Prepared { theta: theta.clone(), roots })
    }

    /// Loss value at a prepared parameter.
    pub fn value_at(&self, prep: &Prepared, x: &Observation) -> Result<f64> {
        let theta = &prep.theta;
        match (&self.kind, x) {
            (LossKind::ExtrinsicMean, Observation::Point(v)) => Ok((theta - v).norm_squared()),
            (LossKind::FrechetSphere, Observation::Point(v)) => Ok(clamped_acos(v.dot(theta)).powi(2)),
            (LossKind::FrechetSo2, Observation::Point(v)) => {
                Ok(clamped_acos(v[0] * theta[0] + v[1] * theta[1]).powi(2))
            }
            (LossKind::BwBarycenter, Observation::Point(v)) => {
                let p = self.matrix_side();
                let (root, _) = prep.roots.as_ref().expect("prepared roots");
                let s = as_matrix(v, p, p);
                let inner = root * &s * root;
                let cross = psd_sqrt(&inner).trace();
                Ok((theta.iter().step_by(p + 1).sum::<f64>() + s.trace() - 2.0 * cross).max(0.0))
            }
            (LossKind::SpectralProjector, Observation::Point(v)) => {
                let p = v.len();
                let m = as_matrix(theta, p, p);
                Ok(-(v.transpose() * m * v)[0])
            }
            (LossKind::MultiQuantile(q), Observation::Labeled { covariates, response }) => {
                let mut total = 0.0;
                for (k, &tau) in q.levels.iter().enumerate() {
                    total += check_loss(tau, self.quantile_residual(q, theta, covariates, *response, k));
                }
                Ok(total)
            }
            _ => Err(Error::Config("observation kind does not match the loss".into())),
        }
    }

    fn quantile_residual(&self, q: &QuantileLevels, theta: &DVector<f64>, x: &DVector<f64>, y: f64, k: usize) -> f64 {
        let nk = q.levels.len();
        let p = q.covariate_dim;
        let off = if q.intercept { nk } else { 0 };
        let mut fit = if q.intercept { theta[k] } else { 0.0 };
        let base = off + k * p;
        for j in 0..p {
            fit += x[j] * theta[base + j];
        }
        y - fit
    }

    /// Euclidean (sub)gradient at a prepared parameter, written into `out`.
    pub fn gradient_into(&self, prep: &Prepared, x: &Observation, out: &mut [f64]) -> Result<()> {
        let theta = &prep.theta;
        out.iter_mut().for_each(|o| *o = 0.0);
        match (&self.kind, x) {
            (LossKind::ExtrinsicMean, Observation::Point(v)) => {
                for (o, (t, s)) in out.iter_mut().zip(theta.iter().zip(v.iter())) {
                    *o = 2.0 * (t - s);
                }
            }
            (LossKind::FrechetSphere, Observation::Point(v)) => {
                let w = acos_sq_slope(v.dot(theta))?;
                for (o, s) in out.iter_mut().zip(v.iter()) {
                    *o = w * s;
                }
            }
            (LossKind::FrechetSo2, Observation::Point(v)) => {
                let w = acos_sq_slope(v[0] * theta[0] + v[1] * theta[1])?;
                out[0] = w * v[0];
                out[1] = w * v[1];
            }
            (LossKind::BwBarycenter, Observation::Point(v)) => {
                let p = self.matrix_side();
                let (root, inv_root) = prep.roots.as_ref().expect("prepared roots");
                if inv_root[(0, 0)].is_nan() {
                    return Err(Error::UndefinedGradient("Bures-Wasserstein gradient needs a definite parameter".into()));
                }
                let s = as_matrix(v, p, p);
                let mid = psd_sqrt(&(root * &s * root));
                let t = inv_root * mid * inv_root;
                let g = DMatrix::identity(p, p) - t;
                out.copy_from_slice(as_vector(&crate::linalg::sym(&g)).as_slice());
            }
            (LossKind::SpectralProjector, Observation::Point(v)) => {
                let p = v.len();
                for j in 0..p {
                    for i in 0..p {
                        out[i + j * p] = -v[i] * v[j];
                    }
                }
            }
            (LossKind::MultiQuantile(q), Observation::Labeled { covariates, response }) => {
                let nk = q.levels.len();
                let p = q.covariate_dim;
                let off = if q.intercept { nk } else { 0 };
                for (k, &tau) in q.levels.iter().enumerate() {
                    let slope = check_loss_slope(tau, self.quantile_residual(q, theta, covariates, *response, k));
                    if q.intercept {
                        out[k] = -slope;
                    }
                    for j in 0..p {
                        out[off + k * p + j] = -slope * covariates[j];
                    }
                }
            }
            _ => return Err(Error::Config("observation kind does not match the loss".into())),
        }
        Ok(())
    }

    /// Directional derivative of the Euclidean gradient along `u`.
    pub fn gradient_derivative(&self, prep: &Prepared, x: &Observation, u: &DVector<f64>) -> Result<DVector<f64>> {
        let theta = &prep.theta;
        let dim = theta.len();
        Ok(match (&self.kind, x) {
            (LossKind::ExtrinsicMean, _) => u * 2.0,
            (LossKind::SpectralProjector, _) | (LossKind::MultiQuantile(_), _) => DVector::zeros(dim),
            (LossKind::FrechetSphere, Observation::Point(v)) => {
                let c = v.dot(theta);
                v * (acos_sq_curvature(c)? * v.dot(u))
            }
            (LossKind::FrechetSo2, Observation::Point(v)) => {
                let c = v[0] * theta[0] + v[1] * theta[1];
                let w = acos_sq_curvature(c)? * (v[0] * u[0] + v[1] * u[1]);
                let mut out = DVector::zeros(dim);
                out[0] = w * v[0];
                out[1] = w * v[1];
                out
            }
            (LossKind::BwBarycenter, _) => {
                let h = 1e-6 * theta.norm().max(1.0);
                let plus = self.prepare(&(theta + u * h))?;
                let minus = self.prepare(&(theta - u * h))?;
                let mut gp = vec![0.0; dim];
                let mut gm = vec![0.0; dim];
                self.gradient_into(&plus, x, &mut gp)?;
                self.gradient_into(&minus, x, &mut gm)?;
                DVector::from_iterator(dim, gp.iter().zip(gm.iter()).map(|(a, b)| (a - b) / (2.0 * h)))
            }
            _ => return Err(Error::Config("observation kind does not match the loss".into())),
        })
    }

    pub fn eval(&self, x: &Observation, theta: &ManifoldPoint) -> Result<f64> {
        self.check_observation(x)?;
        self.value_at(&self.prepare(theta.coords())?, x)
    }

    pub fn euclidean_grad(&self, x: &Observation, theta: &ManifoldPoint) -> Result<DVector<f64>> {
        self.check_observation(x)?;
        let prep = self.prepare(theta.coords())?;
        let mut out = vec![0.0; theta.dim()];
        self.gradient_into(&prep, x, &mut out)?;
        Ok(DVector::from_vec(out))
    }

    /// Tangent-projected (sub)gradient field at `theta`.
    pub fn rgrad(&self, x: &Observation, theta: &ManifoldPoint) -> Result<TangentVector> {
        let g = self.euclidean_grad(x, theta)?;
        let p = self.manifold.tangent_projector(theta)?;
        Ok(TangentVector::new(theta.clone(), p * g))
    }

    /// Mean loss over the data.
    pub fn empirical_risk(&self, data: &[Observation], theta: &ManifoldPoint) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::EmptyData);
        }
        let prep = self.prepare(theta.coords())?;
        let mut total = 0.0;
        for x in data {
            total += self.value_at(&prep, x)?;
        }
        Ok(total / data.len() as f64)
    }

    /// Per-observation lower bound on the loss (zero except for the projector loss).
    pub fn lower_bound(&self, x: &Observation) -> f64 {
        match (&self.kind, x) {
            (LossKind::SpectralProjector, Observation::Point(v)) => -v.norm_squared(),
            _ => 0.0,
        }
    }
}

fn validate_levels(levels: &[f64]) -> Result<()> {
    if levels.is_empty() {
        return Err(Error::Config("quantile levels are empty".into()));
    }
    if levels.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
        return Err(Error::Config("quantile levels must lie strictly inside (0, 1)".into()));
    }
    if levels.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Config("quantile levels must be strictly increasing".into()));
    }
    Ok(())
}

fn check_psd(m: &DMatrix<f64>, what: &str) -> Result<()> {
    let asym = (m - m.transpose()).norm();
    let scale = m.norm().max(1.0);
    if asym > 1e-8 * scale {
        return Err(Error::NotPsd(format!("{what} is not symmetric")));
    }
    let (vals, _) = sorted_eigen(m);
    if vals[vals.len() - 1] < -1e-12 * scale {
        return Err(Error::NotPsd(format!("{what} has a negative eigenvalue")));
    }
    Ok(())
}

fn clamped_acos(c: f64) -> f64 {
    c.clamp(-1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP).acos()
}

/// `d/dc arccos^2(c) = -2 arccos(c) / sqrt(1 - c^2)`.
fn acos_sq_slope(c: f64) -> Result<f64> {
    if c < -1.0 + NEAR_COINCIDENT {
        return Err(Error::UndefinedGradient("antipodal points".into()));
    }
    if c > 1.0 - NEAR_COINCIDENT {
        return Ok(-2.0);
    }
    let c = c.clamp(-1.0 + ARCCOS_CLAMP, 1.0 - ARCCOS_CLAMP);
    Ok(-2.0 * c.acos() / (1.0 - c * c).sqrt())
}

/// `d^2/dc^2 arccos^2(c)`, with the removable singularity at `c = 1` filled in.
fn acos_sq_curvature(c: f64) -> Result<f64> {
    if c < -1.0 + NEAR_COINCIDENT {
        return Err(Error::UndefinedGradient("antipodal points".into()));
    }
    if c > 1.0 - 1e-6 {
        return Ok(2.0 / 3.0);
    }
    let s2 = 1.0 - c * c;
    let h = c.acos() / s2.sqrt();
    Ok(-2.0 * (c * h - 1.0) / s2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn v(xs: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(xs)
    }

    fn fd_along_retraction(loss: &LossModel, x: &Observation, th: &ManifoldPoint, u: &DVector<f64>) -> f64 {
        let m = loss.manifold();
        let h = 1e-6;
        let p = m.retract(th, &(u * h)).unwrap();
        let q = m.retract(th, &(u * -h)).unwrap();
        (loss.eval(x, &p).unwrap() - loss.eval(x, &q).unwrap()) / (2.0 * h)
    }

    #[test]
    fn bw_examples() {
        let m = ManifoldSpec::symmetric(2).unwrap();
        let l = LossModel::new(LossKind::BwBarycenter, m).unwrap();
        let q = ManifoldPoint::from_slice(&[1.0, 0.0, 0.0, 1.0]);
        assert!(l.eval(&Observation::point(&[1.0, 0.0, 0.0, 1.0]), &q).unwrap().abs() < 1e-12);
        let d = l.eval(&Observation::point(&[4.0, 0.0, 0.0, 4.0]), &q).unwrap();
        assert!((d - 2.0).abs() < 1e-12);
        let bad = ManifoldPoint::from_slice(&[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(l.eval(&Observation::point(&[1.0, 0.0, 0.0, 1.0]), &bad), Err(Error::NotPsd(_))));
        assert!(l.check_observation(&Observation::point(&[-1.0, 0.0, 0.0, 1.0])).is_err());
    }

    #[test]
    fn bw_self_distance_vanishes() {
        let m = ManifoldSpec::symmetric(3).unwrap();
        let l = LossModel::new(LossKind::BwBarycenter, m).unwrap();
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.0, -0.2, 0.1, -0.2, 0.5]);
        let th = ManifoldPoint::new(as_vector(&a));
        assert!(l.eval(&Observation::Point(as_vector(&a)), &th).unwrap() < 1e-12);
    }

    #[test]
    fn check_loss_examples() {
        assert!((check_loss(0.2, 1.0) - 0.2).abs() < 1e-15);
        assert!((check_loss(0.2, -1.0) - 0.8).abs() < 1e-15);
        assert_eq!(check_loss_slope(0.2, 0.0), 0.2 - 1.0);
    }

    #[test]
    fn extrinsic_gradient_examples() {
        let m = ManifoldSpec::sphere(2).unwrap();
        let l = LossModel::new(LossKind::ExtrinsicMean, m).unwrap();
        let th = ManifoldPoint::from_slice(&[1.0, 0.0]);
        assert!(l.rgrad(&Observation::point(&[1.0, 0.0]), &th).unwrap().norm() == 0.0);
        let g = l.rgrad(&Observation::point(&[0.0, 1.0]), &th).unwrap();
        assert!((g.coords - v(&[0.0, -2.0])).norm() < 1e-15);
    }

    #[test]
    fn empirical_risk_examples() {
        let m = ManifoldSpec::sphere(3).unwrap();
        let l = LossModel::new(LossKind::ExtrinsicMean, m.clone()).unwrap();
        let th = ManifoldPoint::from_slice(&[0.0, 0.0, 1.0]);
        let x = Observation::point(&[1.0, 0.0, 0.0]);
        assert_eq!(l.empirical_risk(std::slice::from_ref(&x), &th).unwrap(), l.eval(&x, &th).unwrap());
        assert!(matches!(l.empirical_risk(&[], &th), Err(Error::EmptyData)));
        let same = vec![Observation::point(&[0.0, 0.0, 1.0]); 5];
        assert_eq!(l.empirical_risk(&same, &th).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<Observation> = (0..257)
            .map(|_| Observation::Point(m.random_point(&mut rng).into_coords()))
            .collect();
        let mut oracle = 0.0;
        for x in data.iter().rev() {
            if let Observation::Point(p) = x {
                let d = p - th.coords();
                oracle += d.dot(&d);
            }
        }
        oracle /= data.len() as f64;
        assert!((l.empirical_risk(&data, &th).unwrap() - oracle).abs() < 1e-12);
    }

    #[test]
    fn frechet_sphere_gradient_matches_fd() {
        let m = ManifoldSpec::sphere(3).unwrap();
        let l = LossModel::new(LossKind::FrechetSphere, m.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut checked = 0;
        while checked < 100 {
            let th = m.random_point(&mut rng);
            let xp = m.random_point(&mut rng);
            if xp.coords().dot(th.coords()).abs() > 0.99 {
                continue;
            }
            let x = Observation::Point(xp.into_coords());
            let space = m.tangent_space(&th).unwrap();
            let u = m.random_tangent(&space, 1.0, &mut rng);
            let g = l.rgrad(&x, &th).unwrap();
            let fd = fd_along_retraction(&l, &x, &th, &u);
            let an = g.coords.dot(&u);
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0), "{fd} vs {an}");
            checked += 1;
        }
    }

    #[test]
    fn frechet_gradient_limits() {
        let m = ManifoldSpec::sphere(2).unwrap();
        let l = LossModel::new(LossKind::FrechetSphere, m).unwrap();
        let th = ManifoldPoint::from_slice(&[1.0, 0.0]);
        let g = l.euclidean_grad(&Observation::point(&[1.0, 0.0]), &th).unwrap();
        assert!((g - v(&[-2.0, 0.0])).norm() < 1e-15);
        assert!(matches!(
            l.euclidean_grad(&Observation::point(&[-1.0, 0.0]), &th),
            Err(Error::UndefinedGradient(_))
        ));
    }

    #[test]
    fn so2_frechet_gradient_matches_fd() {
        let m = ManifoldSpec::special_orthogonal(2).unwrap();
        let l = LossModel::new(LossKind::FrechetSo2, m.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let a: f64 = rng.gen_range(-1.0..1.0);
            let b: f64 = a + rng.gen_range(0.2..2.0);
            let th = ManifoldPoint::from_slice(&[a.cos(), a.sin(), -a.sin(), a.cos()]);
            let x = Observation::point(&[b.cos(), b.sin(), -b.sin(), b.cos()]);
            assert!((l.eval(&x, &th).unwrap() - (b - a).powi(2)).abs() < 1e-10);
            let space = m.tangent_space(&th).unwrap();
            let u = m.random_tangent(&space, 1.0, &mut rng);
            let an = l.rgrad(&x, &th).unwrap().coords.dot(&u);
            let fd = fd_along_retraction(&l, &x, &th, &u);
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0));
        }
    }

    fn random_spd(rng: &mut ChaCha8Rng, p: usize) -> DMatrix<f64> {
        let g = DMatrix::from_fn(p, p, |_, _| StandardNormal.sample(&mut *rng));
        let (_, q) = sorted_eigen(&(&g + g.transpose()));
        let ev = DVector::from_fn(p, |_, _| rng.gen_range(0.5..3.0));
        &q * DMatrix::from_diagonal(&ev) * q.transpose()
    }

    #[test]
    fn bw_gradient_matches_fd() {
        let m = ManifoldSpec::symmetric(2).unwrap();
        let l = LossModel::new(LossKind::BwBarycenter, m.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let th = ManifoldPoint::new(as_vector(&random_spd(&mut rng, 2)));
            let x = Observation::Point(as_vector(&random_spd(&mut rng, 2)));
            let space = m.tangent_space(&th).unwrap();
            let u = m.random_tangent(&space, 1.0, &mut rng);
            let an = l.rgrad(&x, &th).unwrap().coords.dot(&u);
            let fd = fd_along_retraction(&l, &x, &th, &u);
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "{fd} vs {an}");
        }
    }

    #[test]
    fn quantile_subgradient_matches_fd_away_from_kinks() {
        let m = ManifoldSpec::fixed_rank(3, 2, 1).unwrap();
        let q = QuantileLevels { levels: vec![0.2, 0.5], covariate_dim: 3, intercept: false };
        let l = LossModel::new(LossKind::MultiQuantile(q), m.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let th = m.random_point(&mut rng);
            let x = Observation::labeled(&[rng.gen(), rng.gen(), rng.gen()], rng.gen_range(-2.0..2.0));
            let space = m.tangent_space(&th).unwrap();
            let u = m.random_tangent(&space, 1.0, &mut rng);
            let an = l.rgrad(&x, &th).unwrap().coords.dot(&u);
            let fd = fd_along_retraction(&l, &x, &th, &u);
            assert!((fd - an).abs() <= 1e-5 * an.abs().max(1.0));
        }
    }

    #[test]
    fn spectral_loss_respects_lower_bound() {
        let m = ManifoldSpec::grassmann(3, 2).unwrap();
        let l = LossModel::new(LossKind::SpectralProjector, m.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..100 {
            let th = m.random_point(&mut rng);
            let x = Observation::Point(DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng)));
            assert!(l.eval(&x, &th).unwrap() >= l.lower_bound(&x) - 1e-12);
            assert!(l.eval(&x, &th).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn gradient_derivative_matches_fd_of_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let cases = vec![
            LossModel::new(LossKind::FrechetSphere, ManifoldSpec::sphere(3).unwrap()).unwrap(),
            LossModel::new(LossKind::ExtrinsicMean, ManifoldSpec::sphere(3).unwrap()).unwrap(),
        ];
        for l in cases {
            let m = l.manifold().clone();
            let th = m.random_point(&mut rng);
            let mut xp = m.random_point(&mut rng);
            while xp.coords().dot(th.coords()) < 0.0 {
                xp = m.random_point(&mut rng);
            }
            let x = Observation::Point(xp.into_coords());
            let u = DVector::from_fn(3, |_, _| StandardNormal.sample(&mut rng));
            let h = 1e-6;
            let gp = l.euclidean_grad(&x, &ManifoldPoint::new(th.coords() + &u * h)).unwrap();
            let gm = l.euclidean_grad(&x, &ManifoldPoint::new(th.coords() - &u * h)).unwrap();
            let fd = (gp - gm) / (2.0 * h);
            let an = l.gradient_derivative(&l.prepare(th.coords()).unwrap(), &x, &u).unwrap();
            assert!((fd - an).norm() < 1e-5);
        }
    }

    #[test]
    fn compatibility_and_level_checks() {
        let s = ManifoldSpec::sphere(3).unwrap();
        assert!(LossModel::new(LossKind::BwBarycenter, s.clone()).is_err());
        assert!(LossModel::new(LossKind::FrechetSo2, s).is_err());
        let f = ManifoldSpec::fixed_rank(3, 2, 1).unwrap();
        let bad = QuantileLevels { levels: vec![0.5, 0.2], covariate_dim: 3, intercept: false };
        assert!(LossModel::new(LossKind::MultiQuantile(bad), f.clone()).is_err());
        let edge = QuantileLevels { levels: vec![0.0, 0.5], covariate_dim: 3, intercept: false };
        assert!(LossModel::new(LossKind::MultiQuantile(edge), f).is_err());
        let amb = ManifoldSpec::ambient(6).unwrap();
        let ok = QuantileLevels { levels: vec![0.2, 0.5], covariate_dim: 3, intercept: false };
        assert!(LossModel::new(LossKind::MultiQuantile(ok), amb).is_ok());
        let prod = ManifoldSpec::product(ManifoldSpec::ambient(3).unwrap(), ManifoldSpec::fixed_rank(2, 3, 2).unwrap());
        let with_icpt = QuantileLevels { levels: vec![0.4, 0.5, 0.6], covariate_dim: 2, intercept: true };
        assert!(LossModel::new(LossKind::MultiQuantile(with_icpt), prod).is_ok());
    }
}
