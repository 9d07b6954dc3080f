//! Embedded submanifolds of `R^D`.
//!
//! Every manifold is stored in ambient coordinates; matrix manifolds are
//! column-vectorized. The local parametrization pair is
//! `psi_theta(y) = P_theta (y - theta)` and its inverse `phi_theta`.

mod constraints;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

pub use constraints::{registry as constraint_registry, ConstraintSet, ProjectorEquations, SymmetricEntries, UnitSphere};

use crate::error::{Error, Result};
use crate::linalg::{as_matrix, as_vector, pinv, pivoted_basis, skew, sorted_eigen, sym};

/// Singular-value ratio `s_{r+1}/s_r` at or below which a matrix counts as rank `r`.
pub const RANK_GAP: f64 = 1e-8;

const PHI_TOL: f64 = 1e-10;
const PHI_NEWTON_MAX: usize = 100;
const PHI_DESCENT_MAX: usize = 500;
const ARMIJO_C: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct ManifoldPoint(DVector<f64>);

impl ManifoldPoint {
    /// Wraps ambient coordinates without a membership check.
    pub fn new(coords: DVector<f64>) -> Self {
        Self(coords)
    }

    pub fn from_slice(coords: &[f64]) -> Self {
        Self(DVector::from_column_slice(coords))
    }

    pub fn coords(&self) -> &DVector<f64> {
        &self.0
    }

    pub fn into_coords(self) -> DVector<f64> {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

#[derive(Clone, Debug)]
pub struct TangentVector {
    pub base: ManifoldPoint,
    pub coords: DVector<f64>,
}

impl TangentVector {
    pub fn new(base: ManifoldPoint, coords: DVector<f64>) -> Self {
        Self { base, coords }
    }

    pub fn zero(base: &ManifoldPoint) -> Self {
        Self { base: base.clone(), coords: DVector::zeros(base.dim()) }
    }

    pub fn norm(&self) -> f64 {
        self.coords.norm()
    }
}

/// Orthonormal `D x d` frame of a tangent space.
#[derive(Clone, Debug)]
pub struct TangentBasis {
    pub base: ManifoldPoint,
    pub frame: DMatrix<f64>,
}

impl TangentBasis {
    pub fn dim(&self) -> usize {
        self.frame.ncols()
    }

    /// Coordinates `V' v` of an ambient vector.
    pub fn coordinates(&self, v: &DVector<f64>) -> DVector<f64> {
        self.frame.tr_mul(v)
    }

    /// Ambient vector `V c`.
    pub fn embed(&self, c: &DVector<f64>) -> DVector<f64> {
        &self.frame * c
    }
}

/// Projector and frame at one point, computed together.
#[derive(Clone, Debug)]
pub struct TangentSpace {
    pub base: ManifoldPoint,
    pub projector: DMatrix<f64>,
    pub frame: DMatrix<f64>,
}

impl TangentSpace {
    pub fn dim(&self) -> usize {
        self.frame.ncols()
    }

    pub fn project(&self, z: &DVector<f64>) -> DVector<f64> {
        &self.projector * z
    }

    pub fn coordinates(&self, v: &DVector<f64>) -> DVector<f64> {
        self.frame.tr_mul(v)
    }

    pub fn embed(&self, c: &DVector<f64>) -> DVector<f64> {
        &self.frame * c
    }

    pub fn basis(&self) -> TangentBasis {
        TangentBasis { base: self.base.clone(), frame: self.frame.clone() }
    }

    /// `psi_base(y) = P (y - base)`.
    pub fn psi(&self, y: &DVector<f64>) -> DVector<f64> {
        &self.projector * (y - self.base.coords())
    }
}

/// Result of inverting the local parametrization.
#[derive(Clone, Debug)]
pub struct PhiOutcome {
    pub point: ManifoldPoint,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub enum ManifoldKind {
    Sphere,
    SpecialOrthogonal { p: usize },
    Symmetric { p: usize },
    Grassmann { p: usize, r: usize },
    FixedRank { rows: usize, cols: usize, rank: usize },
    Solution(Arc<dyn ConstraintSet>),
    Ambient,
    /// Cartesian product; coordinates are the first factor's followed by the second's.
    Product(Box<ManifoldSpec>, Box<ManifoldSpec>),
}

#[derive(Clone, Debug)]
pub struct ManifoldSpec {
    kind: ManifoldKind,
    ambient_dim: usize,
    intrinsic_dim: usize,
    membership_tol: f64,
    trust_radius: f64,
    newton_phi: bool,
}

impl ManifoldSpec {
    fn build(kind: ManifoldKind, ambient_dim: usize, intrinsic_dim: usize, trust_radius: f64) -> Self {
        Self { kind, ambient_dim, intrinsic_dim, membership_tol: 1e-8, trust_radius, newton_phi: false }
    }

    /// Unit sphere in `R^dim`.
    pub fn sphere(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config("sphere needs ambient dimension >= 2".into()));
        }
        Ok(Self::build(ManifoldKind::Sphere, dim, dim - 1, 0.5))
    }

    pub fn special_orthogonal(p: usize) -> Result<Self> {
        if p < 2 {
            return Err(Error::Config("special-orthogonal needs p >= 2".into()));
        }
        Ok(Self::build(ManifoldKind::SpecialOrthogonal { p }, p * p, p * (p - 1) / 2, 0.5))
    }

    pub fn symmetric(p: usize) -> Result<Self> {
        if p == 0 {
            return Err(Error::Config("symmetric-matrices needs p >= 1".into()));
        }
        Ok(Self::build(ManifoldKind::Symmetric { p }, p * p, p * (p + 1) / 2, f64::INFINITY))
    }

    pub fn grassmann(p: usize, r: usize) -> Result<Self> {
        if r == 0 || r >= p {
            return Err(Error::Config("grassmann needs 0 < r < p".into()));
        }
        Ok(Self::build(ManifoldKind::Grassmann { p, r }, p * p, r * (p - r), 0.5))
    }

    pub fn fixed_rank(rows: usize, cols: usize, rank: usize) -> Result<Self> {
        if rank == 0 || rank > rows.min(cols) {
            return Err(Error::Config("fixed-rank needs 0 < r <= min(p, k)".into()));
        }
        let d = (rows + cols) * rank - rank * rank;
        Ok(Self::build(ManifoldKind::FixedRank { rows, cols, rank }, rows * cols, d, 1.0))
    }

    pub fn solution(constraints: Arc<dyn ConstraintSet>) -> Result<Self> {
        let dim = constraints.ambient_dim();
        let k = constraints.count();
        if k >= dim {
            return Err(Error::Config("solution manifold needs fewer constraints than ambient dimensions".into()));
        }
        Ok(Self::build(ManifoldKind::Solution(constraints), dim, dim - k, 0.5))
    }

    /// Solution manifold from the built-in constraint registry.
    pub fn solution_named(name: &str, params: &[usize]) -> Result<Self> {
        Self::solution(constraint_registry(name, params)?)
    }

    pub fn ambient(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("ambient needs dimension >= 1".into()));
        }
        Ok(Self::build(ManifoldKind::Ambient, dim, dim, f64::INFINITY))
    }

    pub fn product(first: ManifoldSpec, second: ManifoldSpec) -> Self {
        let d = first.ambient_dim + second.ambient_dim;
        let k = first.intrinsic_dim + second.intrinsic_dim;
        let trust = first.trust_radius.min(second.trust_radius);
        Self::build(ManifoldKind::Product(Box::new(first), Box::new(second)), d, k, trust)
    }

    pub fn with_membership_tol(mut self, tol: f64) -> Self {
        self.membership_tol = tol;
        self
    }

    pub fn with_trust_radius(mut self, radius: f64) -> Self {
        self.trust_radius = radius;
        self
    }

    /// Use Newton iterations instead of gradient descent when inverting the
    /// parametrization on manifolds without a closed form.
    pub fn with_newton_phi(mut self, on: bool) -> Self {
        self.newton_phi = on;
        if let ManifoldKind::Product(a, b) = &mut self.kind {
            **a = a.as_ref().clone().with_newton_phi(on);
            **b = b.as_ref().clone().with_newton_phi(on);
        }
        self
    }

    pub fn kind(&self) -> &ManifoldKind {
        &self.kind
    }

    pub fn ambient_dim(&self) -> usize {
        self.ambient_dim
    }

    pub fn intrinsic_dim(&self) -> usize {
        self.intrinsic_dim
    }

    pub fn membership_tol(&self) -> f64 {
        self.membership_tol
    }

    pub fn trust_radius(&self) -> f64 {
        self.trust_radius
    }

    pub fn is_ambient(&self) -> bool {
        matches!(self.kind, ManifoldKind::Ambient)
    }

    /// Short human-readable name, e.g. `fixed-rank(3,2,1)`.
    pub fn label(&self) -> String {
        match &self.kind {
            ManifoldKind::Sphere => format!("sphere({})", self.ambient_dim),
            ManifoldKind::SpecialOrthogonal { p } => format!("special-orthogonal({p})"),
            ManifoldKind::Symmetric { p } => format!("symmetric({p})"),
            ManifoldKind::Grassmann { p, r } => format!("grassmann({p},{r})"),
            ManifoldKind::FixedRank { rows, cols, rank } => format!("fixed-rank({rows},{cols},{rank})"),
            ManifoldKind::Solution(c) => format!("solution({})", c.name()),
            ManifoldKind::Ambient => format!("ambient({})", self.ambient_dim),
            ManifoldKind::Product(a, b) => format!("{}x{}", a.label(), b.label()),
        }
    }

    fn check_dim(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.ambient_dim {
            return Err(Error::Dimension { expected: self.ambient_dim, got: x.len() });
        }
        Ok(())
    }

    fn split(&self, x: &DVector<f64>, first: &ManifoldSpec) -> (DVector<f64>, DVector<f64>) {
        let d1 = first.ambient_dim;
        (x.rows(0, d1).into_owned(), x.rows(d1, self.ambient_dim - d1).into_owned())
    }

    fn join(a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).copied())
    }

    /// Membership residual in the kind's natural measure (see `check_point`).
    pub fn membership_residual(&self, x: &DVector<f64>) -> f64 {
        if x.len() != self.ambient_dim || x.iter().any(|v| !v.is_finite()) {
            return f64::INFINITY;
        }
        match &self.kind {
            ManifoldKind::Sphere => (x.norm() - 1.0).abs(),
            ManifoldKind::SpecialOrthogonal { p } => {
                let m = as_matrix(x, *p, *p);
                let orth = (&m * m.transpose() - DMatrix::identity(*p, *p)).norm();
                orth.max((m.determinant() - 1.0).abs())
            }
            ManifoldKind::Symmetric { p } => skew(&as_matrix(x, *p, *p)).norm() * 2.0,
            ManifoldKind::Grassmann { p, r } => {
                let m = as_matrix(x, *p, *p);
                let idem = (&m * &m - &m).norm();
                let asym = (&m - m.transpose()).norm();
                idem.max(asym).max((m.trace() - *r as f64).abs())
            }
            ManifoldKind::FixedRank { rows, cols, rank } => {
                let s = sorted_singular_values(&as_matrix(x, *rows, *cols));
                let sr = s[*rank - 1];
                if !(sr > 0.0) {
                    return f64::INFINITY;
                }
                if *rank < s.len() {
                    s[*rank] / sr
                } else {
                    0.0
                }
            }
            ManifoldKind::Solution(c) => c.value(x, x).norm(),
            ManifoldKind::Ambient => 0.0,
            ManifoldKind::Product(a, b) => {
                let (xa, xb) = self.split(x, a);
                let ra = a.membership_residual(&xa) / a.membership_threshold();
                let rb = b.membership_residual(&xb) / b.membership_threshold();
                ra.max(rb) * self.membership_tol
            }
        }
    }

    fn membership_threshold(&self) -> f64 {
        match self.kind {
            ManifoldKind::FixedRank { .. } => RANK_GAP,
            _ => self.membership_tol,
        }
    }

    /// Errors unless `x` has the ambient dimension and lies on the manifold.
    /// Fixed-rank membership uses the singular-value gap rule `RANK_GAP`.
    pub fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        self.check_dim(x)?;
        let residual = self.membership_residual(x);
        let tol = self.membership_threshold();
        if !(residual <= tol) {
            return Err(Error::Membership { residual, tol });
        }
        Ok(())
    }

    pub fn contains(&self, x: &DVector<f64>) -> bool {
        self.check_point(x).is_ok()
    }

    /// Checked constructor for points.
    pub fn point(&self, coords: DVector<f64>) -> Result<ManifoldPoint> {
        self.check_point(&coords)?;
        Ok(ManifoldPoint(coords))
    }

    /// Orthogonal projector onto the tangent space at `theta`.
    pub fn tangent_projector(&self, theta: &ManifoldPoint) -> Result<DMatrix<f64>> {
        self.check_point(theta.coords())?;
        self.projector_unchecked(theta.coords())
    }

    fn projector_unchecked(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let dim = self.ambient_dim;
        Ok(match &self.kind {
            ManifoldKind::Sphere => DMatrix::identity(dim, dim) - x * x.transpose(),
            ManifoldKind::SpecialOrthogonal { p } => {
                let m = as_matrix(x, *p, *p);
                columns_of(dim, |z| {
                    let zm = as_matrix(z, *p, *p);
                    as_vector(&(&m * skew(&(m.transpose() * zm))))
                })
            }
            ManifoldKind::Symmetric { p } => symmetrizer(*p),
            ManifoldKind::Grassmann { p, .. } => {
                let pm = as_matrix(x, *p, *p);
                let q = DMatrix::identity(*p, *p) - &pm;
                columns_of(dim, |z| {
                    let s = sym(&as_matrix(z, *p, *p));
                    as_vector(&(&pm * &s * &q + &q * &s * &pm))
                })
            }
            ManifoldKind::FixedRank { rows, cols, rank } => {
                let (u, _, v) = thin_svd(&as_matrix(x, *rows, *cols), *rank);
                let uu = &u * u.transpose();
                let vv = &v * v.transpose();
                columns_of(dim, |z| {
                    let y = as_matrix(z, *rows, *cols);
                    let a = &uu * &y;
                    as_vector(&(&a + &y * &vv - &a * &vv))
                })
            }
            ManifoldKind::Solution(c) => {
                let q = c.jacobian(x, x).transpose();
                let k = c.count();
                let sv = crate::linalg::svd(&q).1;
                let top = sv.max();
                if !(sv.min() > 1e-10 * top) || sv.len() < k {
                    return Err(Error::RankDeficientConstraint);
                }
                let pr = DMatrix::identity(dim, dim) - &q * pinv(&q);
                sym(&pr)
            }
            ManifoldKind::Ambient => DMatrix::identity(dim, dim),
            ManifoldKind::Product(a, b) => {
                let (xa, xb) = self.split(x, a);
                let pa = a.projector_unchecked(&xa)?;
                let pb = b.projector_unchecked(&xb)?;
                let mut out = DMatrix::zeros(dim, dim);
                let d1 = a.ambient_dim;
                out.view_mut((0, 0), (d1, d1)).copy_from(&pa);
                out.view_mut((d1, d1), (dim - d1, dim - d1)).copy_from(&pb);
                out
            }
        })
    }

    /// Projector and frame at `theta`.
    pub fn tangent_space(&self, theta: &ManifoldPoint) -> Result<TangentSpace> {
        self.check_point(theta.coords())?;
        self.tangent_space_unchecked(theta)
    }

    pub(crate) fn tangent_space_unchecked(&self, theta: &ManifoldPoint) -> Result<TangentSpace> {
        let projector = self.projector_unchecked(theta.coords())?;
        let frame = if self.is_ambient() {
            DMatrix::identity(self.ambient_dim, self.ambient_dim)
        } else {
            pivoted_basis(&projector, self.intrinsic_dim)
        };
        Ok(TangentSpace { base: theta.clone(), projector, frame })
    }

    /// Orthonormal frame of the tangent space at `theta`; deterministic in `theta`.
    pub fn tangent_basis(&self, theta: &ManifoldPoint) -> Result<TangentBasis> {
        Ok(self.tangent_space(theta)?.basis())
    }

    /// Projects an ambient vector onto the tangent space at `theta`.
    pub fn to_tangent(&self, theta: &ManifoldPoint, z: &DVector<f64>) -> Result<TangentVector> {
        self.check_dim(z)?;
        let p = self.tangent_projector(theta)?;
        Ok(TangentVector::new(theta.clone(), p * z))
    }

    /// `psi_theta(y) = P_theta (y - theta)`.
    pub fn psi(&self, theta: &ManifoldPoint, y: &ManifoldPoint) -> Result<TangentVector> {
        self.check_point(y.coords())?;
        let p = self.tangent_projector(theta)?;
        Ok(TangentVector::new(theta.clone(), p * (y.coords() - theta.coords())))
    }

    /// Inverse of `psi` at `v.base`. Non-convergence is reported through the
    /// flag, not as an error.
    pub fn phi(&self, v: &TangentVector) -> Result<PhiOutcome> {
        self.check_dim(&v.coords)?;
        let space = self.tangent_space(&v.base)?;
        Ok(self.phi_in(&space, &v.coords))
    }

    /// `phi` using a precomputed tangent space at the base point.
    pub fn phi_in(&self, space: &TangentSpace, v: &DVector<f64>) -> PhiOutcome {
        let theta = &space.base;
        let fail = |iterations| PhiOutcome { point: theta.clone(), converged: false, iterations };
        let nv = v.norm();
        if nv == 0.0 {
            return PhiOutcome { point: theta.clone(), converged: true, iterations: 0 };
        }
        if !(nv <= self.trust_radius) {
            return fail(0);
        }
        let x = theta.coords();
        let done = |y: DVector<f64>, iterations| PhiOutcome { point: ManifoldPoint(y), converged: true, iterations };
        match &self.kind {
            ManifoldKind::Sphere => {
                let n2 = v.norm_squared();
                if n2 >= 1.0 {
                    return fail(0);
                }
                done(x * (1.0 - n2).sqrt() + v, 0)
            }
            ManifoldKind::Symmetric { .. } | ManifoldKind::Ambient => done(x + v, 0),
            ManifoldKind::FixedRank { .. } => match self.retract_unchecked(x, v) {
                Ok(y) => done(y, 0),
                Err(_) => fail(0),
            },
            ManifoldKind::Solution(c) => self.phi_constraint_newton(c.as_ref(), space, v),
            ManifoldKind::SpecialOrthogonal { .. } | ManifoldKind::Grassmann { .. } => {
                if self.newton_phi {
                    self.phi_newton(space, v)
                } else {
                    self.phi_descent(space, v)
                }
            }
            ManifoldKind::Product(a, b) => {
                let (xa, xb) = self.split(x, a);
                let (va, vb) = self.split(v, a);
                let sa = match a.tangent_space_unchecked(&ManifoldPoint(xa)) {
                    Ok(s) => s,
                    Err(_) => return fail(0),
                };
                let sb = match b.tangent_space_unchecked(&ManifoldPoint(xb)) {
                    Ok(s) => s,
                    Err(_) => return fail(0),
                };
                let oa = a.phi_in(&sa, &va);
                let ob = b.phi_in(&sb, &vb);
                PhiOutcome {
                    point: ManifoldPoint(Self::join(oa.point.coords(), ob.point.coords())),
                    converged: oa.converged && ob.converged,
                    iterations: oa.iterations.max(ob.iterations),
                }
            }
        }
    }

    /// Newton iterations on `q(theta + v + Q a) = 0` over `a`.
    fn phi_constraint_newton(&self, c: &dyn ConstraintSet, space: &TangentSpace, v: &DVector<f64>) -> PhiOutcome {
        let x = space.base.coords();
        let q = c.jacobian(x, x).transpose();
        let mut a = DVector::zeros(c.count());
        for it in 0..PHI_NEWTON_MAX {
            let y = x + v + &q * &a;
            let qv = c.value(x, &y);
            if !qv.iter().all(|t| t.is_finite()) {
                break;
            }
            if qv.norm() <= PHI_TOL {
                return PhiOutcome { point: ManifoldPoint(y), converged: true, iterations: it };
            }
            let jac = c.jacobian(x, &y) * &q;
            match jac.lu().solve(&(-qv)) {
                Some(step) => a += step,
                None => break,
            }
        }
        PhiOutcome { point: space.base.clone(), converged: false, iterations: PHI_NEWTON_MAX }
    }

    /// Riemannian gradient descent on `0.5 |P_theta (y - theta) - v|^2` with
    /// Armijo backtracking from unit step.
    fn phi_descent(&self, space: &TangentSpace, v: &DVector<f64>) -> PhiOutcome {
        let x = space.base.coords();
        let tol = PHI_TOL * (1.0 + v.norm());
        let limit = 4.0 * self.trust_radius;
        let residual = |y: &DVector<f64>| &space.projector * (y - x) - v;
        let mut y = x.clone();
        let mut r = residual(&y);
        for it in 0..PHI_DESCENT_MAX {
            let rn = r.norm();
            if rn <= tol {
                return PhiOutcome { point: ManifoldPoint(y), converged: true, iterations: it };
            }
            let py = match self.projector_unchecked(&y) {
                Ok(p) => p,
                Err(_) => break,
            };
            let g = py * &r;
            let gn2 = g.norm_squared();
            if !(gn2 > 0.0) {
                break;
            }
            let f0 = 0.5 * rn * rn;
            let mut step = 1.0;
            let mut next = None;
            while step > 1e-12 {
                if let Ok(cand) = self.retract_unchecked(&y, &(&g * -step)) {
                    let rc = residual(&cand);
                    if 0.5 * rc.norm_squared() <= f0 - ARMIJO_C * step * gn2 {
                        next = Some((cand, rc));
                        break;
                    }
                }
                step *= 0.5;
            }
            match next {
                Some((cand, rc)) => {
                    y = cand;
                    r = rc;
                }
                None => break,
            }
            if (&y - x).norm() > limit {
                break;
            }
        }
        PhiOutcome { point: space.base.clone(), converged: false, iterations: PHI_DESCENT_MAX }
    }

    /// Gauss-Newton iterations in the tangent frame of the current iterate.
    fn phi_newton(&self, space: &TangentSpace, v: &DVector<f64>) -> PhiOutcome {
        let x = space.base.coords();
        let tol = PHI_TOL * (1.0 + v.norm());
        let residual = |y: &DVector<f64>| &space.projector * (y - x) - v;
        let mut y = x.clone();
        let mut r = residual(&y);
        for it in 0..PHI_NEWTON_MAX {
            let rn = r.norm();
            if rn <= tol {
                return PhiOutcome { point: ManifoldPoint(y), converged: true, iterations: it };
            }
            let ts = match self.tangent_space_unchecked(&ManifoldPoint(y.clone())) {
                Ok(t) => t,
                Err(_) => break,
            };
            let a = &space.projector * &ts.frame;
            let step = match (a.transpose() * &a).cholesky() {
                Some(ch) => ch.solve(&(a.transpose() * &r)),
                None => break,
            };
            let dir = &ts.frame * step;
            let mut t = 1.0;
            let mut next = None;
            while t > 1e-12 {
                if let Ok(cand) = self.retract_unchecked(&y, &(&dir * -t)) {
                    let rc = residual(&cand);
                    if rc.norm() < rn {
                        next = Some((cand, rc));
                        break;
                    }
                }
                t *= 0.5;
            }
            match next {
                Some((cand, rc)) => {
                    y = cand;
                    r = rc;
                }
                None => break,
            }
        }
        PhiOutcome { point: space.base.clone(), converged: false, iterations: PHI_NEWTON_MAX }
    }

    /// Retraction `R_theta(v)`; `v` should be tangent at `theta`.
    pub fn retract(&self, theta: &ManifoldPoint, v: &DVector<f64>) -> Result<ManifoldPoint> {
        self.check_dim(theta.coords())?;
        self.check_dim(v)?;
        Ok(ManifoldPoint(self.retract_unchecked(theta.coords(), v)?))
    }

    fn retract_unchecked(&self, x: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        match &self.kind {
            ManifoldKind::Sphere => {
                let y = x + v;
                let n = y.norm();
                if !(n > 0.0) {
                    return Err(Error::Retraction("sphere step hits the origin".into()));
                }
                Ok(y / n)
            }
            ManifoldKind::SpecialOrthogonal { p } => {
                let m = as_matrix(&(x + v), *p, *p);
                let qr = m.qr();
                let mut q = qr.q();
                let r = qr.r();
                for k in 0..*p {
                    if r[(k, k)] < 0.0 {
                        q.column_mut(k).neg_mut();
                    }
                }
                if !(q.determinant() > 0.0) {
                    return Err(Error::Retraction("step leaves the identity component".into()));
                }
                Ok(as_vector(&q))
            }
            ManifoldKind::Symmetric { p } => Ok(as_vector(&sym(&as_matrix(&(x + v), *p, *p)))),
            ManifoldKind::Grassmann { p, r } => {
                spectral_projector(&sym(&as_matrix(&(x + v), *p, *p)), *r).map(|m| as_vector(&m))
            }
            ManifoldKind::FixedRank { rows, cols, rank } => {
                let xm = as_matrix(x, *rows, *cols);
                let (u, _, vv) = thin_svd(&xm, *rank);
                let y = xm + as_matrix(v, *rows, *cols);
                let yv = &y * &vv;
                let core = u.transpose() * &yv;
                let sv = crate::linalg::svd(&core).1;
                if !(sv.min() > 1e-12 * sv.max().max(1e-300)) {
                    return Err(Error::Retraction("orthographic retraction block is singular; reduce the step".into()));
                }
                let inv = core
                    .try_inverse()
                    .ok_or_else(|| Error::Retraction("orthographic retraction block is singular".into()))?;
                Ok(as_vector(&(yv * inv * u.transpose() * y)))
            }
            ManifoldKind::Solution(c) => {
                let space = self.tangent_space_unchecked(&ManifoldPoint(x.clone()))?;
                let out = self.phi_constraint_newton(c.as_ref(), &space, &(&space.projector * v));
                if out.converged {
                    Ok(out.point.0)
                } else {
                    Err(Error::Retraction("constraint Newton solve did not converge".into()))
                }
            }
            ManifoldKind::Ambient => Ok(x + v),
            ManifoldKind::Product(a, b) => {
                let (xa, xb) = self.split(x, a);
                let (va, vb) = self.split(v, a);
                Ok(Self::join(&a.retract_unchecked(&xa, &va)?, &b.retract_unchecked(&xb, &vb)?))
            }
        }
    }

    /// Nearest point on the manifold to an ambient vector.
    pub fn project(&self, x: &DVector<f64>) -> Result<ManifoldPoint> {
        self.project_near(x, None)
    }

    /// Nearest-point projection; for solution manifolds the descent starts at
    /// `hint` when given.
    pub fn project_near(&self, x: &DVector<f64>, hint: Option<&ManifoldPoint>) -> Result<ManifoldPoint> {
        self.check_dim(x)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Focal("non-finite input".into()));
        }
        let out = match &self.kind {
            ManifoldKind::Sphere => {
                let n = x.norm();
                if !(n > 1e-14) {
                    return Err(Error::Focal("zero vector has no radial projection".into()));
                }
                x / n
            }
            ManifoldKind::SpecialOrthogonal { p } => {
                let (u, _, v) = sorted_svd(&as_matrix(x, *p, *p));
                let vt = v.transpose();
                let mut d = DMatrix::identity(*p, *p);
                if (&u * &vt).determinant() < 0.0 {
                    d[(*p - 1, *p - 1)] = -1.0;
                }
                as_vector(&(u * d * vt))
            }
            ManifoldKind::Symmetric { p } => as_vector(&sym(&as_matrix(x, *p, *p))),
            ManifoldKind::Grassmann { p, r } => as_vector(&spectral_projector(&sym(&as_matrix(x, *p, *p)), *r)?),
            ManifoldKind::FixedRank { rows, cols, rank } => {
                let m = as_matrix(x, *rows, *cols);
                let (u, s, v) = sorted_svd(&m);
                let r = *rank;
                let top = s[0];
                let gap = if r < s.len() { s[r - 1] - s[r] } else { s[r - 1] };
                if !(s[r - 1] > 0.0) || !(gap > 1e-12 * top) {
                    return Err(Error::Focal("tied or vanishing singular values at the truncation rank".into()));
                }
                let ur = u.columns(0, r);
                let vr = v.columns(0, r);
                let sr = DMatrix::from_diagonal(&s.rows(0, r).into_owned());
                as_vector(&(ur * sr * vr.transpose()))
            }
            ManifoldKind::Solution(c) => self.project_solution(c.as_ref(), x, hint)?,
            ManifoldKind::Ambient => x.clone(),
            ManifoldKind::Product(a, b) => {
                let (xa, xb) = self.split(x, a);
                let (ha, hb) = match hint {
                    Some(h) => {
                        let (p, q) = self.split(h.coords(), a);
                        (Some(ManifoldPoint(p)), Some(ManifoldPoint(q)))
                    }
                    None => (None, None),
                };
                let pa = a.project_near(&xa, ha.as_ref())?;
                let pb = b.project_near(&xb, hb.as_ref())?;
                Self::join(pa.coords(), pb.coords())
            }
        };
        Ok(ManifoldPoint(out))
    }

    fn project_solution(&self, c: &dyn ConstraintSet, x: &DVector<f64>, hint: Option<&ManifoldPoint>) -> Result<DVector<f64>> {
        let anchor = hint.map(|h| h.coords().clone()).unwrap_or_else(|| x.clone());
        let mut y = anchor.clone();
        for _ in 0..200 {
            let qv = c.value(&anchor, &y);
            if qv.norm() <= 1e-13 {
                break;
            }
            let jac = c.jacobian(&anchor, &y);
            y -= pinv(&jac) * qv;
        }
        if !(c.value(&y, &y).norm() <= self.membership_tol) {
            return Err(Error::Focal("could not reach the constraint set".into()));
        }
        let tol = 1e-12 * (1.0 + x.norm());
        for _ in 0..PHI_DESCENT_MAX {
            let p = self.projector_unchecked(&y)?;
            let g = p * (&y - x);
            let gn2 = g.norm_squared();
            if gn2.sqrt() <= tol {
                break;
            }
            let f0 = 0.5 * (&y - x).norm_squared();
            let mut step = 1.0;
            let mut moved = false;
            while step > 1e-12 {
                if let Ok(cand) = self.retract_unchecked(&y, &(&g * -step)) {
                    if 0.5 * (&cand - x).norm_squared() <= f0 - ARMIJO_C * step * gn2 {
                        y = cand;
                        moved = true;
                        break;
                    }
                }
                step *= 0.5;
            }
            if !moved {
                break;
            }
        }
        Ok(y)
    }

    /// A random point, roughly spread over the manifold (not a specific law).
    pub fn random_point(&self, rng: &mut dyn RngCore) -> ManifoldPoint {
        let gauss = |rng: &mut dyn RngCore, n: usize| DVector::from_fn(n, |_, _| StandardNormal.sample(&mut *rng));
        let dim = self.ambient_dim;
        let out = match &self.kind {
            ManifoldKind::Sphere => {
                let g = gauss(rng, dim);
                &g / g.norm()
            }
            ManifoldKind::SpecialOrthogonal { .. } => self.project(&gauss(rng, dim)).expect("generic matrix").0,
            ManifoldKind::Symmetric { p } => as_vector(&sym(&as_matrix(&gauss(rng, dim), *p, *p))),
            ManifoldKind::Grassmann { .. } => self.project(&gauss(rng, dim)).expect("generic matrix").0,
            ManifoldKind::FixedRank { rows, cols, rank } => {
                let a = as_matrix(&gauss(rng, rows * rank), *rows, *rank);
                let b = as_matrix(&gauss(rng, cols * rank), *rank, *cols);
                as_vector(&(a * b))
            }
            ManifoldKind::Solution(c) => match c.sample(rng) {
                Some(x) => x,
                None => self.project(&gauss(rng, dim)).expect("generic point").0,
            },
            ManifoldKind::Ambient => gauss(rng, dim),
            ManifoldKind::Product(a, b) => {
                let pa = a.random_point(rng);
                let pb = b.random_point(rng);
                Self::join(pa.coords(), pb.coords())
            }
        };
        ManifoldPoint(out)
    }

    /// Random tangent vector at `space.base` with norm exactly `scale`.
    pub fn random_tangent(&self, space: &TangentSpace, scale: f64, rng: &mut dyn RngCore) -> DVector<f64> {
        let c = DVector::from_fn(space.dim(), |_, _| StandardNormal.sample(&mut *rng));
        let v = space.embed(&c);
        let n = v.norm();
        if n > 0.0 {
            v * (scale / n)
        } else {
            v
        }
    }
}

fn columns_of(dim: usize, f: impl Fn(&DVector<f64>) -> DVector<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(dim, dim);
    let mut e = DVector::zeros(dim);
    for j in 0..dim {
        e[j] = 1.0;
        out.set_column(j, &f(&e));
        e[j] = 0.0;
    }
    out
}

fn symmetrizer(p: usize) -> DMatrix<f64> {
    let dim = p * p;
    let mut out = DMatrix::zeros(dim, dim);
    for j in 0..p {
        for i in 0..p {
            let k = i + j * p;
            let kt = j + i * p;
            out[(k, k)] += 0.5;
            out[(k, kt)] += 0.5;
        }
    }
    out
}

/// Singular values sorted descending.
pub(crate) fn sorted_singular_values(m: &DMatrix<f64>) -> Vec<f64> {
    crate::linalg::svd(m).1.iter().copied().collect()
}

/// Full SVD with singular values sorted descending: `m = U diag(s) V'`.
pub(crate) fn sorted_svd(m: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    crate::linalg::svd(m)
}

/// Leading `r` singular triplets.
pub(crate) fn thin_svd(m: &DMatrix<f64>, r: usize) -> (DMatrix<f64>, DVector<f64>, DMatrix<f64>) {
    let (u, s, v) = sorted_svd(m);
    (u.columns(0, r).into_owned(), s.rows(0, r).into_owned(), v.columns(0, r).into_owned())
}

/// Projector onto the top-`r` eigenspace of a symmetric matrix.
pub(crate) fn spectral_projector(m: &DMatrix<f64>, r: usize) -> Result<DMatrix<f64>> {
    let (vals, vecs) = sorted_eigen(m);
    let scale = vals.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    if !(vals[r - 1] - vals[r] > 1e-12 * scale) {
        return Err(Error::Focal("tied eigenvalues at the projector rank".into()));
    }
    let u = vecs.columns(0, r);
    Ok(&u * u.transpose())
}
