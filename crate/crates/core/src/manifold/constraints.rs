//! Built-in constraint functions for solution manifolds `{x : q(x) = 0}`.
//!
//! A constraint set may be local: `value` and `jacobian` take an anchor point
//! and only need to describe the manifold in a neighbourhood of it.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{as_matrix, as_vector, sorted_eigen, sym};

pub trait ConstraintSet: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn ambient_dim(&self) -> usize;
    /// Number of scalar constraints `k`; the manifold has dimension `D - k`.
    fn count(&self) -> usize;
    fn value(&self, anchor: &DVector<f64>, x: &DVector<f64>) -> DVector<f64>;
    /// `k x D` Jacobian of `value(anchor, .)` at `x`.
    fn jacobian(&self, anchor: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64>;
    /// A point on the manifold, if the set knows how to draw one directly.
    fn sample(&self, _rng: &mut dyn RngCore) -> Option<DVector<f64>> {
        None
    }
}

/// Looks up a registered constraint set by name.
///
/// Known names: `unit-sphere` (params `[D]`), `symmetric` (params `[p]`),
/// `grassmann` (params `[p, r]`).
pub fn registry(name: &str, params: &[usize]) -> Result<Arc<dyn ConstraintSet>> {
    let need = |k: usize| -> Result<()> {
        if params.len() != k {
            return Err(Error::Config(format!(
                "constraint set `{name}` takes {k} integer parameter(s), got {}",
                params.len()
            )));
        }
        Ok(())
    };
    match name {
        "unit-sphere" => {
            need(1)?;
            if params[0] < 2 {
                return Err(Error::Config("unit-sphere needs D >= 2".into()));
            }
            Ok(Arc::new(UnitSphere { dim: params[0] }))
        }
        "symmetric" => {
            need(1)?;
            Ok(Arc::new(SymmetricEntries { p: params[0] }))
        }
        "grassmann" => {
            need(2)?;
            let (p, r) = (params[0], params[1]);
            if r == 0 || r >= p {
                return Err(Error::Config("grassmann constraints need 0 < r < p".into()));
            }
            Ok(Arc::new(ProjectorEquations { p, r }))
        }
        other => Err(Error::Unknown(other.to_string())),
    }
}

/// `q(x) = |x|^2 - 1`.
#[derive(Debug, Clone)]
pub struct UnitSphere {
    pub dim: usize,
}

impl ConstraintSet for UnitSphere {
    fn name(&self) -> String {
        "unit-sphere".into()
    }
    fn ambient_dim(&self) -> usize {
        self.dim
    }
    fn count(&self) -> usize {
        1
    }
    fn value(&self, _anchor: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x.norm_squared() - 1.0)
    }
    fn jacobian(&self, _anchor: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, x.len(), (x * 2.0).as_slice())
    }
    fn sample(&self, rng: &mut dyn RngCore) -> Option<DVector<f64>> {
        let g = DVector::from_fn(self.dim, |_, _| gauss(rng));
        Some(&g / g.norm())
    }
}

/// `q_ij(x) = X_ij - X_ji` for `i < j`, with `X` the column-major `p x p` reshaping.
#[derive(Debug, Clone)]
pub struct SymmetricEntries {
    pub p: usize,
}

impl SymmetricEntries {
    fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.p).flat_map(move |j| (0..j).map(move |i| (i, j)))
    }
}

impl ConstraintSet for SymmetricEntries {
    fn name(&self) -> String {
        "symmetric".into()
    }
    fn ambient_dim(&self) -> usize {
        self.p * self.p
    }
    fn count(&self) -> usize {
        self.p * (self.p - 1) / 2
    }
    fn value(&self, _anchor: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let p = self.p;
        DVector::from_iterator(self.count(), self.pairs().map(|(i, j)| x[i + j * p] - x[j + i * p]))
    }
    fn jacobian(&self, _anchor: &DVector<f64>, _x: &DVector<f64>) -> DMatrix<f64> {
        let p = self.p;
        let mut jac = DMatrix::zeros(self.count(), p * p);
        for (row, (i, j)) in self.pairs().enumerate() {
            jac[(row, i + j * p)] = 1.0;
            jac[(row, j + i * p)] = -1.0;
        }
        jac
    }
    fn sample(&self, rng: &mut dyn RngCore) -> Option<DVector<f64>> {
        let g = DMatrix::from_fn(self.p, self.p, |_, _| gauss(rng));
        Some(as_vector(&sym(&g)))
    }
}

/// Rank-`r` orthogonal projectors in `p x p`, described near an anchor `P0`
/// with eigenbasis `[U1 U2]` (top `r` eigenvectors first):
/// the skew part of `X` vanishes, and the upper triangles of the diagonal
/// blocks `U1'(X^2 - X)U1`, `U2'(X^2 - X)U2` vanish. This gives exactly
/// `p^2 - r(p - r)` independent equations near `P0`.
#[derive(Debug, Clone)]
pub struct ProjectorEquations {
    pub p: usize,
    pub r: usize,
}

impl ProjectorEquations {
    fn anchor_basis(&self, anchor: &DVector<f64>) -> DMatrix<f64> {
        sorted_eigen(&as_matrix(anchor, self.p, self.p)).1
    }

    fn block_entries(&self, f: &DMatrix<f64>, out: &mut Vec<f64>) {
        let (p, r) = (self.p, self.r);
        for j in 0..r {
            for i in 0..=j {
                out.push(f[(i, j)]);
            }
        }
        for j in r..p {
            for i in r..=j {
                out.push(f[(i, j)]);
            }
        }
    }
}

impl ConstraintSet for ProjectorEquations {
    fn name(&self) -> String {
        "grassmann".into()
    }
    fn ambient_dim(&self) -> usize {
        self.p * self.p
    }
    fn count(&self) -> usize {
        self.p * self.p - self.r * (self.p - self.r)
    }
    fn value(&self, anchor: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let p = self.p;
        let u = self.anchor_basis(anchor);
        let y = as_matrix(x, p, p);
        let mut out = Vec::with_capacity(self.count());
        for j in 0..p {
            for i in 0..j {
                out.push(y[(i, j)] - y[(j, i)]);
            }
        }
        let f = u.transpose() * (&y * &y - &y) * &u;
        self.block_entries(&f, &mut out);
        DVector::from_vec(out)
    }
    fn jacobian(&self, anchor: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        let p = self.p;
        let u = self.anchor_basis(anchor);
        let y = as_matrix(x, p, p);
        let dim = p * p;
        let mut jac = DMatrix::zeros(self.count(), dim);
        for k in 0..dim {
            let mut e = DMatrix::zeros(p, p);
            e[(k % p, k / p)] = 1.0;
            let mut col = Vec::with_capacity(self.count());
            for j in 0..p {
                for i in 0..j {
                    col.push(e[(i, j)] - e[(j, i)]);
                }
            }
            let f = u.transpose() * (&y * &e + &e * &y - &e) * &u;
            self.block_entries(&f, &mut col);
            jac.set_column(k, &DVector::from_vec(col));
        }
        jac
    }
    fn sample(&self, rng: &mut dyn RngCore) -> Option<DVector<f64>> {
        let g = DMatrix::from_fn(self.p, self.p, |_, _| gauss(rng));
        let (_, vecs) = sorted_eigen(&sym(&g));
        let u1 = vecs.columns(0, self.r);
        Some(as_vector(&(&u1 * u1.transpose())))
    }
}

fn gauss(rng: &mut dyn RngCore) -> f64 {
    StandardNormal.sample(rng)
}
