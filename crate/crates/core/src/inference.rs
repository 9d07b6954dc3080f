//! Posterior summaries: projected posterior mean, tangent pushforward,
//! Wald-type credible regions, functional intervals and a normal-limit check.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::linalg::{pinv_sym, quantile_type7, spd_sqrt, sym};
use crate::manifold::{ManifoldPoint, ManifoldSpec, TangentSpace};

/// Projection of the ambient sample mean; the closest draw seeds projections
/// that need a starting point.
pub fn project_posterior_mean(states: &[ManifoldPoint], m: &ManifoldSpec) -> Result<ManifoldPoint> {
    let first = states.first().ok_or(Error::EmptyData)?;
    let mut mean = DVector::zeros(first.dim());
    for s in states {
        mean += s.coords();
    }
    mean /= states.len() as f64;
    if states.iter().all(|s| s.coords() == first.coords()) {
        return Ok(first.clone());
    }
    let hint = states
        .iter()
        .min_by(|a, b| (a.coords() - &mean).norm().total_cmp(&(b.coords() - &mean).norm()))
        .expect("nonempty");
    m.project_near(&mean, Some(hint))
}

/// Draws mapped to tangent coordinates at the projected posterior mean.
#[derive(Clone, Debug)]
pub struct Pushforward {
    pub center: ManifoldPoint,
    pub space: TangentSpace,
    /// One row per draw.
    pub coords: DMatrix<f64>,
    pub mean: DVector<f64>,
    /// Sample covariance (divisor `N - 1`).
    pub covariance: DMatrix<f64>,
}

pub fn pushforward(states: &[ManifoldPoint], m: &ManifoldSpec) -> Result<Pushforward> {
    let center = project_posterior_mean(states, m)?;
    let space = m.tangent_space(&center)?;
    let d = space.dim();
    let n = states.len();
    let mut coords = DMatrix::zeros(n, d);
    for (k, s) in states.iter().enumerate() {
        let c = space.frame.tr_mul(&(s.coords() - center.coords()));
        coords.set_row(k, &c.transpose());
    }
    let mean = coords.row_mean().transpose();
    let mut covariance = DMatrix::zeros(d, d);
    if n > 1 {
        let mut centered = coords.clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        covariance = sym(&(centered.tr_mul(&centered) / (n - 1) as f64));
    }
    Ok(Pushforward { center, space, coords, mean, covariance })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Membership {
    Inside,
    Outside,
    /// Farther than the locality radius from the center.
    OutsideLocality,
}

/// Wald-type region `{theta near theta_hat_p : (theta - theta_hat_p)' Sigma_p^+ (theta - theta_hat_p) <= q_alpha}`.
#[derive(Clone, Debug)]
pub struct PosteriorSummary {
    pub theta_hat_p: ManifoldPoint,
    pub space: TangentSpace,
    pub sigma_p: DMatrix<f64>,
    pub sigma_pinv: DMatrix<f64>,
    pub rank: usize,
    pub q_alpha: f64,
    pub alpha: f64,
    pub locality_radius: f64,
}

impl PosteriorSummary {
    fn from_pushforward(pf: &Pushforward, m: &ManifoldSpec, alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("level must lie in (0, 1), got {alpha}")));
        }
        let (sigma_pinv, rank) = pinv_sym(&pf.covariance);
        let mut forms: Vec<f64> = pf
            .coords
            .row_iter()
            .map(|r| {
                let c = r.transpose();
                (c.transpose() * &sigma_pinv * &c)[0]
            })
            .collect();
        forms.sort_by(f64::total_cmp);
        let q_alpha = quantile_type7(&forms, 1.0 - alpha).max(0.0);
        Ok(Self {
            theta_hat_p: pf.center.clone(),
            space: pf.space.clone(),
            sigma_p: pf.covariance.clone(),
            sigma_pinv,
            rank,
            q_alpha,
            alpha,
            locality_radius: m.trust_radius(),
        })
    }

    pub fn is_degenerate(&self) -> bool {
        self.rank == 0
    }

    /// Quadratic form of an ambient point relative to the center.
    pub fn quadratic_form(&self, y: &DVector<f64>) -> f64 {
        let c = self.space.frame.tr_mul(&(y - self.theta_hat_p.coords()));
        (c.transpose() * &self.sigma_pinv * &c)[0]
    }

    pub fn membership(&self, y: &ManifoldPoint) -> Membership {
        let dist = (y.coords() - self.theta_hat_p.coords()).norm();
        if !(dist <= self.locality_radius) {
            return Membership::OutsideLocality;
        }
        if self.is_degenerate() {
            return if dist <= 1e-12 * (1.0 + self.theta_hat_p.coords().norm()) {
                Membership::Inside
            } else {
                Membership::Outside
            };
        }
        if self.quadratic_form(y.coords()) <= self.q_alpha {
            Membership::Inside
        } else {
            Membership::Outside
        }
    }

    pub fn contains(&self, y: &ManifoldPoint) -> bool {
        self.membership(y) == Membership::Inside
    }

    /// `Sigma_p` as an ambient bilinear form `V Sigma_p V'`.
    pub fn ambient_sigma(&self) -> DMatrix<f64> {
        &self.space.frame * &self.sigma_p * self.space.frame.transpose()
    }
}

pub fn credible_region(states: &[ManifoldPoint], m: &ManifoldSpec, alpha: f64) -> Result<PosteriorSummary> {
    let d = m.intrinsic_dim();
    if states.len() < d + 2 {
        return Err(Error::Config(format!("need at least {} draws for a region, got {}", d + 2, states.len())));
    }
    PosteriorSummary::from_pushforward(&pushforward(states, m)?, m, alpha)
}

/// Regions at several levels sharing one pushforward.
pub fn credible_regions(states: &[ManifoldPoint], m: &ManifoldSpec, alphas: &[f64]) -> Result<Vec<PosteriorSummary>> {
    let d = m.intrinsic_dim();
    if states.len() < d + 2 {
        return Err(Error::Config(format!("need at least {} draws for a region, got {}", d + 2, states.len())));
    }
    let pf = pushforward(states, m)?;
    alphas.iter().map(|&a| PosteriorSummary::from_pushforward(&pf, m, a)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FunctionalInterval {
    pub functional: String,
    pub lower: f64,
    pub upper: f64,
    pub alpha: f64,
}

impl FunctionalInterval {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }

    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

/// Equal-tailed interval `[q_{alpha/2}, q_{1-alpha/2}]` of the values.
pub fn equal_tailed(values: &[f64], alpha: f64) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::EmptyData);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Config(format!("level must lie in (0, 1), got {alpha}")));
    }
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("functional is not finite at draw {i}")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((quantile_type7(&sorted, alpha / 2.0), quantile_type7(&sorted, 1.0 - alpha / 2.0)))
}

pub fn credible_interval<F>(states: &[ManifoldPoint], name: &str, f: F, alpha: f64) -> Result<FunctionalInterval>
where
    F: Fn(&ManifoldPoint) -> f64,
{
    let values: Vec<f64> = states.iter().map(f).collect();
    let (lower, upper) = equal_tailed(&values, alpha)?;
    Ok(FunctionalInterval { functional: name.to_string(), lower, upper, alpha })
}

/// Normal-limit diagnostics of the tangent pushforward.
#[derive(Clone, Debug, Serialize)]
pub struct BvmReport {
    pub draws: usize,
    /// Norm of the pushforward mean (should be near zero).
    pub mean_norm: f64,
    /// `||n Sigma_p - S||_F / ||S||_F`.
    pub relative_gap: f64,
    pub mardia_skewness: f64,
    pub mardia_kurtosis: f64,
    pub skewness_p_value: f64,
    pub kurtosis_z: f64,
}

/// Compares `n * Sigma_p` to an ambient sandwich `S` (read in the tangent frame
/// at the projected mean) and screens the pushforward for normality.
pub fn bvm_check(states: &[ManifoldPoint], m: &ManifoldSpec, sandwich: &DMatrix<f64>, n: usize) -> Result<BvmReport> {
    let pf = pushforward(states, m)?;
    let dim = m.ambient_dim();
    if sandwich.nrows() != dim || sandwich.ncols() != dim {
        return Err(Error::Dimension { expected: dim, got: sandwich.nrows() });
    }
    let s = sym(&pf.space.frame.tr_mul(&(sandwich * &pf.space.frame)));
    let scaled = &pf.covariance * n as f64;
    let denom = s.norm();
    let relative_gap = if denom > 0.0 { (scaled - &s).norm() / denom } else { f64::NAN };
    let (b1, b2) = mardia(&pf);
    let d = pf.space.dim() as f64;
    let draws = states.len();
    let df = d * (d + 1.0) * (d + 2.0) / 6.0;
    let skew_stat = draws as f64 * b1 / 6.0;
    let skewness_p_value = if skew_stat.is_finite() && df > 0.0 {
        ChiSquared::new(df).map(|c| c.sf(skew_stat)).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    let kurtosis_z = (b2 - d * (d + 2.0)) / (8.0 * d * (d + 2.0) / draws as f64).sqrt();
    Ok(BvmReport {
        draws,
        mean_norm: pf.mean.norm(),
        relative_gap,
        mardia_skewness: b1,
        mardia_kurtosis: b2,
        skewness_p_value,
        kurtosis_z,
    })
}

/// Mardia's multivariate skewness and kurtosis; NaN for a singular covariance.
fn mardia(pf: &Pushforward) -> (f64, f64) {
    let n = pf.coords.nrows();
    let d = pf.coords.ncols();
    if n < 2 || d == 0 {
        return (f64::NAN, f64::NAN);
    }
    let cov = &pf.covariance * ((n - 1) as f64 / n as f64);
    let Some((_, inv_root)) = spd_sqrt(&cov) else {
        return (f64::NAN, f64::NAN);
    };
    let mut third = vec![0.0; d * d * d];
    let mut b2 = 0.0;
    for row in pf.coords.row_iter() {
        let z = &inv_root * (row.transpose() - &pf.mean);
        b2 += z.norm_squared().powi(2);
        for a in 0..d {
            for b in 0..d {
                let zab = z[a] * z[b];
                for c in 0..d {
                    third[(a * d + b) * d + c] += zab * z[c];
                }
            }
        }
    }
    let nf = n as f64;
    let b1 = third.iter().map(|t| (t / nf).powi(2)).sum();
    (b1, b2 / nf)
}

/// `alpha,q_alpha,theta_hat_p_1..D,sigma_p_1..D^2` with the covariance as an ambient form.
pub fn write_summary_csv<W: Write>(summaries: &[PosteriorSummary], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dim = summaries.first().map_or(0, |s| s.theta_hat_p.dim());
    let mut header = vec!["alpha".to_string(), "q_alpha".to_string()];
    header.extend((1..=dim).map(|j| format!("theta_hat_p_{j}")));
    header.extend((1..=dim * dim).map(|j| format!("sigma_p_{j}")));
    w.write_record(&header)?;
    for s in summaries {
        let mut row = vec![format!("{}", s.alpha), format!("{:.16e}", s.q_alpha)];
        row.extend(s.theta_hat_p.coords().iter().map(|v| format!("{v:.16e}")));
        row.extend(s.ambient_sigma().iter().map(|v| format!("{v:.16e}")));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `functional,alpha,lower,upper`.
pub fn write_interval_csv<W: Write>(intervals: &[FunctionalInterval], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["functional", "alpha", "lower", "upper"])?;
    for i in intervals {
        w.write_record([i.functional.clone(), format!("{}", i.alpha), format!("{:.16e}", i.lower), format!("{:.16e}", i.upper)])?;
    }
    w.flush()?;
    Ok(())
}
