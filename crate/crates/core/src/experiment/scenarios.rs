use std::fmt;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::erm::{erm_oracle, ErmOptions};
use crate::error::{Error, Result};
use crate::linalg::{as_matrix, as_vector, sorted_eigen};
use crate::losses::{LossKind, LossModel, Observation, QuantileLevels};
use crate::manifold::{ManifoldPoint, ManifoldSpec};

/// Sample size used to approximate population minimizers without a closed form.
pub const ORACLE_N: usize = 500_000;
const TRUTH_SEED: u64 = 0x7275_7468;

const SPHERE_MEAN: [f64; 3] = [1.0, 2.0, 3.0];
// Symmetric part of the stated (non-symmetric) covariance.
const SPHERE_COV: [f64; 9] = [1.0, 0.45, 0.55, 0.45, 2.0, 0.85, 0.55, 0.85, 3.0];
const SO2_ANGLE_MEAN: f64 = std::f64::consts::FRAC_PI_4;
const SO2_ANGLE_SD: f64 = 0.5;
const BW_NOISE_SD: f64 = 0.3;
const PCA_COV: [f64; 9] = [1.0, 0.15, 0.1, 0.15, 1.2, 0.1, 0.1, 0.1, 0.3];
const QUANTILE_BETA: [f64; 3] = [1.0, 2.0, 3.0];
const QUANTILE_LEVELS: [f64; 2] = [0.2, 0.5];
/// Standard normal 0.2-quantile.
pub const NORMAL_Q20: f64 = -0.8416212335729143;
const PARKING_LEVELS: [f64; 3] = [0.4, 0.5, 0.6];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Scenario {
    SphereExtrinsic,
    SphereFrechet,
    So2Extrinsic,
    So2Frechet,
    BwBarycenter,
    SpectralProjector,
    Quantile,
    SyntheticParking,
}

/// Real-valued summary of a parameter, with a credible interval in the harness.
#[derive(Clone, Copy)]
pub struct Functional {
    pub name: &'static str,
    pub eval: fn(&DVector<f64>) -> f64,
}

impl fmt::Debug for Functional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name)
    }
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::SphereExtrinsic,
        Scenario::SphereFrechet,
        Scenario::So2Extrinsic,
        Scenario::So2Frechet,
        Scenario::BwBarycenter,
        Scenario::SpectralProjector,
        Scenario::Quantile,
        Scenario::SyntheticParking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::SphereExtrinsic => "sphere-extrinsic",
            Scenario::SphereFrechet => "sphere-frechet",
            Scenario::So2Extrinsic => "so2-extrinsic",
            Scenario::So2Frechet => "so2-frechet",
            Scenario::BwBarycenter => "bw-barycenter",
            Scenario::SpectralProjector => "spectral-projector",
            Scenario::Quantile => "quantile",
            Scenario::SyntheticParking => "synthetic-parking",
        }
    }

    fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).expect("registered")
    }

    pub fn manifold(self) -> ManifoldSpec {
        let built = match self {
            Scenario::SphereExtrinsic | Scenario::SphereFrechet => ManifoldSpec::sphere(3),
            Scenario::So2Extrinsic | Scenario::So2Frechet => ManifoldSpec::special_orthogonal(2),
            Scenario::BwBarycenter => ManifoldSpec::symmetric(2),
            Scenario::SpectralProjector => ManifoldSpec::grassmann(3, 2),
            Scenario::Quantile => ManifoldSpec::fixed_rank(3, 2, 1),
            Scenario::SyntheticParking => {
                ManifoldSpec::fixed_rank(2, 3, 2).and_then(|b| Ok(ManifoldSpec::product(ManifoldSpec::ambient(3)?, b)))
            }
        };
        built.expect("scenario manifolds are valid")
    }

    fn loss_kind(self) -> LossKind {
        match self {
            Scenario::SphereExtrinsic | Scenario::So2Extrinsic => LossKind::ExtrinsicMean,
            Scenario::SphereFrechet => LossKind::FrechetSphere,
            Scenario::So2Frechet => LossKind::FrechetSo2,
            Scenario::BwBarycenter => LossKind::BwBarycenter,
            Scenario::SpectralProjector => LossKind::SpectralProjector,
            Scenario::Quantile => LossKind::MultiQuantile(QuantileLevels {
                levels: QUANTILE_LEVELS.to_vec(),
                covariate_dim: 3,
                intercept: false,
            }),
            Scenario::SyntheticParking => LossKind::MultiQuantile(QuantileLevels {
                levels: PARKING_LEVELS.to_vec(),
                covariate_dim: 2,
                intercept: true,
            }),
        }
    }

    pub fn loss(self) -> LossModel {
        LossModel::new(self.loss_kind(), self.manifold()).expect("scenario loss matches its manifold")
    }

    /// Same loss on the unconstrained ambient space (the Bayesian EL baseline).
    pub fn ambient_loss(self) -> LossModel {
        let dim = self.manifold().ambient_dim();
        LossModel::new(self.loss_kind(), ManifoldSpec::ambient(dim).expect("positive dimension"))
            .expect("every loss accepts an ambient parameter")
    }

    /// Learning rate for the Gibbs posterior comparison.
    pub fn cg_beta(self) -> f64 {
        match self {
            Scenario::BwBarycenter => 25.0,
            Scenario::SpectralProjector => 0.95,
            Scenario::Quantile => 0.5,
            _ => 1.0,
        }
    }

    pub fn functionals(self) -> Vec<Functional> {
        match self {
            Scenario::SphereExtrinsic | Scenario::SphereFrechet => vec![
                Functional { name: "theta1", eval: |t| t[0] },
                Functional { name: "theta2", eval: |t| t[1] },
                Functional { name: "theta3", eval: |t| t[2] },
            ],
            Scenario::So2Extrinsic | Scenario::So2Frechet => {
                vec![Functional { name: "angle", eval: |t| t[1].atan2(t[0]) }]
            }
            Scenario::BwBarycenter => vec![
                Functional { name: "trace", eval: |t| t[0] + t[3] },
                Functional { name: "max-eigenvalue", eval: |t| sorted_eigen(&as_matrix(t, 2, 2)).0[0] },
            ],
            Scenario::SpectralProjector => vec![
                Functional { name: "theta11", eval: |t| t[0] },
                Functional { name: "theta22", eval: |t| t[4] },
                Functional { name: "theta33", eval: |t| t[8] },
            ],
            Scenario::Quantile => vec![Functional { name: "frobenius", eval: |t| t.norm() }],
            Scenario::SyntheticParking => vec![
                Functional { name: "q40-mid", eval: |t| parking_fit(t, 0, 0.5) },
                Functional { name: "q50-mid", eval: |t| parking_fit(t, 1, 0.5) },
                Functional { name: "q60-mid", eval: |t| parking_fit(t, 2, 0.5) },
            ],
        }
    }

    /// Draws `n` observations from the scenario's generative law.
    pub fn sample<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Vec<Observation> {
        match self {
            Scenario::SphereExtrinsic | Scenario::SphereFrechet => {
                raw_sphere_draws(n, rng).into_iter().map(|x| Observation::Point(&x / x.norm())).collect()
            }
            Scenario::So2Extrinsic | Scenario::So2Frechet => (0..n)
                .map(|_| {
                    let a = SO2_ANGLE_MEAN + SO2_ANGLE_SD * gauss(rng);
                    Observation::point(&rotation(a))
                })
                .collect(),
            Scenario::BwBarycenter => (0..n)
                .map(|_| {
                    let a = BW_NOISE_SD * gauss(rng);
                    let e = BW_NOISE_SD * gauss(rng);
                    let r = DMatrix::from_column_slice(2, 2, &rotation(a));
                    let d = DMatrix::from_diagonal(&DVector::from_vec(vec![(1.0 + e).abs(), (2.0 + e).abs()]));
                    Observation::Point(as_vector(&(&r * d * r.transpose())))
                })
                .collect(),
            Scenario::SpectralProjector => {
                let chol = cholesky3(&PCA_COV);
                (0..n)
                    .map(|_| {
                        let x = if rng.gen::<f64>() < 0.5 {
                            let z = DVector::from_fn(3, |_, _| gauss(rng));
                            &chol * z
                        } else {
                            DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0))
                        };
                        Observation::Point(x)
                    })
                    .collect()
            }
            Scenario::Quantile => (0..n)
                .map(|_| {
                    let x = DVector::from_fn(3, |_, _| rng.gen::<f64>());
                    let e = gauss(rng);
                    let y = x.dot(&DVector::from_column_slice(&QUANTILE_BETA)) * (1.0 + e);
                    Observation::Labeled { covariates: x, response: y }
                })
                .collect(),
            Scenario::SyntheticParking => (0..n)
                .map(|_| {
                    let t = rng.gen::<f64>();
                    let e = gauss(rng);
                    let y = 0.3 + 0.4 * (std::f64::consts::PI * t).sin() + (0.05 + 0.1 * t) * e;
                    Observation::labeled(&parking_basis(t), y)
                })
                .collect(),
        }
    }

    /// Population minimizer, from a closed form where one exists and otherwise
    /// from the ERM over `ORACLE_N` draws. Computed once per process.
    pub fn truth(self) -> Result<ManifoldPoint> {
        static CACHE: [OnceLock<std::result::Result<ManifoldPoint, String>>; 8] = [const { OnceLock::new() }; 8];
        CACHE[self.index()]
            .get_or_init(|| self.compute_truth().map_err(|e| e.to_string()))
            .clone()
            .map_err(Error::Numerical)
    }

    fn compute_truth(self) -> Result<ManifoldPoint> {
        match self {
            Scenario::So2Extrinsic | Scenario::So2Frechet => {
                // Angles are symmetric about their mean, so both means sit at that rotation.
                Ok(ManifoldPoint::from_slice(&rotation(SO2_ANGLE_MEAN)))
            }
            Scenario::SpectralProjector => {
                let s = (DMatrix::from_column_slice(3, 3, &PCA_COV) + DMatrix::identity(3, 3) / 3.0) * 0.5;
                let (_, vecs) = sorted_eigen(&s);
                let u = vecs.columns(0, 2).into_owned();
                Ok(ManifoldPoint::new(as_vector(&(&u * u.transpose()))))
            }
            Scenario::Quantile => {
                let b: Vec<f64> = QUANTILE_BETA
                    .iter()
                    .map(|b| (1.0 + NORMAL_Q20) * b)
                    .chain(QUANTILE_BETA.iter().copied())
                    .collect();
                Ok(ManifoldPoint::from_slice(&b))
            }
            _ => {
                let mut rng = ChaCha8Rng::seed_from_u64(TRUTH_SEED ^ self.index() as u64);
                let data = self.sample(ORACLE_N, &mut rng);
                Ok(erm_oracle(&self.loss(), &data, &ErmOptions::default())?.point)
            }
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL.iter().copied().find(|c| c.name() == s).ok_or_else(|| Error::Unknown(s.to_string()))
    }
}

/// One simulated data set with the scenario's population target.
#[derive(Clone, Debug)]
pub struct ScenarioDataset {
    pub name: String,
    pub observations: Vec<Observation>,
    pub truth: ManifoldPoint,
    pub seed: u64,
}

pub fn generate_scenario(name: &str, n: usize, seed: u64) -> Result<ScenarioDataset> {
    let scenario: Scenario = name.parse()?;
    if n == 0 {
        return Err(Error::EmptyData);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let observations = scenario.sample(n, &mut rng);
    Ok(ScenarioDataset { name: scenario.name().to_string(), observations, truth: scenario.truth()?, seed })
}

/// Unnormalized Gaussian draws behind the sphere scenarios.
pub fn raw_sphere_draws<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<DVector<f64>> {
    let chol = cholesky3(&SPHERE_COV);
    let mu = DVector::from_column_slice(&SPHERE_MEAN);
    (0..n)
        .map(|_| {
            let z = DVector::from_fn(3, |_, _| gauss(rng));
            &mu + &chol * z
        })
        .collect()
}

/// Column-major entries of the plane rotation by `a`.
pub fn rotation(a: f64) -> [f64; 4] {
    let (s, c) = a.sin_cos();
    [c, s, -s, c]
}

fn parking_basis(t: f64) -> [f64; 2] {
    [2.0 * t * (1.0 - t), t * t]
}

// Fitted level-k quantile at time t; layout is [intercepts(3), vec(B) with B 2x3].
fn parking_fit(theta: &DVector<f64>, k: usize, t: f64) -> f64 {
    let b = parking_basis(t);
    theta[k] + b[0] * theta[3 + 2 * k] + b[1] * theta[4 + 2 * k]
}

fn cholesky3(cov: &[f64; 9]) -> DMatrix<f64> {
    DMatrix::from_column_slice(3, 3, cov).cholesky().expect("scenario covariance is positive definite").l()
}

fn gauss<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}
