//! JSON run configuration for a single posterior sampling run.
//!
//! ```json
//! {
//!   "manifold": {"kind": "sphere", "params": {"dim": 3}},
//!   "loss": {"kind": "extrinsic-mean"},
//!   "posterior": {"kind": "rpetel", "alpha_rule": "2log", "prior": {"kind": "uniform"}},
//!   "sampler": {"algorithm": "rrwm", "h": null, "zeta": 0.0, "precond": "pilot-covariance"},
//!   "chain": {"K": 2000, "burnin": 500},
//!   "data": {"scenario": "sphere-extrinsic", "n": 500, "seed": 1}
//! }
//! ```

use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DVector;
use serde::Deserialize;
use serde_json::Value;

use super::erm::{erm_oracle, initial_guess, ErmOptions};
use super::pipeline::{sample_posterior, ChainPlan, PosteriorRun};
use super::scenarios::Scenario;
use crate::error::{Error, Result};
use crate::etel::{AlphaRule, LogTarget, PosteriorKind, Prior};
use crate::losses::{LossKind, LossModel, Observation, QuantileLevels};
use crate::manifold::ManifoldSpec;
use crate::samplers::{Algorithm, PrecondMethod};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifold: ManifoldConfig,
    pub loss: LossConfig,
    pub posterior: PosteriorConfig,
    pub sampler: SamplerSection,
    pub chain: ChainSection,
    pub data: DataSection,
    /// Starting point in ambient coordinates; defaults to the ERM.
    #[serde(default)]
    pub init: Option<Vec<f64>>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldConfig {
    pub kind: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub kind: String,
    #[serde(default)]
    pub params: Value,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorConfig {
    pub kind: String,
    #[serde(default)]
    pub alpha_rule: Option<AlphaRule>,
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default)]
    pub prior: PriorConfig,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    #[serde(default)]
    pub kind: Option<String>,
    #[serde(default)]
    pub mean: Option<Vec<f64>>,
    #[serde(default)]
    pub scale: Option<f64>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub algorithm: Algorithm,
    /// Unscaled step; the proposal uses `h / n`.
    #[serde(default)]
    pub h: Option<f64>,
    /// Lazy holding probability.
    #[serde(default)]
    pub zeta: f64,
    #[serde(default = "default_precond")]
    pub precond: PrecondMethod,
}

fn default_precond() -> PrecondMethod {
    PrecondMethod::PilotCovariance
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChainSection {
    /// Draws kept after burn-in.
    #[serde(rename = "K")]
    pub draws: usize,
    pub burnin: usize,
    #[serde(default)]
    pub pilot: Option<usize>,
}

/// Either a CSV file of observations or a simulated scenario.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub csv: Option<PathBuf>,
    #[serde(default)]
    pub scenario: Option<String>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn build_manifold(&self) -> Result<ManifoldSpec> {
        build_manifold(&self.manifold.kind, &self.manifold.params)
    }

    pub fn build_loss(&self) -> Result<LossModel> {
        let m = self.build_manifold()?;
        let p = &self.loss.params;
        let kind = match self.loss.kind.as_str() {
            "extrinsic-mean" => LossKind::ExtrinsicMean,
            "frechet-sphere" => LossKind::FrechetSphere,
            "frechet-so2" => LossKind::FrechetSo2,
            "bw-barycenter" => LossKind::BwBarycenter,
            "spectral-projector" => LossKind::SpectralProjector,
            "multi-quantile" => LossKind::MultiQuantile(QuantileLevels::deserialize(p)?),
            other => return Err(Error::Unknown(other.to_string())),
        };
        LossModel::new(kind, m)
    }

    pub fn posterior_kind(&self) -> Result<PosteriorKind> {
        match self.posterior.kind.as_str() {
            "rpetel" => Ok(PosteriorKind::Rpetel { alpha: self.posterior.alpha_rule.unwrap_or_default() }),
            "gibbs" => {
                let beta = self.posterior.beta.ok_or_else(|| Error::Config("gibbs posterior needs `beta`".into()))?;
                Ok(PosteriorKind::Gibbs { beta })
            }
            other => Err(Error::Unknown(other.to_string())),
        }
    }

    pub fn prior(&self) -> Result<Prior> {
        let p = &self.posterior.prior;
        match p.kind.as_deref().unwrap_or("uniform") {
            "uniform" => Ok(Prior::Uniform),
            "gaussian" => {
                let mean = p.mean.clone().ok_or_else(|| Error::Config("gaussian prior needs `mean`".into()))?;
                let scale = p.scale.ok_or_else(|| Error::Config("gaussian prior needs `scale`".into()))?;
                Ok(Prior::Gaussian { mean: DVector::from_vec(mean), scale })
            }
            other => Err(Error::Unknown(other.to_string())),
        }
    }

    pub fn chain_plan(&self) -> ChainPlan {
        let defaults = ChainPlan::default();
        ChainPlan {
            algorithm: self.sampler.algorithm,
            step: self.sampler.h,
            lazy: self.sampler.zeta,
            precond: self.sampler.precond,
            draws: self.chain.draws,
            burnin: self.chain.burnin,
            pilot: self.chain.pilot.unwrap_or(defaults.pilot),
        }
    }

    /// Observations from the CSV file (relative to `base`) or the named scenario.
    pub fn load_data(&self, base: &Path, loss: &LossModel) -> Result<Vec<Observation>> {
        match (&self.data.csv, &self.data.scenario) {
            (Some(path), None) => {
                let full = if path.is_absolute() { path.clone() } else { base.join(path) };
                read_observations(std::fs::File::open(full)?, loss)
            }
            (None, Some(name)) => {
                let scenario: Scenario = name.parse()?;
                let n = self.data.n.ok_or_else(|| Error::Config("scenario data needs `n`".into()))?;
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(self.data.seed.unwrap_or(0));
                Ok(scenario.sample(n, &mut rng))
            }
            _ => Err(Error::Config("data needs exactly one of `csv` or `scenario`".into())),
        }
    }
}

fn param(p: &Value, key: &str) -> Result<usize> {
    p.get(key)
        .and_then(Value::as_u64)
        .map(|v| v as usize)
        .ok_or_else(|| Error::Config(format!("manifold parameter `{key}` is missing or not a count")))
}

/// Manifold from a kind string and its parameters; products nest `first` and `second`.
pub fn build_manifold(kind: &str, p: &Value) -> Result<ManifoldSpec> {
    match kind {
        "sphere" => ManifoldSpec::sphere(param(p, "dim")?),
        "special-orthogonal" | "so" => ManifoldSpec::special_orthogonal(param(p, "p")?),
        "symmetric" => ManifoldSpec::symmetric(param(p, "p")?),
        "grassmann" => ManifoldSpec::grassmann(param(p, "p")?, param(p, "r")?),
        "fixed-rank" => ManifoldSpec::fixed_rank(param(p, "rows")?, param(p, "cols")?, param(p, "rank")?),
        "ambient" => ManifoldSpec::ambient(param(p, "dim")?),
        "solution" => {
            let name = p
                .get("constraint")
                .and_then(Value::as_str)
                .ok_or_else(|| Error::Config("solution manifold needs `constraint`".into()))?;
            let params: Vec<usize> = match p.get("params") {
                Some(v) => serde_json::from_value(v.clone())?,
                None => Vec::new(),
            };
            ManifoldSpec::solution_named(name, &params)
        }
        "product" => {
            let part = |key: &str| -> Result<ManifoldSpec> {
                let v = p.get(key).ok_or_else(|| Error::Config(format!("product manifold needs `{key}`")))?;
                let c: ManifoldConfig = serde_json::from_value(v.clone())?;
                build_manifold(&c.kind, &c.params)
            };
            Ok(ManifoldSpec::product(part("first")?, part("second")?))
        }
        other => Err(Error::Unknown(other.to_string())),
    }
}

/// Headerless or headed numeric CSV; for the check loss each row is the
/// covariates followed by the response.
pub fn read_observations<R: std::io::Read>(input: R, loss: &LossModel) -> Result<Vec<Observation>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        let row = match parsed {
            Ok(r) => r,
            Err(_) if i == 0 => continue,
            Err(e) => return Err(Error::Config(format!("row {}: {e}", i + 1))),
        };
        let obs = match loss.kind() {
            LossKind::MultiQuantile(_) => {
                let (y, x) = row.split_last().ok_or_else(|| Error::Config(format!("row {} is empty", i + 1)))?;
                Observation::labeled(x, *y)
            }
            _ => Observation::point(&row),
        };
        loss.check_observation(&obs)?;
        out.push(obs);
    }
    if out.is_empty() {
        return Err(Error::EmptyData);
    }
    Ok(out)
}

/// Loads the data, starts at `init` or the ERM, and samples the posterior.
pub fn run_sampling(cfg: &RunConfig, base: &Path, seed: u64) -> Result<PosteriorRun> {
    let loss = cfg.build_loss()?;
    let data = cfg.load_data(base, &loss)?;
    let target = LogTarget::new(loss.clone(), Arc::new(data), cfg.prior()?, cfg.posterior_kind()?)?;
    let m = loss.manifold();
    let start = match &cfg.init {
        Some(x) => m.point(DVector::from_vec(x.clone()))?,
        None => match erm_oracle(&loss, target.data(), &ErmOptions { seed, ..ErmOptions::default() }) {
            Ok(r) => r.point,
            Err(_) => initial_guess(&loss, target.data())?,
        },
    };
    let plan = cfg.chain_plan();
    if !(0.0..1.0).contains(&plan.lazy) {
        return Err(Error::Config("zeta must lie in [0, 1)".into()));
    }
    sample_posterior(&target, &start, &plan, seed)
}
