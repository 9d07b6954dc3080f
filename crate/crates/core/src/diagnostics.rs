//! Effective sample size and Gelman-Rubin potential scale reduction factors.

use std::io::Write;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, FisherSnedecor};

use crate::error::{Error, Result};

/// PSRF level used for the iterations-to-convergence count.
pub const PSRF_THRESHOLD: f64 = 1.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EssEstimate {
    pub value: f64,
    /// The series was constant; `value` is then the length by convention.
    pub constant: bool,
}

/// Autocovariances at lags `0..len` (divisor `len`), via zero-padded FFT.
pub fn autocovariance(series: &[f64]) -> Vec<f64> {
    let n = series.len();
    if n == 0 {
        return Vec::new();
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let size = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = series.iter().map(|x| Complex::new(x - mean, 0.0)).collect();
    buf.resize(size, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(size).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(size).process(&mut buf);
    buf.iter().take(n).map(|c| c.re / (size as f64 * n as f64)).collect()
}

/// `K / (1 + 2 sum rho_t)` with Geyer's initial monotone positive sequence, clipped to `(0, K]`.
pub fn ess(series: &[f64]) -> Result<EssEstimate> {
    let k = series.len();
    if k < 4 {
        return Err(Error::Config(format!("effective sample size needs at least 4 draws, got {k}")));
    }
    if let Some(i) = series.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("series is not finite at index {i}")));
    }
    let acov = autocovariance(series);
    let scale = series.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    if acov[0] <= (1e-14 * scale).powi(2) {
        return Ok(EssEstimate { value: k as f64, constant: true });
    }
    let rho: Vec<f64> = acov.iter().map(|c| c / acov[0]).collect();
    let mut tau = -1.0;
    let mut prev = f64::INFINITY;
    let mut t = 0;
    while t + 1 < k {
        let mut pair = rho[t] + rho[t + 1];
        if pair <= 0.0 {
            break;
        }
        if pair > prev {
            pair = prev;
        }
        tau += 2.0 * pair;
        prev = pair;
        t += 2;
    }
    let value = (k as f64 / tau.max(f64::MIN_POSITIVE)).clamp(f64::MIN_POSITIVE, k as f64);
    Ok(EssEstimate { value, constant: false })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Psrf {
    pub median: f64,
    /// 97.5% upper estimate.
    pub upper: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = if x.len() > 1 { x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, v)
}

fn covariance(x: &[f64], y: &[f64]) -> f64 {
    let (mx, _) = mean_var(x);
    let (my, _) = mean_var(y);
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Potential scale reduction; a single chain is split into halves.
pub fn psrf(chains: &[&[f64]]) -> Result<Psrf> {
    let split: Vec<&[f64]>;
    let chains = if chains.len() == 1 {
        let c = chains[0];
        let half = c.len() / 2;
        split = vec![&c[..half], &c[c.len() - half..]];
        &split[..]
    } else {
        chains
    };
    let m = chains.len();
    if m == 0 {
        return Err(Error::EmptyData);
    }
    let len = chains[0].len();
    if len < 4 || chains.iter().any(|c| c.len() != len) {
        return Err(Error::Config("chains must have equal lengths of at least 4".into()));
    }
    let stats: Vec<(f64, f64)> = chains.iter().map(|c| mean_var(c)).collect();
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let vars: Vec<f64> = stats.iter().map(|s| s.1).collect();
    let (grand, var_means) = mean_var(&means);
    let lf = len as f64;
    let mf = m as f64;
    let b = lf * var_means;
    let w = vars.iter().sum::<f64>() / mf;
    let floor = ((lf - 1.0) / lf).sqrt();
    if w <= 0.0 {
        let v = if b > 0.0 { f64::INFINITY } else { floor };
        return Ok(Psrf { median: v, upper: v });
    }
    let v_hat = (lf - 1.0) / lf * w + (1.0 + 1.0 / mf) * b / lf;
    let (_, var_s2) = mean_var(&vars);
    let means_sq: Vec<f64> = means.iter().map(|x| x * x).collect();
    let cov_terms = if m > 1 { covariance(&vars, &means_sq) - 2.0 * grand * covariance(&vars, &means) } else { 0.0 };
    let var_v = ((lf - 1.0) / lf).powi(2) / mf * var_s2
        + ((mf + 1.0) / (mf * lf)).powi(2) * 2.0 / (mf - 1.0) * b * b
        + 2.0 * (mf + 1.0) * (lf - 1.0) / (mf * lf * lf) * lf / mf * cov_terms;
    let df = if var_v > 0.0 { 2.0 * v_hat * v_hat / var_v } else { f64::INFINITY };
    let adj = if df.is_finite() { (df + 3.0) / (df + 1.0) } else { 1.0 };
    let median = (adj * v_hat / w).sqrt();
    let w_df = if var_s2 > 0.0 { 2.0 * w * w / (var_s2 / mf) } else { 1e12 };
    let f_q = FisherSnedecor::new(mf - 1.0, w_df.min(1e12))
        .map(|f| f.inverse_cdf(0.975))
        .unwrap_or(f64::NAN);
    let upper = (((lf - 1.0) / lf + (mf + 1.0) / (mf * lf) * f_q * b / w) * adj).sqrt();
    Ok(Psrf { median, upper: upper.max(median) })
}

/// Smallest prefix length (on a grid of stride `K/100`) after which the
/// median PSRF stays below `threshold` for every longer prefix.
pub fn iterations_to_threshold(chains: &[&[f64]], threshold: f64) -> Result<Option<usize>> {
    let len = chains.first().map_or(0, |c| c.len());
    if chains.iter().any(|c| c.len() != len) {
        return Err(Error::Config("chains must have equal lengths".into()));
    }
    let min_len = if chains.len() == 1 { 8 } else { 4 };
    let stride = (len / 100).max(1);
    let mut grid: Vec<usize> = (1..).map(|i| i * stride).take_while(|&l| l <= len).filter(|&l| l >= min_len).collect();
    if grid.last() != Some(&len) && len >= min_len {
        grid.push(len);
    }
    let mut answer = None;
    for &l in grid.iter().rev() {
        let prefixes: Vec<&[f64]> = chains.iter().map(|c| &c[..l]).collect();
        if psrf(&prefixes)?.median < threshold {
            answer = Some(l);
        } else {
            break;
        }
    }
    Ok(answer)
}

/// Per-coordinate summary over one or more chains.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoordinateDiagnostics {
    pub coordinate: usize,
    /// Mean over chains of the per-chain effective sample size.
    pub ess: f64,
    pub psrf_median: f64,
    pub psrf_q975: f64,
    pub iters_to_threshold: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub coordinates: Vec<CoordinateDiagnostics>,
}

impl DiagnosticsReport {
    /// `chains[c][j]` is the series of coordinate `j` in chain `c`.
    pub fn from_series(chains: &[Vec<Vec<f64>>]) -> Result<Self> {
        let first = chains.first().ok_or(Error::EmptyData)?;
        let dim = first.len();
        if chains.iter().any(|c| c.len() != dim) {
            return Err(Error::Config("chains disagree on dimension".into()));
        }
        let mut coordinates = Vec::with_capacity(dim);
        for j in 0..dim {
            let series: Vec<&[f64]> = chains.iter().map(|c| c[j].as_slice()).collect();
            let ess_mean = series.iter().map(|s| ess(s).map(|e| e.value)).sum::<Result<f64>>()? / series.len() as f64;
            let p = psrf(&series)?;
            coordinates.push(CoordinateDiagnostics {
                coordinate: j + 1,
                ess: ess_mean,
                psrf_median: p.median,
                psrf_q975: p.upper,
                iters_to_threshold: iterations_to_threshold(&series, PSRF_THRESHOLD)?,
            });
        }
        Ok(Self { coordinates })
    }

    /// `coordinate,ess,psrf_median,psrf_q975,iters_to_1.01`; an unreached threshold is written as `NA`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["coordinate", "ess", "psrf_median", "psrf_q975", "iters_to_1.01"])?;
        for c in &self.coordinates {
            w.write_record([
                c.coordinate.to_string(),
                format!("{:.16e}", c.ess),
                format!("{:.16e}", c.psrf_median),
                format!("{:.16e}", c.psrf_q975),
                c.iters_to_threshold.map_or("NA".to_string(), |v| v.to_string()),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
