//! Point and distributional evaluation metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mdn_nll, mixture_pdf, MixtureOutput, Predictions};

/// Number of points on the portfolio density grid.
pub const DENSITY_GRID_POINTS: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub r2: f64,
    pub mae: f64,
    /// Mean mixture NLL; absent for point-prediction models.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nll: Option<f64>,
    pub n_eval: usize,
}

fn check_pair(y: &[f64], yhat: &[f64]) -> Result<()> {
    if y.len() != yhat.len() {
        return Err(Error::UndefinedMetric(format!(
            "length mismatch: {} targets, {} predictions",
            y.len(),
            yhat.len()
        )));
    }
    Ok(())
}

/// `1 − SS_res / SS_tot` around the evaluation-set mean.
pub fn r2(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    if y.len() < 2 {
        return Err(Error::UndefinedMetric("R² needs at least two observations".into()));
    }
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot <= 0.0 {
        return Err(Error::UndefinedMetric("R² undefined for constant targets".into()));
    }
    let ss_res: f64 = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64> {
    check_pair(y, yhat)?;
    if y.is_empty() {
        return Err(Error::UndefinedMetric("MAE of an empty set".into()));
    }
    Ok(y.iter().zip(yhat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

pub fn mean_nll(outputs: &[MixtureOutput], y: &[f64]) -> Result<f64> {
    if outputs.len() != y.len() || y.is_empty() {
        return Err(Error::UndefinedMetric("NLL needs one mixture per target".into()));
    }
    Ok(outputs.iter().zip(y).map(|(o, &r)| mdn_nll(o, r)).sum::<f64>() / y.len() as f64)
}

pub fn evaluate(pred: &Predictions, y: &[f64]) -> Result<MetricRecord> {
    let nll = match &pred.mixtures {
        Some(m) => Some(mean_nll(m, y)?),
        None => None,
    };
    if let Some(v) = nll {
        if !v.is_finite() {
            return Err(Error::UndefinedMetric(format!("non-finite NLL {v}")));
        }
    }
    Ok(MetricRecord {
        r2: r2(y, &pred.mean)?,
        mae: mae(y, &pred.mean)?,
        nll,
        n_eval: y.len(),
    })
}

/// Average of per-loan mixture densities on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioDensity {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub m: usize,
}

/// `DENSITY_GRID_POINTS` equally spaced points over `[0, upper]`.
pub fn density_grid(upper: f64) -> Vec<f64> {
    let n = DENSITY_GRID_POINTS;
    (0..n).map(|i| upper * i as f64 / (n - 1) as f64).collect()
}

pub fn portfolio_density(outputs: &[MixtureOutput], grid: &[f64]) -> Result<PortfolioDensity> {
    if grid.is_empty() {
        return Err(Error::Config("density grid is empty".into()));
    }
    if outputs.is_empty() {
        return Err(Error::Config("portfolio density needs at least one loan".into()));
    }
    let m = outputs.len() as f64;
    let density = grid
        .iter()
        .map(|&r| outputs.iter().map(|o| mixture_pdf(o, r)).sum::<f64>() / m)
        .collect();
    Ok(PortfolioDensity {
        grid: grid.to_vec(),
        density,
        m: outputs.len(),
    })
}

impl PortfolioDensity {
    /// Trapezoid mass over the grid.
    pub fn mass(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(g, d)| 0.5 * (g[1] - g[0]) * (d[0] + d[1]))
            .sum()
    }

    /// Two-column `r,density` text table.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("r,density\n");
        for (r, d) in self.grid.iter().zip(&self.density) {
            out.push_str(&format!("{r},{d}\n"));
        }
        out
    }
}

/// Interior grid maxima above both neighbours and above 10% of the global maximum.
pub fn count_modes(density: &[f64]) -> usize {
    let max = density.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    density
        .windows(3)
        .filter(|w| w[1] > w[0] && w[1] > w[2] && w[1] > 0.1 * max)
        .count()
}

/// Equal-width histogram normalised to a density over `[lo, hi]`.
pub fn empirical_density(values: &[f64], bins: usize, lo: f64, hi: f64) -> (Vec<f64>, Vec<f64>) {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0.0; bins];
    for &v in values {
        let b = (((v - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
        counts[b] += 1.0;
    }
    let n = values.len().max(1) as f64;
    let centers = (0..bins).map(|b| lo + (b as f64 + 0.5) * width).collect();
    (centers, counts.into_iter().map(|c| c / (n * width)).collect())
}
