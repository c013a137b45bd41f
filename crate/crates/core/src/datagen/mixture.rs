use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

const ROOT_TOLERANCE: f64 = 1e-8;
const ROOT_MAX_ITER: usize = 200;
const BRACKET_SIGMAS: f64 = 5.0;

/// Two-component Gaussian mixture for recovery rates: a secured
/// (high-recovery) component with weight `pi` and an unsecured component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RrMixtureConfig {
    pub pi: f64,
    pub mu_secured: f64,
    pub mu_unsecured: f64,
    pub sigma_secured: f64,
    pub sigma_unsecured: f64,
}

impl Default for RrMixtureConfig {
    /// Calibrated so that the clipped draws have mean ≈ 0.72, sd ≈ 0.36 and
    /// skewness ≈ −0.85.
    fn default() -> Self {
        Self {
            pi: 0.70,
            mu_secured: 0.98,
            mu_unsecured: 0.18,
            sigma_secured: 0.10,
            sigma_unsecured: 0.08,
        }
    }
}

impl RrMixtureConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.pi,
            self.mu_secured,
            self.mu_unsecured,
            self.sigma_secured,
            self.sigma_unsecured,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(Error::Config("mixture parameters must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.pi) {
            return Err(Error::Config(format!("pi = {} outside [0, 1]", self.pi)));
        }
        for (name, mu) in [
            ("mu_secured", self.mu_secured),
            ("mu_unsecured", self.mu_unsecured),
        ] {
            if !(0.0..=1.0).contains(&mu) {
                return Err(Error::Config(format!("{name} = {mu} outside [0, 1]")));
            }
        }
        for (name, sigma) in [
            ("sigma_secured", self.sigma_secured),
            ("sigma_unsecured", self.sigma_unsecured),
        ] {
            if sigma <= 0.0 {
                return Err(Error::Config(format!("{name} = {sigma} must be > 0")));
            }
        }
        Ok(())
    }

    pub fn cdf(&self, r: f64) -> f64 {
        self.pi * normal_cdf((r - self.mu_secured) / self.sigma_secured)
            + (1.0 - self.pi) * normal_cdf((r - self.mu_unsecured) / self.sigma_unsecured)
    }

    pub fn pdf(&self, r: f64) -> f64 {
        self.pi * normal_pdf(r, self.mu_secured, self.sigma_secured)
            + (1.0 - self.pi) * normal_pdf(r, self.mu_unsecured, self.sigma_unsecured)
    }

    /// CDF of the draws after clipping to `[0, 1]`: atoms at both ends.
    pub fn clipped_cdf(&self, r: f64) -> f64 {
        if r < 0.0 {
            0.0
        } else if r >= 1.0 {
            1.0
        } else {
            self.cdf(r)
        }
    }

    /// Mean of the clipped draws, by closed-form censored-normal moments.
    pub fn clipped_mean(&self) -> f64 {
        self.pi * censored_normal_mean(self.mu_secured, self.sigma_secured)
            + (1.0 - self.pi) * censored_normal_mean(self.mu_unsecured, self.sigma_unsecured)
    }

    /// True when the secured component has the larger posterior
    /// responsibility at `r`.
    pub fn is_secured(&self, r: f64) -> bool {
        let log_s = self.pi.ln() + log_normal_pdf(r, self.mu_secured, self.sigma_secured);
        let log_u =
            (1.0 - self.pi).ln() + log_normal_pdf(r, self.mu_unsecured, self.sigma_unsecured);
        log_s > log_u
    }

    /// Inverse CDF by bisection. Roots beyond the bracket are pinned to the
    /// bracket end, which lies outside `[0, 1]` for any non-degenerate config
    /// and is therefore removed by the subsequent clipping.
    pub fn quantile(&self, u: f64) -> f64 {
        let max_sigma = self.sigma_secured.max(self.sigma_unsecured);
        let mut lo = self.mu_secured.min(self.mu_unsecured) - BRACKET_SIGMAS * max_sigma;
        let mut hi = self.mu_secured.max(self.mu_unsecured) + BRACKET_SIGMAS * max_sigma;
        if self.cdf(lo) >= u {
            return lo;
        }
        if self.cdf(hi) <= u {
            return hi;
        }
        let mut iter = 0;
        while hi - lo > ROOT_TOLERANCE && iter < ROOT_MAX_ITER {
            let mid = 0.5 * (lo + hi);
            if self.cdf(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
            iter += 1;
        }
        0.5 * (lo + hi)
    }
}

/// `F_R(r)` for the unclipped mixture.
pub fn mixture_cdf(config: &RrMixtureConfig, r: f64) -> f64 {
    config.cdf(r)
}

/// Full record of an inverse-CDF draw, kept so that link perturbations can
/// reuse the underlying uniforms.
#[derive(Debug, Clone)]
pub struct RecoveryDraws {
    pub uniforms: Vec<f64>,
    pub raw: Vec<f64>,
    pub values: Vec<f64>,
    pub secured: Vec<bool>,
}

pub(crate) fn draw_recovery(config: &RrMixtureConfig, n: usize, seed: u64) -> Result<RecoveryDraws> {
    config.validate()?;
    if n == 0 {
        return Err(Error::Config("sample size must be at least 1".into()));
    }
    let mut rng = seeds::derive_rng(seed, "recovery");
    let uniforms: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
    let raw: Vec<f64> = uniforms.iter().map(|&u| config.quantile(u)).collect();
    let values = raw.iter().map(|r| r.clamp(0.0, 1.0)).collect();
    let secured = raw.iter().map(|&r| config.is_secured(r)).collect();
    Ok(RecoveryDraws {
        uniforms,
        raw,
        values,
        secured,
    })
}

/// Draw `n` recovery rates by inverting the mixture CDF, clip them to
/// `[0, 1]`, and flag each draw with its maximum-responsibility component.
pub fn sample_recovery_rates(
    config: &RrMixtureConfig,
    n: usize,
    seed: u64,
) -> Result<(Vec<f64>, Vec<bool>)> {
    let draws = draw_recovery(config, n, seed)?;
    Ok((draws.values, draws.secured))
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

pub fn normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    log_normal_pdf(x, mu, sigma).exp()
}

pub fn log_normal_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    -0.5 * z * z - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
}

/// E[clip(X, 0, 1)] for X ~ N(mu, sigma²).
fn censored_normal_mean(mu: f64, sigma: f64) -> f64 {
    let a = (0.0 - mu) / sigma;
    let b = (1.0 - mu) / sigma;
    let phi = |z: f64| (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let inner = mu * (normal_cdf(b) - normal_cdf(a)) + sigma * (phi(a) - phi(b));
    inner + (1.0 - normal_cdf(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bimodal() -> RrMixtureConfig {
        RrMixtureConfig {
            pi: 0.7,
            mu_secured: 0.85,
            mu_unsecured: 0.15,
            sigma_secured: 0.1,
            sigma_unsecured: 0.1,
        }
    }

    // Trapezoid integration of the mixture pdf over [-10, r] on a 10^6-point grid.
    fn cdf_by_quadrature(config: &RrMixtureConfig, r: f64) -> f64 {
        let lo = -10.0;
        let n = 1_000_000;
        let h = (r - lo) / (n - 1) as f64;
        let mut acc = 0.5 * (config.pdf(lo) + config.pdf(r));
        for i in 1..n - 1 {
            acc += config.pdf(lo + i as f64 * h);
        }
        acc * h
    }

    #[test]
    fn cdf_single_component_median() {
        let c = RrMixtureConfig {
            pi: 1.0,
            mu_secured: 0.5,
            sigma_secured: 0.1,
            ..bimodal()
        };
        assert!((mixture_cdf(&c, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cdf_symmetric_mixture() {
        let c = RrMixtureConfig {
            pi: 0.5,
            mu_secured: 0.8,
            mu_unsecured: 0.2,
            sigma_secured: 0.1,
            sigma_unsecured: 0.1,
        };
        assert!((mixture_cdf(&c, 0.5) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn cdf_matches_quadrature() {
        let c = bimodal();
        let oracle = cdf_by_quadrature(&c, 0.5);
        assert!((mixture_cdf(&c, 0.5) - oracle).abs() < 1e-8, "{oracle}");
    }

    #[test]
    fn cdf_limits_and_monotone() {
        let c = bimodal();
        assert!(mixture_cdf(&c, -50.0) < 1e-15);
        assert!((mixture_cdf(&c, 50.0) - 1.0).abs() < 1e-15);
        let mut prev = 0.0;
        for i in 0..=1000 {
            let v = mixture_cdf(&c, -1.0 + 3.0 * i as f64 / 1000.0);
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn quantile_inverts_cdf() {
        let c = bimodal();
        for u in [0.01, 0.2, 0.5, 0.77, 0.99] {
            let r = c.quantile(u);
            assert!((c.cdf(r) - u).abs() < 1e-7);
        }
    }

    #[test]
    fn degenerate_component_samples() {
        let c = RrMixtureConfig {
            pi: 1.0,
            mu_secured: 0.5,
            sigma_secured: 1e-6,
            ..bimodal()
        };
        let (r, s) = sample_recovery_rates(&c, 5, 3).unwrap();
        assert!(r.iter().all(|v| (v - 0.5).abs() < 1e-4));
        assert!(s.iter().all(|&f| f));
    }

    #[test]
    fn sample_mean_within_three_standard_errors() {
        let c = bimodal();
        let n = 100_000;
        let (r, _) = sample_recovery_rates(&c, n, 11).unwrap();
        let mean = r.iter().sum::<f64>() / n as f64;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let analytic = c.clipped_mean();
        assert!((mean - analytic).abs() < 3.0 * se, "{mean} vs {analytic}");
    }

    #[test]
    fn sampler_ks_below_threshold() {
        let c = bimodal();
        let (r, _) = sample_recovery_rates(&c, 100_000, 5).unwrap();
        assert!(ks_statistic(&r, |x| c.clipped_cdf(x)) < 0.01);
    }

    #[test]
    fn sampler_is_deterministic() {
        let c = RrMixtureConfig::default();
        let a = sample_recovery_rates(&c, 1000, 42).unwrap();
        let b = sample_recovery_rates(&c, 1000, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn secured_flag_follows_responsibility() {
        let c = RrMixtureConfig::default();
        let (r, s) = sample_recovery_rates(&c, 2000, 9).unwrap();
        for (v, f) in r.iter().zip(&s) {
            if *v > 0.7 {
                assert!(*f);
            }
            if *v < 0.4 {
                assert!(!*f);
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let c = RrMixtureConfig {
            sigma_unsecured: 0.0,
            ..bimodal()
        };
        assert!(matches!(sample_recovery_rates(&c, 3, 1), Err(Error::Config(_))));
        let c = RrMixtureConfig {
            pi: 1.2,
            ..bimodal()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_calibration_moments() {
        let c = RrMixtureConfig::default();
        let (r, _) = sample_recovery_rates(&c, 200_000, 1).unwrap();
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        let skew = r.iter().map(|v| ((v - mean) / sd).powi(3)).sum::<f64>() / n;
        assert!((mean - 0.72).abs() < 0.01, "mean {mean}");
        assert!((sd - 0.36).abs() < 0.01, "sd {sd}");
        assert!((skew + 0.85).abs() < 0.05, "skew {skew}");
    }

    pub(crate) fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
        let mut xs = sample.to_vec();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let mut d: f64 = 0.0;
        let mut i = 0;
        while i < xs.len() {
            let x = xs[i];
            let mut j = i;
            while j < xs.len() && xs[j] == x {
                j += 1;
            }
            let f = cdf(x);
            // left limit of the theoretical cdf just below x
            let f_left = cdf(x - 1e-12);
            d = d.max((j as f64 / n - f).abs());
            d = d.max((f_left - i as f64 / n).abs());
            i = j;
        }
        d
    }
}
