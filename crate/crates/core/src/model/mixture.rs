use std::f64::consts::PI;

use crate::datagen::log_normal_pdf;

/// Per-row Gaussian mixture `(α, μ, σ)`.
pub type MixtureOutput = crate::nn::MixtureParams;

pub fn mixture_mean(out: &MixtureOutput) -> f64 {
    out.alpha.iter().zip(&out.mu).map(|(a, m)| a * m).sum()
}

pub fn mixture_pdf(out: &MixtureOutput, r: f64) -> f64 {
    out.alpha
        .iter()
        .zip(&out.mu)
        .zip(&out.sigma)
        .map(|((a, m), s)| a * (-0.5 * ((r - m) / s).powi(2)).exp() / (s * (2.0 * PI).sqrt()))
        .sum()
}

/// `−log Σ α_k φ(r; μ_k, σ_k²)` via log-sum-exp.
pub fn mdn_nll(out: &MixtureOutput, r: f64) -> f64 {
    let terms: Vec<f64> = out
        .alpha
        .iter()
        .zip(&out.mu)
        .zip(&out.sigma)
        .map(|((a, m), s)| a.ln() + log_normal_pdf(r, *m, *s))
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    -(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
}
