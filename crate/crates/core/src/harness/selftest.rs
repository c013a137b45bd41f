//! Fast invariant checks behind `rrlab selftest`.

use serde::Serialize;

use super::GridSpec;
use crate::datagen::{generate_dataset, sample_recovery_rates, Domain, GeneratorConfig, RrMixtureConfig};
use crate::driftdiag::feature_shift;
use crate::error::Result;
use crate::model::{mixture_pdf, FtModel, HeadKind, ModelConfig};
use crate::nn::{check_gradients, Tape};
use crate::schema::{encode, Preprocessor, Schema};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

fn sampler_ks(seed: u64) -> Result<Check> {
    let cfg = RrMixtureConfig::default();
    let n = 20_000;
    let (mut r, _) = sample_recovery_rates(&cfg, n, seed)?;
    r.sort_by(f64::total_cmp);
    let mut ks: f64 = 0.0;
    let mut i = 0;
    while i < n {
        // Ties come from the clip atoms at 0 and 1.
        let x = r[i];
        let j = r[i..].iter().take_while(|&&v| v == x).count() + i;
        let left = if x <= 0.0 { 0.0 } else { cfg.clipped_cdf(x - 1e-12) };
        ks = ks
            .max((cfg.clipped_cdf(x) - j as f64 / n as f64).abs())
            .max((left - i as f64 / n as f64).abs());
        i = j;
    }
    Ok(check("sampler_ks", ks < 0.02, format!("KS = {ks:.4} over {n} draws (limit 0.02)")))
}

fn tiny() -> ModelConfig {
    ModelConfig {
        d: 8,
        blocks: 2,
        heads: 2,
        dropout: 0.0,
        ..ModelConfig::default()
    }
}

fn model_checks(seed: u64) -> Result<Vec<Check>> {
    let data = generate_dataset(&GeneratorConfig::default(), 64, seed, Domain::Source)?;
    let schema = Schema::from_datasets(&data, &data)?;
    let prep = Preprocessor::fit(&data, &data, &schema)?;
    let model = FtModel::new(tiny(), HeadKind::Mdn, &schema, &prep.vocab, seed)?;
    let batch = encode(&data, &schema, &prep)?;
    let mut out = Vec::new();

    // Masked slots must not leak into predictions.
    let mut masked = batch.clone();
    masked.mask_feature(0);
    masked.mask_feature(3);
    let base = model.predict(&masked)?;
    let mut perturbed = masked.clone();
    let l = perturbed.width();
    for i in 0..perturbed.n {
        perturbed.values[i * l] += 100.0;
        perturbed.values[i * l + 3] -= 50.0;
    }
    let moved = model.predict(&perturbed)?;
    let diff = base.mean.iter().zip(&moved.mean).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    out.push(check("mask_invariance", diff < 1e-6, format!("max |Δ| = {diff:.3e}")));

    // Gradients of the mixture NLL against central differences.
    let small = batch.rows(&(0..8).collect::<Vec<_>>());
    let loss = |s: &crate::nn::ParamStore| {
        let m = FtModel { params: s.clone(), ..model.clone() };
        let mut tape = Tape::new(s);
        let l = m.loss(&mut tape, &small, None).expect("encoded batch");
        (tape.scalar(l), tape.backward(l))
    };
    let (_, grads) = loss(&model.params);
    let gc = check_gradients(&model.params, &grads, 1e-5, |s| loss(s).0);
    let err = gc.max_rel_error();
    out.push(check("gradient_check", err < 1e-4, format!("max relative error {err:.3e}")));

    // Each predicted density integrates to one.
    let mixtures = base.mixtures.expect("MDN head");
    let mut worst: f64 = 0.0;
    for m in mixtures.iter().take(16) {
        let lo = m.mu.iter().zip(&m.sigma).map(|(u, s)| u - 12.0 * s).fold(f64::INFINITY, f64::min);
        let hi = m.mu.iter().zip(&m.sigma).map(|(u, s)| u + 12.0 * s).fold(f64::NEG_INFINITY, f64::max);
        let k = 20_000;
        let h = (hi - lo) / k as f64;
        let mut mass = 0.5 * (mixture_pdf(m, lo) + mixture_pdf(m, hi));
        for i in 1..k {
            mass += mixture_pdf(m, lo + i as f64 * h);
        }
        worst = worst.max((mass * h - 1.0).abs());
    }
    out.push(check("density_normalization", worst < 1e-4, format!("max |mass − 1| = {worst:.3e}")));

    let same = model.reconfigure_for_schema(&schema, &prep.vocab, seed ^ 1)?;
    out.push(check(
        "identity_reconfiguration",
        same == model,
        "reconfiguring onto the same schema keeps every parameter".into(),
    ));
    Ok(out)
}

/// Run every check; the caller decides how to report failures.
pub fn selftest(seed: u64) -> Result<Vec<Check>> {
    let mut out = vec![sampler_ks(seed)?];
    out.extend(model_checks(seed)?);

    let data = generate_dataset(&GeneratorConfig::default(), 2000, seed, Domain::Source)?;
    let (_, fs, _) = feature_shift(&data, &data)?;
    out.push(check("feature_shift_identical", fs.abs() < 1e-12, format!("FeatureShift = {fs:.3e}")));

    let grid = GridSpec::default();
    let cells = grid.cells();
    let seeds: std::collections::BTreeSet<u64> = cells.iter().map(|c| c.seed(grid.base_seed)).collect();
    out.push(check(
        "cell_seed_hygiene",
        seeds.len() == cells.len(),
        format!("{} cells, {} distinct seeds", cells.len(), seeds.len()),
    ));
    Ok(out)
}
