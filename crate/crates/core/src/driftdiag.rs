//! Histogram KL drift scores between a source and a target sample.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::datagen::{ColumnData, SimDataset};
use crate::error::{Error, Result};

pub const DRIFT_BINS: usize = 30;
pub const SMOOTHING: f64 = 1e-8;

/// Equal-width histograms of two samples over shared edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramPair {
    pub edges: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

fn smoothed(counts: &[f64]) -> Vec<f64> {
    let n: f64 = counts.iter().sum();
    let raw: Vec<f64> = counts.iter().map(|c| if n > 0.0 { c / n } else { 0.0 } + SMOOTHING).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

fn bin_counts(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let mut counts = vec![0.0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        let b = if width > 0.0 {
            (((v - lo) / width).floor() as isize).clamp(0, bins as isize - 1) as usize
        } else {
            0
        };
        counts[b] += 1.0;
    }
    counts
}

impl HistogramPair {
    pub fn new(source: &[f64], target: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let bins = if hi > lo { bins } else { 1 };
        let edges = (0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect();
        Self {
            edges,
            p: smoothed(&bin_counts(source, lo, hi, bins)),
            q: smoothed(&bin_counts(target, lo, hi, bins)),
        }
    }

    /// Histograms over the pooled `[min, max]` of both samples.
    pub fn pooled(source: &[f64], target: &[f64], bins: usize) -> Self {
        let (lo, hi) = source
            .iter()
            .chain(target)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        Self::new(source, target, lo, hi, bins)
    }

    pub fn kl(&self) -> f64 {
        kl_divergence(&self.p, &self.q).expect("equal lengths by construction")
    }
}

/// Directed `Σ p log(p / q)` in nats.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Diagnostic(format!(
            "KL needs equal lengths, got {} and {}",
            p.len(),
            q.len()
        )));
    }
    Ok(p.iter()
        .zip(q)
        .map(|(&a, &b)| if a > 0.0 { a * (a / b).ln() } else { 0.0 })
        .sum::<f64>()
        .max(0.0))
}

/// Pearson correlation; 0 when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDrift {
    pub name: String,
    pub kl: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub features: Vec<FeatureDrift>,
    pub feature_shift: f64,
    pub label_shift: f64,
    /// Set when all relevance weights were zero and a plain mean was used.
    pub unweighted: bool,
}

fn labels_of(data: &ColumnData) -> (&[u32], &[String]) {
    match data {
        ColumnData::Categorical { codes, labels } => (codes, labels),
        ColumnData::Numeric(_) => unreachable!("categorical column expected"),
    }
}

/// KL and relevance weight of one shared feature.
fn feature_drift(name: &str, source: &SimDataset, target: &SimDataset) -> Result<FeatureDrift> {
    let (s, t) = (source.column(name).expect("shared"), target.column(name).expect("shared"));
    if s.kind() != t.kind() {
        return Err(Error::Diagnostic(format!("`{name}` has different kinds across domains")));
    }
    match (&s.data, &t.data) {
        (ColumnData::Numeric(xs), ColumnData::Numeric(xt)) => Ok(FeatureDrift {
            name: name.to_string(),
            kl: HistogramPair::pooled(xs, xt, DRIFT_BINS).kl(),
            weight: pearson(xs, &source.recovery).abs(),
        }),
        _ => {
            let (cs, ls) = labels_of(&s.data);
            let (ct, lt) = labels_of(&t.data);
            let universe: Vec<&String> = ls.iter().chain(lt).collect::<BTreeSet<_>>().into_iter().collect();
            let count = |codes: &[u32], labels: &[String]| {
                let mut c = vec![0.0; universe.len()];
                for &k in codes {
                    let pos = universe.binary_search(&&labels[k as usize]).expect("label in universe");
                    c[pos] += 1.0;
                }
                c
            };
            let kl = kl_divergence(&smoothed(&count(cs, ls)), &smoothed(&count(ct, lt)))?;
            let weight = (0..ls.len())
                .map(|k| {
                    let ind: Vec<f64> = cs.iter().map(|&c| if c as usize == k { 1.0 } else { 0.0 }).collect();
                    pearson(&ind, &source.recovery).abs()
                })
                .fold(0.0, f64::max);
            Ok(FeatureDrift {
                name: name.to_string(),
                kl,
                weight,
            })
        }
    }
}

/// Relevance-weighted mean KL over features present in both samples.
pub fn feature_shift(source: &SimDataset, target: &SimDataset) -> Result<(Vec<FeatureDrift>, f64, bool)> {
    let shared: Vec<&str> = source
        .feature_names()
        .into_iter()
        .filter(|n| target.column(n).is_some())
        .collect();
    if shared.is_empty() {
        return Err(Error::Diagnostic("no shared features to compare".into()));
    }
    let drifts = shared
        .iter()
        .map(|n| feature_drift(n, source, target))
        .collect::<Result<Vec<_>>>()?;
    let wsum: f64 = drifts.iter().map(|d| d.weight).sum();
    let (score, unweighted) = if wsum > 0.0 {
        (drifts.iter().map(|d| d.weight * d.kl).sum::<f64>() / wsum, false)
    } else {
        (drifts.iter().map(|d| d.kl).sum::<f64>() / drifts.len() as f64, true)
    };
    Ok((drifts, score, unweighted))
}

/// KL between recovery-rate histograms on `[0, 1]`.
pub fn label_shift(source: &[f64], target: &[f64]) -> Result<f64> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Diagnostic("label shift needs non-empty samples".into()));
    }
    Ok(HistogramPair::new(source, target, 0.0, 1.0, DRIFT_BINS).kl())
}

pub fn drift_report(source: &SimDataset, target: &SimDataset) -> Result<DriftReport> {
    let (features, feature_shift, unweighted) = feature_shift(source, target)?;
    Ok(DriftReport {
        features,
        feature_shift,
        label_shift: label_shift(&source.recovery, &target.recovery)?,
        unweighted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, generate_domain_pair, Domain, GeneratorConfig, ShiftSpec, ShiftType};
    use crate::seeds;
    use proptest::prelude::*;
    use rand::Rng as _;

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 0.0);
        let want = 0.9 * 1.8f64.ln() + 0.1 * 0.2f64.ln();
        assert!((kl_divergence(&[0.9, 0.1], &[0.5, 0.5]).unwrap() - want).abs() < 1e-15);
        assert!((want - 0.3681).abs() < 1e-4);
        assert!(kl_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn kl_matches_direct_summation() {
        let mut rng = seeds::rng(7);
        for _ in 0..100 {
            let a: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
            let b: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
            let (p, q) = (smoothed(&a), smoothed(&b));
            let mut direct = 0.0;
            for i in 0..12 {
                direct += p[i] * (p[i].ln() - q[i].ln());
            }
            assert!((kl_divergence(&p, &q).unwrap() - direct).abs() < 1e-12);
        }
    }

    #[test]
    fn histograms_are_normalised_and_positive() {
        let h = HistogramPair::pooled(&[0.0, 0.5, 1.0], &[2.0, 3.0], DRIFT_BINS);
        assert!((h.p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!((h.q.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(h.p.iter().chain(&h.q).all(|&v| v > 0.0));
        assert_eq!(h.edges.len(), DRIFT_BINS + 1);
    }

    #[test]
    fn identical_data_has_zero_drift() {
        let d = generate_dataset(&GeneratorConfig::default(), 2000, 1, Domain::Source).unwrap();
        let r = drift_report(&d, &d).unwrap();
        assert_eq!(r.feature_shift, 0.0);
        assert_eq!(r.label_shift, 0.0);
        assert!(r.features.iter().all(|f| f.kl == 0.0));
    }

    #[test]
    fn degenerate_target_is_finite() {
        let d = generate_dataset(&GeneratorConfig::default(), 2000, 1, Domain::Source).unwrap();
        let v = label_shift(&d.recovery, &vec![0.0; 100]).unwrap();
        assert!(v.is_finite() && v > 5.0);
    }

    #[test]
    fn covariate_intensity_raises_feature_shift() {
        let base = GeneratorConfig::default();
        let mut means = Vec::new();
        for s in [0.0, 1.0, 2.0, 3.0] {
            let shift = ShiftSpec::standard(ShiftType::Covariate, s, &base);
            let m: f64 = (0..10)
                .map(|seed| {
                    let (a, b) = generate_domain_pair(&base, &shift, 2000, 500, seed).unwrap();
                    feature_shift(&a, &b).unwrap().1
                })
                .sum::<f64>()
                / 10.0;
            means.push(m);
        }
        for w in means.windows(2) {
            assert!(w[1] > w[0] - 0.01, "{means:?}");
        }
    }

    #[test]
    fn conditional_shift_leaves_feature_shift_at_baseline() {
        let base = GeneratorConfig::default();
        let none = ShiftSpec::none();
        let cond = ShiftSpec::standard(ShiftType::Conditional, 3.0, &base);
        let mut diffs = Vec::new();
        for seed in 0..10 {
            let (a, b) = generate_domain_pair(&base, &none, 2000, 2000, seed).unwrap();
            let (c, d) = generate_domain_pair(&base, &cond, 2000, 2000, seed + 100).unwrap();
            diffs.push(feature_shift(&c, &d).unwrap().1 - feature_shift(&a, &b).unwrap().1);
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let se = (diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() / n.sqrt();
        assert!(mean.abs() < 3.0 * se + 1e-3, "{mean} ± {se}");
    }

    #[test]
    fn label_shift_ordering() {
        let base = GeneratorConfig::default();
        let mut low = base.clone();
        low.mixture.pi = 0.2;
        for seed in 0..10 {
            let a = generate_dataset(&base, 2000, seed, Domain::Source).unwrap();
            let b = generate_dataset(&base, 2000, seed + 1000, Domain::Target).unwrap();
            let c = generate_dataset(&low, 2000, seed + 2000, Domain::Target).unwrap();
            assert!(label_shift(&a.recovery, &b.recovery).unwrap() < label_shift(&a.recovery, &c.recovery).unwrap());
        }
    }

    #[test]
    fn weights_depend_on_source_only() {
        let base = GeneratorConfig::default();
        let shift = ShiftSpec::standard(ShiftType::Covariate, 1.0, &base);
        let (s, t1) = generate_domain_pair(&base, &shift, 1000, 300, 1).unwrap();
        let (_, t2) = generate_domain_pair(&base, &shift, 1000, 300, 2).unwrap();
        let w = |t: &SimDataset| feature_shift(&s, t).unwrap().0.iter().map(|f| f.weight).collect::<Vec<_>>();
        assert_eq!(w(&t1), w(&t2));
    }

    proptest! {
        #[test]
        fn kl_nonnegative_and_invariant_to_bin_relabeling(a in proptest::collection::vec(0.0f64..1.0, 5), b in proptest::collection::vec(0.0f64..1.0, 5), rot in 0usize..5) {
            let (p, q) = (smoothed(&a), smoothed(&b));
            let k = kl_divergence(&p, &q).unwrap();
            prop_assert!(k >= 0.0);
            let (mut pr, mut qr) = (p.clone(), q.clone());
            pr.rotate_left(rot);
            qr.rotate_left(rot);
            prop_assert!((kl_divergence(&pr, &qr).unwrap() - k).abs() < 1e-12);
        }
    }
}
