use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds;

/// One synthetic feature: a name, a generation rule, and an optional affine
/// location/scale warp applied to numeric outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub rule: FeatureRule,
    #[serde(default, skip_serializing_if = "Warp::is_identity")]
    pub warp: Warp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum FeatureRule {
    /// `beta * R + intercept + eps`, eps optionally skew-normal.
    Linear {
        beta: f64,
        intercept: f64,
        noise_sd: f64,
        #[serde(default)]
        skew: f64,
    },
    /// `beta * f(R) + eps`.
    Nonlinear {
        beta: f64,
        function: BaseFunction,
        noise_sd: f64,
    },
    /// `g(R) + eps` for a named function from a [`CustomFns`] registry.
    Custom { function: String, noise_sd: f64 },
    /// `f(X_a, X_b)` without fresh noise.
    Interaction {
        parent_a: String,
        parent_b: String,
        combine: Combine,
    },
    /// Softmax over per-class logits `w0 + w1 R + w2 R² + w3 secured + eps_c`.
    Categorical {
        classes: Vec<ClassWeights>,
        tau_cat: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseFunction {
    Polynomial { coefficients: Vec<f64> },
    Sine { frequency: f64, phase: f64 },
    Exponential { rate: f64 },
    Sigmoid { steepness: f64, midpoint: f64 },
}

impl BaseFunction {
    pub fn eval(&self, r: f64) -> f64 {
        match self {
            BaseFunction::Polynomial { coefficients } => {
                coefficients.iter().rev().fold(0.0, |acc, c| acc * r + c)
            }
            BaseFunction::Sine { frequency, phase } => {
                (2.0 * std::f64::consts::PI * frequency * r + phase).sin()
            }
            BaseFunction::Exponential { rate } => (rate * r).exp(),
            BaseFunction::Sigmoid {
                steepness,
                midpoint,
            } => 1.0 / (1.0 + (-steepness * (r - midpoint)).exp()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Combine {
    Multiply,
    Add,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub label: String,
    #[serde(default)]
    pub w0: f64,
    #[serde(default)]
    pub w1: f64,
    #[serde(default)]
    pub w2: f64,
    #[serde(default)]
    pub w3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Warp {
    #[serde(default)]
    pub loc: f64,
    #[serde(default = "one")]
    pub scale: f64,
}

fn one() -> f64 {
    1.0
}

impl Default for Warp {
    fn default() -> Self {
        Self { loc: 0.0, scale: 1.0 }
    }
}

impl Warp {
    pub fn is_identity(&self) -> bool {
        self.loc == 0.0 && self.scale == 1.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric,
    Categorical,
}

impl std::fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureKind::Numeric => write!(f, "numeric"),
            FeatureKind::Categorical => write!(f, "categorical"),
        }
    }
}

impl FeatureSpec {
    pub fn kind(&self) -> FeatureKind {
        match self.rule {
            FeatureRule::Categorical { .. } => FeatureKind::Categorical,
            _ => FeatureKind::Numeric,
        }
    }

    pub fn labels(&self) -> Vec<String> {
        match &self.rule {
            FeatureRule::Categorical { classes, .. } => {
                classes.iter().map(|c| c.label.clone()).collect()
            }
            _ => Vec::new(),
        }
    }
}

/// Named scalar functions usable by `custom` features.
#[derive(Clone)]
pub struct CustomFns {
    fns: BTreeMap<String, Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
}

impl std::fmt::Debug for CustomFns {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.fns.keys()).finish()
    }
}

impl Default for CustomFns {
    fn default() -> Self {
        Self::builtin()
    }
}

impl CustomFns {
    pub fn empty() -> Self {
        Self {
            fns: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut reg = Self::empty();
        reg.register("square", |r| r * r);
        reg.register("cube", |r| r * r * r);
        reg.register("sqrt", |r| r.max(0.0).sqrt());
        reg.register("log1p", |r| r.ln_1p());
        reg.register("logit", |r| {
            let p = r.clamp(1e-3, 1.0 - 1e-3);
            (p / (1.0 - p)).ln()
        });
        reg.register("tent", |r| 1.0 - (2.0 * r - 1.0).abs());
        reg
    }

    pub fn register(&mut self, name: &str, f: impl Fn(f64) -> f64 + Send + Sync + 'static) {
        self.fns.insert(name.to_string(), Arc::new(f));
    }

    pub fn get(&self, name: &str) -> Option<&(dyn Fn(f64) -> f64 + Send + Sync)> {
        self.fns.get(name).map(|f| f.as_ref())
    }
}

fn standard_normal(rng: &mut seeds::Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Zero-mean, `sd`-scaled noise. With `skew != 0` the draw is a standardized
/// skew-normal with that shape parameter.
fn noise(rng: &mut seeds::Rng, sd: f64, skew: f64) -> f64 {
    if skew == 0.0 {
        return sd * standard_normal(rng);
    }
    let delta = skew / (1.0 + skew * skew).sqrt();
    let u0 = standard_normal(rng).abs();
    let u1 = standard_normal(rng);
    let z = delta * u0 + (1.0 - delta * delta).sqrt() * u1;
    let mean = delta * (2.0 / std::f64::consts::PI).sqrt();
    let var = 1.0 - 2.0 * delta * delta / std::f64::consts::PI;
    sd * (z - mean) / var.sqrt()
}

/// Generate one numeric feature from the recovery rates (or its parents).
pub fn gen_numeric_feature(
    spec: &FeatureSpec,
    recovery: &[f64],
    parents: &BTreeMap<String, Vec<f64>>,
    seed: u64,
) -> Result<Vec<f64>> {
    gen_numeric_feature_with(spec, recovery, parents, seed, &CustomFns::builtin())
}

pub fn gen_numeric_feature_with(
    spec: &FeatureSpec,
    recovery: &[f64],
    parents: &BTreeMap<String, Vec<f64>>,
    seed: u64,
    custom: &CustomFns,
) -> Result<Vec<f64>> {
    let mut rng = seeds::derive_rng(seed, &format!("feature/{}", spec.name));
    let raw: Vec<f64> = match &spec.rule {
        FeatureRule::Linear {
            beta,
            intercept,
            noise_sd,
            skew,
        } => recovery
            .iter()
            .map(|r| beta * r + intercept + noise(&mut rng, *noise_sd, *skew))
            .collect(),
        FeatureRule::Nonlinear {
            beta,
            function,
            noise_sd,
        } => recovery
            .iter()
            .map(|&r| beta * function.eval(r) + noise_sd * standard_normal(&mut rng))
            .collect(),
        FeatureRule::Custom { function, noise_sd } => {
            let g = custom.get(function).ok_or_else(|| {
                Error::Config(format!("unknown custom function `{function}` in `{}`", spec.name))
            })?;
            recovery
                .iter()
                .map(|&r| g(r) + noise_sd * standard_normal(&mut rng))
                .collect()
        }
        FeatureRule::Interaction {
            parent_a,
            parent_b,
            combine,
        } => {
            let lookup = |name: &str| {
                parents.get(name).ok_or_else(|| {
                    Error::Schema(format!("interaction `{}` is missing parent `{name}`", spec.name))
                })
            };
            let a = lookup(parent_a)?;
            let b = lookup(parent_b)?;
            if a.len() != recovery.len() || b.len() != recovery.len() {
                return Err(Error::Schema(format!(
                    "interaction `{}` parents have mismatched lengths",
                    spec.name
                )));
            }
            a.iter()
                .zip(b)
                .map(|(x, y)| match combine {
                    Combine::Multiply => x * y,
                    Combine::Add => x + y,
                })
                .collect()
        }
        FeatureRule::Categorical { .. } => {
            return Err(Error::Config(format!(
                "`{}` is categorical; use gen_categorical_feature",
                spec.name
            )))
        }
    };
    let warp = spec.warp;
    Ok(if warp.is_identity() {
        raw
    } else {
        raw.into_iter().map(|x| warp.loc + warp.scale * x).collect()
    })
}

/// Sample class indices from softmax probabilities over recovery-linked logits.
pub fn gen_categorical_feature(
    spec: &FeatureSpec,
    recovery: &[f64],
    secured: &[bool],
    seed: u64,
) -> Result<Vec<u32>> {
    let FeatureRule::Categorical { classes, tau_cat } = &spec.rule else {
        return Err(Error::Config(format!("`{}` is not categorical", spec.name)));
    };
    if recovery.len() != secured.len() {
        return Err(Error::Config("recovery and secured lengths differ".into()));
    }
    let mut rng = seeds::derive_rng(seed, &format!("feature/{}", spec.name));
    let mut logits = vec![0.0; classes.len()];
    let mut out = Vec::with_capacity(recovery.len());
    for (&r, &s) in recovery.iter().zip(secured) {
        let s = if s { 1.0 } else { 0.0 };
        for (logit, w) in logits.iter_mut().zip(classes) {
            let eps = if *tau_cat > 0.0 {
                tau_cat * standard_normal(&mut rng)
            } else {
                0.0
            };
            *logit = w.w0 + w.w1 * r + w.w2 * r * r + w.w3 * s + eps;
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let u: f64 = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = classes.len() - 1;
        for (c, l) in logits.iter().enumerate() {
            acc += (l - max).exp();
            if u < acc {
                pick = c;
                break;
            }
        }
        out.push(pick as u32);
    }
    Ok(out)
}

pub(crate) fn validate_features(features: &[FeatureSpec], custom: &CustomFns) -> Result<()> {
    let mut seen: BTreeMap<&str, FeatureKind> = BTreeMap::new();
    for spec in features {
        if spec.name.is_empty() || spec.name.contains([',', '\n', '"', '.', '[', ']']) {
            return Err(Error::Config(format!("invalid feature name `{}`", spec.name)));
        }
        if spec.name == "recovery_rate" || spec.name == "secured" {
            return Err(Error::Config(format!("feature name `{}` is reserved", spec.name)));
        }
        let check_sd = |sd: f64| {
            if sd.is_finite() && sd >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("`{}`: noise_sd must be >= 0", spec.name)))
            }
        };
        match &spec.rule {
            FeatureRule::Linear { noise_sd, .. } | FeatureRule::Nonlinear { noise_sd, .. } => {
                check_sd(*noise_sd)?
            }
            FeatureRule::Custom { function, noise_sd } => {
                check_sd(*noise_sd)?;
                if custom.get(function).is_none() {
                    return Err(Error::Config(format!(
                        "`{}`: unknown custom function `{function}`",
                        spec.name
                    )));
                }
            }
            FeatureRule::Interaction {
                parent_a, parent_b, ..
            } => {
                for p in [parent_a, parent_b] {
                    match seen.get(p.as_str()) {
                        Some(FeatureKind::Numeric) => {}
                        _ => {
                            return Err(Error::Config(format!(
                                "interaction `{}` needs previously defined numeric parent `{p}`",
                                spec.name
                            )))
                        }
                    }
                }
            }
            FeatureRule::Categorical { classes, tau_cat } => {
                if classes.len() < 2 {
                    return Err(Error::Config(format!(
                        "`{}` needs at least two classes",
                        spec.name
                    )));
                }
                if !(tau_cat.is_finite() && *tau_cat >= 0.0) {
                    return Err(Error::Config(format!("`{}`: tau_cat must be >= 0", spec.name)));
                }
                let mut labels: Vec<&str> = classes.iter().map(|c| c.label.as_str()).collect();
                labels.sort_unstable();
                labels.dedup();
                if labels.len() != classes.len()
                    || labels.iter().any(|l| l.is_empty() || l.contains([',', '\n', '"']))
                {
                    return Err(Error::Config(format!(
                        "`{}`: class labels must be unique, non-empty, without commas",
                        spec.name
                    )));
                }
            }
        }
        if seen.insert(&spec.name, spec.kind()).is_some() {
            return Err(Error::Config(format!("duplicate feature `{}`", spec.name)));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::mixture::{sample_recovery_rates, RrMixtureConfig};

    fn linear(beta: f64, intercept: f64, noise_sd: f64) -> FeatureSpec {
        FeatureSpec {
            name: "x".into(),
            rule: FeatureRule::Linear {
                beta,
                intercept,
                noise_sd,
                skew: 0.0,
            },
            warp: Warp::default(),
        }
    }

    fn categorical(classes: Vec<ClassWeights>, tau_cat: f64) -> FeatureSpec {
        FeatureSpec {
            name: "cat".into(),
            rule: FeatureRule::Categorical { classes, tau_cat },
            warp: Warp::default(),
        }
    }

    fn class(label: &str) -> ClassWeights {
        ClassWeights {
            label: label.into(),
            w0: 0.0,
            w1: 0.0,
            w2: 0.0,
            w3: 0.0,
        }
    }

    fn corr(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn zero_noise_linear_is_affine() {
        let x = gen_numeric_feature(&linear(2.0, 1.0, 0.0), &[0.0, 0.5, 1.0], &BTreeMap::new(), 1)
            .unwrap();
        assert_eq!(x, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn interaction_multiplies_parents() {
        let spec = FeatureSpec {
            name: "k".into(),
            rule: FeatureRule::Interaction {
                parent_a: "a".into(),
                parent_b: "b".into(),
                combine: Combine::Multiply,
            },
            warp: Warp::default(),
        };
        let parents = BTreeMap::from([
            ("a".to_string(), vec![2.0, 3.0]),
            ("b".to_string(), vec![4.0, 5.0]),
        ]);
        let x = gen_numeric_feature(&spec, &[0.1, 0.2], &parents, 3).unwrap();
        assert_eq!(x, vec![8.0, 15.0]);

        let missing = BTreeMap::from([("a".to_string(), vec![2.0, 3.0])]);
        assert!(matches!(
            gen_numeric_feature(&spec, &[0.1, 0.2], &missing, 3),
            Err(Error::Schema(_))
        ));
    }

    #[test]
    fn linear_correlation_matches_analytic() {
        let (r, _) = sample_recovery_rates(&RrMixtureConfig::default(), 100_000, 17).unwrap();
        let x = gen_numeric_feature(&linear(2.0, 0.0, 1.0), &r, &BTreeMap::new(), 4).unwrap();
        let n = r.len() as f64;
        let m = r.iter().sum::<f64>() / n;
        let var_r = r.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        let analytic = 2.0 * var_r.sqrt() / (4.0 * var_r + 1.0).sqrt();
        assert!((corr(&x, &r) - analytic).abs() < 0.02);
    }

    #[test]
    fn skewed_noise_keeps_mean_and_sd() {
        let spec = FeatureSpec {
            name: "s".into(),
            rule: FeatureRule::Linear {
                beta: 0.0,
                intercept: 0.0,
                noise_sd: 2.0,
                skew: 5.0,
            },
            warp: Warp::default(),
        };
        let r = vec![0.5; 100_000];
        let x = gen_numeric_feature(&spec, &r, &BTreeMap::new(), 2).unwrap();
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let skew = x.iter().map(|v| ((v - mean) / sd).powi(3)).sum::<f64>() / n;
        assert!(mean.abs() < 0.03);
        assert!((sd - 2.0).abs() < 0.03);
        assert!(skew > 0.5);
    }

    #[test]
    fn nonlinear_forms_evaluate() {
        let poly = BaseFunction::Polynomial {
            coefficients: vec![1.0, 0.0, 2.0],
        };
        assert_eq!(poly.eval(0.5), 1.5);
        let sig = BaseFunction::Sigmoid {
            steepness: 10.0,
            midpoint: 0.5,
        };
        assert!((sig.eval(0.5) - 0.5).abs() < 1e-15);
        let sine = BaseFunction::Sine {
            frequency: 1.0,
            phase: 0.0,
        };
        assert!(sine.eval(0.25) > 0.999_999);
        let exp = BaseFunction::Exponential { rate: 1.0 };
        assert!((exp.eval(1.0) - std::f64::consts::E).abs() < 1e-15);
    }

    #[test]
    fn custom_feature_uses_registry() {
        let spec = FeatureSpec {
            name: "c".into(),
            rule: FeatureRule::Custom {
                function: "square".into(),
                noise_sd: 0.0,
            },
            warp: Warp::default(),
        };
        let x = gen_numeric_feature(&spec, &[0.5, 1.0], &BTreeMap::new(), 1).unwrap();
        assert_eq!(x, vec![0.25, 1.0]);
        let mut reg = CustomFns::empty();
        reg.register("triple", |r| 3.0 * r);
        let spec = FeatureSpec {
            rule: FeatureRule::Custom {
                function: "triple".into(),
                noise_sd: 0.0,
            },
            ..spec
        };
        let x = gen_numeric_feature_with(&spec, &[0.5], &BTreeMap::new(), 1, &reg).unwrap();
        assert_eq!(x, vec![1.5]);
    }

    #[test]
    fn symmetric_logits_give_uniform_classes() {
        let spec = categorical(vec![class("a"), class("b"), class("c"), class("d")], 0.0);
        let n = 100_000;
        let r = vec![0.5; n];
        let s = vec![false; n];
        let codes = gen_categorical_feature(&spec, &r, &s, 8).unwrap();
        let mut counts = [0usize; 4];
        for c in codes {
            counts[c as usize] += 1;
        }
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn dominant_secured_logit_wins() {
        let mut classes = vec![class("a"), class("b"), class("c")];
        classes[1].w3 = 10.0;
        let spec = categorical(classes, 0.0);
        let n = 20_000;
        let codes = gen_categorical_feature(&spec, &vec![0.3; n], &vec![true; n], 2).unwrap();
        let freq = codes.iter().filter(|&&c| c == 1).count() as f64 / n as f64;
        assert!(freq > 0.999);
    }

    #[test]
    fn two_class_probability_is_logistic() {
        let mut classes = vec![class("a"), class("b")];
        classes[0].w1 = -5.0;
        classes[1].w1 = 5.0;
        let spec = categorical(classes, 0.0);
        let n = 40_000;
        for r in [0.1, 0.5, 0.9] {
            let codes = gen_categorical_feature(&spec, &vec![r; n], &vec![false; n], 5).unwrap();
            let p_hat = codes.iter().filter(|&&c| c == 1).count() as f64 / n as f64;
            // closed form: softmax of (-5r, 5r) for the second class
            let p = 1.0 / (1.0 + (-10.0 * r).exp());
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((p_hat - p).abs() < 4.0 * se + 1e-9, "r={r}: {p_hat} vs {p}");
        }
    }

    #[test]
    fn validation_catches_bad_specs() {
        let reg = CustomFns::builtin();
        let orphan = FeatureSpec {
            name: "k".into(),
            rule: FeatureRule::Interaction {
                parent_a: "a".into(),
                parent_b: "b".into(),
                combine: Combine::Add,
            },
            warp: Warp::default(),
        };
        assert!(validate_features(&[orphan], &reg).is_err());
        assert!(validate_features(&[categorical(vec![class("a")], 0.0)], &reg).is_err());
        assert!(validate_features(&[linear(1.0, 0.0, -1.0)], &reg).is_err());
        assert!(validate_features(&[linear(1.0, 0.0, 1.0), linear(1.0, 0.0, 1.0)], &reg).is_err());
    }
}
