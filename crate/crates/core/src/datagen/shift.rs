use serde::{Deserialize, Serialize};

use super::features::{BaseFunction, FeatureRule};
use super::GeneratorConfig;
use crate::error::{Error, Result};

/// Per-unit step of the default covariate perturbations.
pub const COVARIATE_LOCATION_STEP: f64 = 0.5;
pub const COVARIATE_NOISE_FACTOR: f64 = 1.1;
pub const COVARIATE_CATEGORY_STEP: f64 = 0.5;
/// Per-unit increase of the link-reflection probability.
pub const CONDITIONAL_REFLECTION_STEP: f64 = 0.2;
/// Per-unit change of the secured share.
pub const LABEL_PI_STEP: f64 = -0.15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftType {
    None,
    Covariate,
    Conditional,
    Label,
    Combined,
}

impl ShiftType {
    pub const ALL: [ShiftType; 5] = [
        ShiftType::None,
        ShiftType::Covariate,
        ShiftType::Conditional,
        ShiftType::Label,
        ShiftType::Combined,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ShiftType::None => "none",
            ShiftType::Covariate => "covariate",
            ShiftType::Conditional => "conditional",
            ShiftType::Label => "label",
            ShiftType::Combined => "combined",
        }
    }

    pub fn allows(&self, class: ParamClass) -> bool {
        match self {
            ShiftType::None => false,
            ShiftType::Covariate => class == ParamClass::Marginal,
            ShiftType::Conditional => class == ParamClass::Link,
            ShiftType::Label => class == ParamClass::Label,
            ShiftType::Combined => true,
        }
    }
}

impl std::fmt::Display for ShiftType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ShiftType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ShiftType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown shift type `{s}`")))
    }
}

/// Which distributional component a generator parameter controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    /// Feature location, scale, noise and base class propensities.
    Marginal,
    /// Parameters linking R to X.
    Link,
    /// Recovery-rate mixture parameters.
    Label,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    /// `value + intensity * step`
    #[default]
    Add,
    /// `value * step ^ intensity`
    Scale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub param: String,
    pub step: f64,
    #[serde(default)]
    pub mode: StepMode,
}

impl Perturbation {
    pub fn add(param: impl Into<String>, step: f64) -> Self {
        Self {
            param: param.into(),
            step,
            mode: StepMode::Add,
        }
    }

    pub fn scale(param: impl Into<String>, step: f64) -> Self {
        Self {
            param: param.into(),
            step,
            mode: StepMode::Scale,
        }
    }
}

/// A shift of a given type and intensity, expressed as unit-step
/// perturbations of named generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub shift_type: ShiftType,
    pub intensity: f64,
    #[serde(default)]
    pub perturbations: Vec<Perturbation>,
    /// Anchor the features to the unshifted mixture so that changes to the
    /// recovery mixture do not leak into P(X).
    #[serde(default)]
    pub hold_features: bool,
}

impl ShiftSpec {
    pub fn none() -> Self {
        Self {
            shift_type: ShiftType::None,
            intensity: 0.0,
            perturbations: Vec::new(),
            hold_features: false,
        }
    }

    pub fn new(shift_type: ShiftType, intensity: f64, perturbations: Vec<Perturbation>) -> Self {
        Self {
            shift_type,
            intensity,
            perturbations,
            hold_features: false,
        }
    }

    /// The default perturbation map of `shift_type` for `base`.
    pub fn standard(shift_type: ShiftType, intensity: f64, base: &GeneratorConfig) -> Self {
        let perturbations = match shift_type {
            ShiftType::None => Vec::new(),
            ShiftType::Covariate => covariate_map(base),
            ShiftType::Conditional => conditional_map(),
            ShiftType::Label => label_map(),
            ShiftType::Combined => {
                let mut all = covariate_map(base);
                all.extend(conditional_map());
                all.extend(label_map());
                all
            }
        };
        Self {
            hold_features: matches!(shift_type, ShiftType::Label | ShiftType::Combined),
            ..Self::new(shift_type, intensity, perturbations)
        }
    }
}

fn covariate_map(base: &GeneratorConfig) -> Vec<Perturbation> {
    let mut out = Vec::new();
    for f in &base.features {
        let name = &f.name;
        match &f.rule {
            FeatureRule::Linear { .. } => {
                out.push(Perturbation::add(
                    format!("feature.{name}.intercept"),
                    COVARIATE_LOCATION_STEP,
                ));
                out.push(Perturbation::scale(
                    format!("feature.{name}.noise_sd"),
                    COVARIATE_NOISE_FACTOR,
                ));
            }
            FeatureRule::Nonlinear { .. } | FeatureRule::Custom { .. } => {
                out.push(Perturbation::add(
                    format!("feature.{name}.warp_loc"),
                    COVARIATE_LOCATION_STEP,
                ));
                out.push(Perturbation::scale(
                    format!("feature.{name}.noise_sd"),
                    COVARIATE_NOISE_FACTOR,
                ));
            }
            FeatureRule::Interaction { .. } => {}
            FeatureRule::Categorical { classes, .. } => {
                out.push(Perturbation::add(
                    format!("feature.{name}.w0[{}]", classes[0].label),
                    COVARIATE_CATEGORY_STEP,
                ));
            }
        }
    }
    out
}

fn conditional_map() -> Vec<Perturbation> {
    vec![Perturbation::add("link.reflection", CONDITIONAL_REFLECTION_STEP)]
}

fn label_map() -> Vec<Perturbation> {
    vec![Perturbation::add("mixture.pi", LABEL_PI_STEP)]
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Bounds {
    Free,
    Unit,
    NonNegative,
    Positive,
}

impl Bounds {
    fn clamp(self, v: f64) -> f64 {
        match self {
            Bounds::Free => v,
            Bounds::Unit => v.clamp(0.0, 1.0),
            Bounds::NonNegative => v.max(0.0),
            Bounds::Positive => v.max(1e-6),
        }
    }
}

fn param_slot<'a>(
    cfg: &'a mut GeneratorConfig,
    path: &str,
) -> Result<(ParamClass, Bounds, &'a mut f64)> {
    let unknown = || Error::ShiftValidation(format!("unknown generator parameter `{path}`"));
    if let Some(rest) = path.strip_prefix("mixture.") {
        let m = &mut cfg.mixture;
        let (slot, bounds) = match rest {
            "pi" => (&mut m.pi, Bounds::Unit),
            "mu_secured" => (&mut m.mu_secured, Bounds::Unit),
            "mu_unsecured" => (&mut m.mu_unsecured, Bounds::Unit),
            "sigma_secured" => (&mut m.sigma_secured, Bounds::Positive),
            "sigma_unsecured" => (&mut m.sigma_unsecured, Bounds::Positive),
            _ => return Err(unknown()),
        };
        return Ok((ParamClass::Label, bounds, slot));
    }
    if path == "link.reflection" {
        return Ok((ParamClass::Link, Bounds::Unit, &mut cfg.link.reflection));
    }
    let rest = path.strip_prefix("feature.").ok_or_else(unknown)?;
    let (name, field) = rest.split_once('.').ok_or_else(unknown)?;
    let spec = cfg
        .features
        .iter_mut()
        .find(|f| f.name == name)
        .ok_or_else(|| Error::ShiftValidation(format!("`{path}`: no feature `{name}`")))?;
    match field {
        "warp_loc" => return Ok((ParamClass::Marginal, Bounds::Free, &mut spec.warp.loc)),
        "warp_scale" => return Ok((ParamClass::Marginal, Bounds::Free, &mut spec.warp.scale)),
        _ => {}
    }
    match (&mut spec.rule, field) {
        (FeatureRule::Linear { intercept, .. }, "intercept") => {
            Ok((ParamClass::Marginal, Bounds::Free, intercept))
        }
        (FeatureRule::Linear { skew, .. }, "skew") => Ok((ParamClass::Marginal, Bounds::Free, skew)),
        (
            FeatureRule::Linear { noise_sd, .. }
            | FeatureRule::Nonlinear { noise_sd, .. }
            | FeatureRule::Custom { noise_sd, .. },
            "noise_sd",
        ) => Ok((ParamClass::Marginal, Bounds::NonNegative, noise_sd)),
        (FeatureRule::Linear { beta, .. } | FeatureRule::Nonlinear { beta, .. }, "beta") => {
            Ok((ParamClass::Link, Bounds::Free, beta))
        }
        (FeatureRule::Nonlinear { function, .. }, f) if f.starts_with("fn.") => {
            let p = &f[3..];
            let slot = match (function, p) {
                (BaseFunction::Sigmoid { steepness, .. }, "steepness") => steepness,
                (BaseFunction::Sigmoid { midpoint, .. }, "midpoint") => midpoint,
                (BaseFunction::Sine { frequency, .. }, "frequency") => frequency,
                (BaseFunction::Sine { phase, .. }, "phase") => phase,
                (BaseFunction::Exponential { rate }, "rate") => rate,
                (BaseFunction::Polynomial { coefficients }, p) => {
                    let idx = p
                        .strip_prefix("coef[")
                        .and_then(|s| s.strip_suffix(']'))
                        .and_then(|s| s.parse::<usize>().ok())
                        .ok_or_else(unknown)?;
                    coefficients.get_mut(idx).ok_or_else(unknown)?
                }
                _ => return Err(unknown()),
            };
            Ok((ParamClass::Link, Bounds::Free, slot))
        }
        (FeatureRule::Categorical { tau_cat, .. }, "tau_cat") => {
            Ok((ParamClass::Marginal, Bounds::NonNegative, tau_cat))
        }
        (FeatureRule::Categorical { classes, .. }, f) if f.len() > 3 && f.starts_with('w') => {
            let (weight, label) = f.split_once('[').ok_or_else(unknown)?;
            let label = label.strip_suffix(']').ok_or_else(unknown)?;
            let class = classes
                .iter_mut()
                .find(|c| c.label == label)
                .ok_or_else(unknown)?;
            match weight {
                "w0" => Ok((ParamClass::Marginal, Bounds::Free, &mut class.w0)),
                "w1" => Ok((ParamClass::Link, Bounds::Free, &mut class.w1)),
                "w2" => Ok((ParamClass::Link, Bounds::Free, &mut class.w2)),
                "w3" => Ok((ParamClass::Link, Bounds::Free, &mut class.w3)),
                _ => Err(unknown()),
            }
        }
        _ => Err(unknown()),
    }
}

/// Classify a parameter path without modifying anything.
pub fn param_class(cfg: &GeneratorConfig, path: &str) -> Result<ParamClass> {
    let mut scratch = cfg.clone();
    param_slot(&mut scratch, path).map(|(class, _, _)| class)
}

/// Every perturbable scalar of `cfg` with its path and class.
pub fn parameter_table(cfg: &GeneratorConfig) -> Vec<(String, ParamClass, f64)> {
    let mut paths: Vec<String> = [
        "mixture.pi",
        "mixture.mu_secured",
        "mixture.mu_unsecured",
        "mixture.sigma_secured",
        "mixture.sigma_unsecured",
        "link.reflection",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for f in &cfg.features {
        let n = &f.name;
        paths.push(format!("feature.{n}.warp_loc"));
        paths.push(format!("feature.{n}.warp_scale"));
        match &f.rule {
            FeatureRule::Linear { .. } => {
                for p in ["intercept", "skew", "noise_sd", "beta"] {
                    paths.push(format!("feature.{n}.{p}"));
                }
            }
            FeatureRule::Nonlinear { function, .. } => {
                paths.push(format!("feature.{n}.noise_sd"));
                paths.push(format!("feature.{n}.beta"));
                match function {
                    BaseFunction::Polynomial { coefficients } => {
                        for i in 0..coefficients.len() {
                            paths.push(format!("feature.{n}.fn.coef[{i}]"));
                        }
                    }
                    BaseFunction::Sine { .. } => {
                        paths.push(format!("feature.{n}.fn.frequency"));
                        paths.push(format!("feature.{n}.fn.phase"));
                    }
                    BaseFunction::Exponential { .. } => paths.push(format!("feature.{n}.fn.rate")),
                    BaseFunction::Sigmoid { .. } => {
                        paths.push(format!("feature.{n}.fn.steepness"));
                        paths.push(format!("feature.{n}.fn.midpoint"));
                    }
                }
            }
            FeatureRule::Custom { .. } => paths.push(format!("feature.{n}.noise_sd")),
            FeatureRule::Interaction { .. } => {}
            FeatureRule::Categorical { classes, .. } => {
                paths.push(format!("feature.{n}.tau_cat"));
                for c in classes {
                    for w in ["w0", "w1", "w2", "w3"] {
                        paths.push(format!("feature.{n}.{w}[{}]", c.label));
                    }
                }
            }
        }
    }
    let mut scratch = cfg.clone();
    paths
        .into_iter()
        .map(|p| {
            let (class, _, slot) = param_slot(&mut scratch, &p).expect("enumerated path");
            let v = *slot;
            (p, class, v)
        })
        .collect()
}

/// Apply `shift` to a copy of `base`. The base is never modified.
pub fn apply_shift(base: &GeneratorConfig, shift: &ShiftSpec) -> Result<GeneratorConfig> {
    let s = shift.intensity;
    if !(s.is_finite() && s >= 0.0) {
        return Err(Error::ShiftValidation(format!("intensity {s} must be finite and >= 0")));
    }
    let mut out = base.clone();
    for p in &shift.perturbations {
        let (class, bounds, slot) = param_slot(&mut out, &p.param)?;
        if !shift.shift_type.allows(class) {
            return Err(Error::ShiftValidation(format!(
                "{} shift may not touch `{}` ({class:?} parameter)",
                shift.shift_type, p.param
            )));
        }
        if !p.step.is_finite() || (p.mode == StepMode::Scale && p.step <= 0.0) {
            return Err(Error::ShiftValidation(format!("bad step for `{}`", p.param)));
        }
        if s == 0.0 {
            continue;
        }
        let v = match p.mode {
            StepMode::Add => *slot + s * p.step,
            StepMode::Scale => *slot * p.step.powf(s),
        };
        *slot = bounds.clamp(v);
    }
    if shift.hold_features && out.link.anchor.is_none() && out.mixture != base.mixture {
        out.link.anchor = Some(base.mixture);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, Domain};
    use proptest::prelude::*;

    fn base() -> GeneratorConfig {
        GeneratorConfig::default()
    }

    #[test]
    fn none_is_identity() {
        let b = base();
        assert_eq!(apply_shift(&b, &ShiftSpec::none()).unwrap(), b);
        let zero = ShiftSpec::standard(ShiftType::Combined, 0.0, &b);
        assert_eq!(apply_shift(&b, &zero).unwrap(), b);
    }

    #[test]
    fn none_with_perturbation_is_rejected() {
        let spec = ShiftSpec::new(ShiftType::None, 1.0, vec![Perturbation::add("mixture.pi", 0.1)]);
        assert!(matches!(apply_shift(&base(), &spec), Err(Error::ShiftValidation(_))));
    }

    #[test]
    fn label_shift_edits_only_pi() {
        let b = base();
        let spec = ShiftSpec::new(ShiftType::Label, 1.0, vec![Perturbation::add("mixture.pi", -0.3)]);
        let out = apply_shift(&b, &spec).unwrap();
        assert!((out.mixture.pi - 0.4).abs() < 1e-12);
        assert_eq!(out.features, b.features);
        assert_eq!(b.mixture.pi, 0.7);
    }

    #[test]
    fn forbidden_parameters_rejected() {
        let b = base();
        let cases = [
            (ShiftType::Covariate, "feature.collateral_ratio.beta"),
            (ShiftType::Covariate, "mixture.pi"),
            (ShiftType::Conditional, "feature.collateral_ratio.intercept"),
            (ShiftType::Conditional, "mixture.pi"),
            (ShiftType::Label, "feature.leverage.noise_sd"),
            (ShiftType::Label, "link.reflection"),
        ];
        for (t, p) in cases {
            let spec = ShiftSpec::new(t, 1.0, vec![Perturbation::add(p, 0.1)]);
            assert!(apply_shift(&b, &spec).is_err(), "{t} {p}");
        }
        let spec = ShiftSpec::new(ShiftType::Combined, 1.0, vec![Perturbation::add("feature.nope.beta", 1.0)]);
        assert!(apply_shift(&b, &spec).is_err());
    }

    #[test]
    fn covariate_intercept_moves_mean_not_correlation() {
        let b = base();
        let spec = ShiftSpec::new(
            ShiftType::Covariate,
            2.0,
            vec![Perturbation::add("feature.collateral_ratio.intercept", 1.0)],
        );
        let shifted = apply_shift(&b, &spec).unwrap();
        let n = 50_000;
        let d0 = generate_dataset(&b, n, 3, Domain::Source).unwrap();
        let d1 = generate_dataset(&shifted, n, 4, Domain::Target).unwrap();
        let stats = |d: &crate::datagen::SimDataset| {
            let x = d.column("collateral_ratio").unwrap().numeric().unwrap();
            let r = &d.recovery;
            let m = x.iter().sum::<f64>() / n as f64;
            let mr = r.iter().sum::<f64>() / n as f64;
            let cov: f64 = x.iter().zip(r).map(|(a, b)| (a - m) * (b - mr)).sum();
            let vx: f64 = x.iter().map(|a| (a - m).powi(2)).sum();
            let vr: f64 = r.iter().map(|b| (b - mr).powi(2)).sum();
            (m, cov / (vx * vr).sqrt())
        };
        let (m0, c0) = stats(&d0);
        let (m1, c1) = stats(&d1);
        // MC error of the mean difference is ~0.006, of the correlation ~0.004.
        assert!((m1 - m0 - 2.0).abs() < 0.03, "{m0} {m1}");
        assert!((c1 - c0).abs() < 0.02, "{c0} {c1}");
    }

    #[test]
    fn scale_steps_are_multiplicative() {
        let b = base();
        let spec = ShiftSpec::new(
            ShiftType::Covariate,
            2.0,
            vec![Perturbation::scale("feature.leverage.noise_sd", 2.0)],
        );
        let out = apply_shift(&b, &spec).unwrap();
        let get = |c: &GeneratorConfig| {
            parameter_table(c)
                .into_iter()
                .find(|(p, _, _)| p == "feature.leverage.noise_sd")
                .unwrap()
                .2
        };
        assert!((get(&out) - 4.0 * get(&b)).abs() < 1e-12);
    }

    #[test]
    fn standard_label_shift_holds_feature_marginals() {
        let b = base();
        let spec = ShiftSpec::standard(ShiftType::Label, 3.0, &b);
        assert!(spec.hold_features);
        let shifted = apply_shift(&b, &spec).unwrap();
        assert_eq!(shifted.link.anchor, Some(b.mixture));
        let n = 40_000;
        let d0 = generate_dataset(&b, n, 11, Domain::Source).unwrap();
        let d1 = generate_dataset(&shifted, n, 12, Domain::Target).unwrap();
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let x = |d: &crate::datagen::SimDataset| d.column("collateral_ratio").unwrap().numeric().unwrap().to_vec();
        // Feature means agree to MC error; the recovery mean drops by roughly
        // 0.45 * (0.98 - 0.18).
        assert!((mean(&x(&d0)) - mean(&x(&d1))).abs() < 0.06);
        let dr = mean(&d0.recovery) - mean(&d1.recovery);
        assert!(dr > 0.3, "{dr}");

        let mut loose = spec.clone();
        loose.hold_features = false;
        assert_eq!(apply_shift(&b, &loose).unwrap().link.anchor, None);
    }

    #[test]
    fn label_shift_lowers_mean_recovery_in_every_seed() {
        let b = base();
        let spec = ShiftSpec::new(ShiftType::Label, 1.0, vec![Perturbation::add("mixture.pi", -0.5)]);
        let shifted = apply_shift(&b, &spec).unwrap();
        assert!((shifted.mixture.pi - 0.2).abs() < 1e-12);
        let mean = |d: &crate::datagen::SimDataset| d.recovery.iter().sum::<f64>() / d.len() as f64;
        for seed in 0..10 {
            let s = generate_dataset(&b, 1000, 2 * seed, Domain::Source).unwrap();
            let t = generate_dataset(&shifted, 1000, 2 * seed + 1, Domain::Target).unwrap();
            assert!(mean(&t) < mean(&s), "seed {seed}");
        }
    }

    fn changed(a: &GeneratorConfig, b: &GeneratorConfig) -> Vec<(String, ParamClass)> {
        parameter_table(a)
            .into_iter()
            .zip(parameter_table(b))
            .filter(|(x, y)| x.2.to_bits() != y.2.to_bits())
            .map(|(x, _)| (x.0, x.1))
            .collect()
    }

    proptest! {
        #[test]
        fn standard_shifts_respect_isolation(s in 0.0f64..4.0, t in 0usize..5) {
            let b = base();
            let shift_type = ShiftType::ALL[t];
            let out = apply_shift(&b, &ShiftSpec::standard(shift_type, s, &b)).unwrap();
            for (path, class) in changed(&b, &out) {
                prop_assert!(shift_type.allows(class), "{} changed {}", shift_type, path);
            }
        }

        #[test]
        fn perturbation_monotone_in_intensity(s1 in 0.0f64..3.0, ds in 0.0f64..1.0) {
            let b = base();
            for t in [ShiftType::Covariate, ShiftType::Conditional, ShiftType::Label] {
                let lo = apply_shift(&b, &ShiftSpec::standard(t, s1, &b)).unwrap();
                let hi = apply_shift(&b, &ShiftSpec::standard(t, s1 + ds, &b)).unwrap();
                let tb = parameter_table(&b);
                for ((base_row, lo_row), hi_row) in tb.iter().zip(parameter_table(&lo)).zip(parameter_table(&hi)) {
                    prop_assert!((hi_row.2 - base_row.2).abs() + 1e-12 >= (lo_row.2 - base_row.2).abs());
                }
            }
        }
    }
}
