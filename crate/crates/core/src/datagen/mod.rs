//! Synthetic recovery-rate portfolios: a two-component mixture for the
//! target, features generated conditionally on it, and typed shifts between
//! a source and a target domain.

mod dataset;
mod features;
mod mixture;
pub mod shift;

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use dataset::{sidecar_path, Column, ColumnData, DatasetMeta, Domain, SimDataset};
pub use features::{
    gen_categorical_feature, gen_numeric_feature, gen_numeric_feature_with, BaseFunction,
    ClassWeights, Combine, CustomFns, FeatureKind, FeatureRule, FeatureSpec, Warp,
};
pub use mixture::{
    log_normal_pdf, mixture_cdf, normal_cdf, normal_pdf, sample_recovery_rates, RecoveryDraws,
    RrMixtureConfig,
};
pub use shift::{apply_shift, ParamClass, Perturbation, ShiftSpec, ShiftType, StepMode};

use crate::error::{Error, Result};
use crate::seeds;

/// Parameters of the link between R and the features that are not tied to a
/// single feature.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LinkConfig {
    /// Probability that a row's features are generated from the reflected
    /// draw `F^-1(1 - u)` instead of its own recovery rate. Leaves the
    /// feature marginals untouched while weakening `P(R | X)`.
    #[serde(default)]
    pub reflection: f64,
    /// Mixture whose quantile at the row's uniform drives the features. When
    /// set, changing `mixture` moves R but leaves the feature marginals alone.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<RrMixtureConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub schema_id: String,
    pub mixture: RrMixtureConfig,
    #[serde(default)]
    pub link: LinkConfig,
    pub features: Vec<FeatureSpec>,
}

fn linear(name: &str, beta: f64, intercept: f64, noise_sd: f64, skew: f64) -> FeatureSpec {
    FeatureSpec {
        name: name.into(),
        rule: FeatureRule::Linear {
            beta,
            intercept,
            noise_sd,
            skew,
        },
        warp: Warp::default(),
    }
}

fn class(label: &str, w: [f64; 4]) -> ClassWeights {
    ClassWeights {
        label: label.into(),
        w0: w[0],
        w1: w[1],
        w2: w[2],
        w3: w[3],
    }
}

impl Default for GeneratorConfig {
    /// Eight-feature portfolio archetype.
    fn default() -> Self {
        let features = vec![
            linear("collateral_ratio", 2.0, 0.2, 1.8, 0.0),
            linear("seniority_score", 1.6, -0.3, 2.4, 4.0),
            linear("leverage", -1.5, 1.5, 2.4, 0.0),
            linear("macro_gdp", 0.8, 0.0, 2.7, 0.0),
            FeatureSpec {
                name: "size_poly".into(),
                rule: FeatureRule::Nonlinear {
                    beta: 2.5,
                    function: BaseFunction::Polynomial {
                        coefficients: vec![0.0, 0.0, 1.0],
                    },
                    noise_sd: 1.8,
                },
                warp: Warp::default(),
            },
            FeatureSpec {
                name: "rating_sig".into(),
                rule: FeatureRule::Nonlinear {
                    beta: 2.0,
                    function: BaseFunction::Sigmoid {
                        steepness: 10.0,
                        midpoint: 0.5,
                    },
                    noise_sd: 1.8,
                },
                warp: Warp::default(),
            },
            FeatureSpec {
                name: "coll_x_lev".into(),
                rule: FeatureRule::Interaction {
                    parent_a: "collateral_ratio".into(),
                    parent_b: "leverage".into(),
                    combine: Combine::Multiply,
                },
                warp: Warp::default(),
            },
            FeatureSpec {
                name: "sector".into(),
                rule: FeatureRule::Categorical {
                    classes: vec![
                        class("consumer", [0.0, 0.0, 0.0, 0.0]),
                        class("energy", [0.5, -1.5, 0.0, 0.0]),
                        class("industrial", [-0.5, 1.0, 0.5, 0.5]),
                        class("realestate", [-1.0, 0.0, 0.0, 1.5]),
                    ],
                    tau_cat: 0.5,
                },
                warp: Warp::default(),
            },
        ];
        Self {
            schema_id: "portfolio8".into(),
            mixture: RrMixtureConfig::default(),
            link: LinkConfig::default(),
            features,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        self.validate_with(&CustomFns::builtin())
    }

    pub fn validate_with(&self, custom: &CustomFns) -> Result<()> {
        self.mixture.validate()?;
        let rho = self.link.reflection;
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::Config(format!("link.reflection {rho} outside [0, 1]")));
        }
        if let Some(a) = &self.link.anchor {
            a.validate()?;
        }
        if self.features.is_empty() {
            return Err(Error::Config("generator needs at least one feature".into()));
        }
        features::validate_features(&self.features, custom)
    }

    pub fn feature(&self, name: &str) -> Option<&FeatureSpec> {
        self.features.iter().find(|f| f.name == name)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: GeneratorConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }
}

/// Generate `n` rows from `config`.
pub fn generate_dataset(
    config: &GeneratorConfig,
    n: usize,
    seed: u64,
    domain: Domain,
) -> Result<SimDataset> {
    generate_dataset_with(config, n, seed, domain, &CustomFns::builtin())
}

pub fn generate_dataset_with(
    config: &GeneratorConfig,
    n: usize,
    seed: u64,
    domain: Domain,
    custom: &CustomFns,
) -> Result<SimDataset> {
    config.validate_with(custom)?;
    let draws = mixture::draw_recovery(&config.mixture, n, seed)?;

    // Features see a driver that equals R except on reflected or anchored rows.
    let rho = config.link.reflection;
    let (driver, driver_secured) = if rho > 0.0 || config.link.anchor.is_some() {
        let mix = config.link.anchor.as_ref().unwrap_or(&config.mixture);
        let mut rng = seeds::derive_rng(seed, "link");
        let mut driver = Vec::with_capacity(n);
        let mut secured = Vec::with_capacity(n);
        for &u in &draws.uniforms {
            let reflect = rho > 0.0 && rng.random::<f64>() < rho;
            let raw = mix.quantile(if reflect { 1.0 - u } else { u });
            driver.push(raw.clamp(0.0, 1.0));
            secured.push(mix.is_secured(raw));
        }
        (driver, secured)
    } else {
        (draws.values.clone(), draws.secured.clone())
    };

    let mut numeric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut columns = Vec::with_capacity(config.features.len());
    for spec in &config.features {
        let data = match spec.kind() {
            FeatureKind::Numeric => {
                let x = gen_numeric_feature_with(spec, &driver, &numeric, seed, custom)?;
                numeric.insert(spec.name.clone(), x.clone());
                ColumnData::Numeric(x)
            }
            FeatureKind::Categorical => ColumnData::Categorical {
                codes: gen_categorical_feature(spec, &driver, &driver_secured, seed)?,
                labels: spec.labels(),
            },
        };
        columns.push(Column {
            name: spec.name.clone(),
            data,
        });
    }
    Ok(SimDataset {
        columns,
        recovery: draws.values,
        secured: draws.secured,
        schema_id: config.schema_id.clone(),
        domain,
        seed,
    })
}

/// A source sample from `base` and a target sample from the shifted
/// generator, on independent sub-seeds of `seed`.
pub fn generate_domain_pair(
    base: &GeneratorConfig,
    shift: &ShiftSpec,
    n_source: usize,
    n_target: usize,
    seed: u64,
) -> Result<(SimDataset, SimDataset)> {
    let shifted = apply_shift(base, shift)?;
    let source = generate_dataset(base, n_source, seeds::derive(seed, "source"), Domain::Source)?;
    let target = generate_dataset(&shifted, n_target, seeds::derive(seed, "target"), Domain::Target)?;
    Ok((source, target))
}
