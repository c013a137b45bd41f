use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::mlp::MlpModel;
use super::train::{train_model, FreezeSchedule, Phase, TrainTrace};
use super::{PretrainFeatures, TrainOpts};
use crate::datagen::{FeatureKind, SimDataset};
use crate::error::{Error, Result};
use crate::model::{FtModel, HeadKind, ModelConfig, Predictions, TokenFeature};
use crate::schema::{encode, Preprocessor, Schema};

/// Model roster entry.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum ModelKind {
    FtMdn,
    FtReg,
    Mlp,
    /// Plug-in registered under `ext:<name>`.
    External(String),
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::FtMdn => f.write_str("ft_mdn"),
            ModelKind::FtReg => f.write_str("ft_reg"),
            ModelKind::Mlp => f.write_str("mlp"),
            ModelKind::External(n) => write!(f, "ext:{n}"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ft_mdn" => ModelKind::FtMdn,
            "ft_reg" => ModelKind::FtReg,
            "mlp" => ModelKind::Mlp,
            _ => match s.strip_prefix("ext:") {
                Some(n) if !n.is_empty() => ModelKind::External(n.to_string()),
                _ => return Err(Error::Config(format!("unknown model `{s}`"))),
            },
        })
    }
}

impl TryFrom<String> for ModelKind {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<ModelKind> for String {
    fn from(k: ModelKind) -> String {
        k.to_string()
    }
}

impl ModelKind {
    /// Pretraining feature set used when none is configured.
    pub fn default_pretrain(&self) -> PretrainFeatures {
        match self {
            ModelKind::Mlp => PretrainFeatures::SharedOnly,
            _ => PretrainFeatures::FullSource,
        }
    }
}

/// How one fit call should run.
#[derive(Debug, Clone)]
pub struct FitPlan {
    pub opts: TrainOpts,
    pub phase: Phase,
    pub lr: f64,
    /// Warm-up epochs and the shared features whose tokens stay frozen.
    pub warm: Option<(usize, Vec<String>)>,
}

/// A model that can take part in the three evaluation scenarios.
pub trait Learner: Send {
    /// Build fresh parameters over the token slots of `schema`.
    fn initialize(&mut self, schema: &Schema, prep: &Preprocessor, seed: u64) -> Result<()>;
    /// Carry the current parameters over to `schema` (source ∪ target).
    fn reconfigure(&mut self, schema: &Schema, prep: &Preprocessor, seed: u64) -> Result<()>;
    fn fit(&mut self, train: &SimDataset, val: &SimDataset, prep: &Preprocessor, plan: &FitPlan) -> Result<TrainTrace>;
    fn predict(&self, data: &SimDataset, prep: &Preprocessor) -> Result<Predictions>;
}

pub type LearnerFactory = Arc<dyn Fn() -> Box<dyn Learner> + Send + Sync>;

/// Factories for `ext:<name>` models.
#[derive(Clone, Default)]
pub struct LearnerRegistry {
    external: BTreeMap<String, LearnerFactory>,
}

impl fmt::Debug for LearnerRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.external.keys()).finish()
    }
}

impl LearnerRegistry {
    pub fn register(&mut self, name: &str, factory: impl Fn() -> Box<dyn Learner> + Send + Sync + 'static) {
        self.external.insert(name.to_string(), Arc::new(factory));
    }

    pub fn create(&self, kind: &ModelKind, settings: &LearnerSettings) -> Result<Box<dyn Learner>> {
        Ok(match kind {
            ModelKind::FtMdn => Box::new(FtLearner::new(settings.model, HeadKind::Mdn)),
            ModelKind::FtReg => Box::new(FtLearner::new(settings.model, HeadKind::Reg)),
            ModelKind::Mlp => Box::new(MlpLearner::new(settings.mlp_hidden)),
            ModelKind::External(name) => {
                let f = self
                    .external
                    .get(name)
                    .ok_or_else(|| Error::Config(format!("no plug-in registered as `ext:{name}`")))?;
                f()
            }
        })
    }
}

/// Architecture settings shared by the built-in learners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearnerSettings {
    pub model: ModelConfig,
    pub mlp_hidden: usize,
}

impl Default for LearnerSettings {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            mlp_hidden: 64,
        }
    }
}

fn token_features(schema: &Schema, prep: &Preprocessor) -> Result<Vec<TokenFeature>> {
    schema
        .features
        .iter()
        .map(|f| {
            Ok(TokenFeature {
                name: f.name.clone(),
                kind: f.kind,
                categories: match f.kind {
                    FeatureKind::Numeric => Vec::new(),
                    FeatureKind::Categorical => prep
                        .vocab
                        .labels(&f.name)
                        .ok_or_else(|| Error::Schema(format!("no vocabulary for `{}`", f.name)))?
                        .to_vec(),
                },
            })
        })
        .collect()
}

pub struct FtLearner {
    config: ModelConfig,
    head: HeadKind,
    pub model: Option<FtModel>,
}

impl FtLearner {
    pub fn new(config: ModelConfig, head: HeadKind) -> Self {
        Self {
            config,
            head,
            model: None,
        }
    }

    fn model(&self) -> Result<&FtModel> {
        self.model.as_ref().ok_or_else(|| Error::Config("learner used before initialize".into()))
    }
}

/// Warm-up freeze: shared-feature tokens, CLS, PAD and the first block.
pub fn warm_freeze(model: &FtModel, epochs: usize, shared: &[String]) -> FreezeSchedule {
    let mut names = model.feature_param_names(shared);
    names.push("cls".into());
    names.push("pad".into());
    let mut groups = vec!["shared_tokens".to_string(), "cls".into(), "pad".into()];
    if model.config.blocks > 0 {
        names.extend(model.params.iter().map(|p| p.name.clone()).filter(|n| n.starts_with("block0.")));
        groups.push("block0".into());
    }
    FreezeSchedule {
        epochs,
        ids: names.iter().filter_map(|n| model.params.id(n)).collect(),
        groups,
    }
}

impl Learner for FtLearner {
    fn initialize(&mut self, schema: &Schema, prep: &Preprocessor, seed: u64) -> Result<()> {
        self.model = Some(FtModel::new(self.config, self.head, schema, &prep.vocab, seed)?);
        Ok(())
    }

    fn reconfigure(&mut self, schema: &Schema, prep: &Preprocessor, seed: u64) -> Result<()> {
        let next = self.model()?.reconfigure_for_schema(schema, &prep.vocab, seed)?;
        self.model = Some(next);
        Ok(())
    }

    fn fit(&mut self, train: &SimDataset, val: &SimDataset, prep: &Preprocessor, plan: &FitPlan) -> Result<TrainTrace> {
        let model = self.model.as_mut().ok_or_else(|| Error::Config("learner used before initialize".into()))?;
        let schema = model.schema();
        let (tr, va) = (encode(train, &schema, prep)?, encode(val, &schema, prep)?);
        let freeze = match &plan.warm {
            Some((epochs, shared)) => warm_freeze(model, *epochs, shared),
            None => FreezeSchedule::none(),
        };
        train_model(model, &tr, &va, &plan.opts, plan.phase, plan.lr, &freeze)
    }

    fn predict(&self, data: &SimDataset, prep: &Preprocessor) -> Result<Predictions> {
        let model = self.model()?;
        model.predict(&encode(data, &model.schema(), prep)?)
    }
}

pub struct MlpLearner {
    hidden: usize,
    pub model: Option<MlpModel>,
}

impl MlpLearner {
    pub fn new(hidden: usize) -> Self {
        Self { hidden, model: None }
    }

    fn model(&self) -> Result<&MlpModel> {
        self.model.as_ref().ok_or_else(|| Error::Config("learner used before initialize".into()))
    }
}

fn slot_schema(features: &[TokenFeature]) -> Schema {
    let typed: Vec<(String, FeatureKind)> = features.iter().map(|f| (f.name.clone(), f.kind)).collect();
    Schema::single(&typed).expect("unique slots")
}

impl Learner for MlpLearner {
    fn initialize(&mut self, schema: &Schema, prep: &Preprocessor, seed: u64) -> Result<()> {
        self.model = Some(MlpModel::new(token_features(schema, prep)?, self.hidden, seed)?);
        Ok(())
    }

    /// Input-layer surgery onto the target features of `schema`.
    fn reconfigure(&mut self, schema: &Schema, prep: &Preprocessor, seed: u64) -> Result<()> {
        let target = schema.restrict(&schema.target_features().into_iter().map(|f| f.0).collect::<Vec<_>>());
        let next = self.model()?.with_features(token_features(&target, prep)?, seed)?;
        self.model = Some(next);
        Ok(())
    }

    fn fit(&mut self, train: &SimDataset, val: &SimDataset, prep: &Preprocessor, plan: &FitPlan) -> Result<TrainTrace> {
        let model = self.model.as_mut().ok_or_else(|| Error::Config("learner used before initialize".into()))?;
        let schema = slot_schema(&model.features);
        let (tr, va) = (encode(train, &schema, prep)?, encode(val, &schema, prep)?);
        train_model(model, &tr, &va, &plan.opts, plan.phase, plan.lr, &FreezeSchedule::none())
    }

    fn predict(&self, data: &SimDataset, prep: &Preprocessor) -> Result<Predictions> {
        let model = self.model()?;
        crate::transfer::train::Trainable::predict(model, &encode(data, &slot_schema(&model.features), prep)?)
    }
}
