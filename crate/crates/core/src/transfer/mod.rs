//! Training loops, the two-stage transfer schedule and the three evaluation
//! scenarios.

mod learner;
mod mlp;
mod train;

use serde::{Deserialize, Serialize};

pub use learner::{
    warm_freeze, FitPlan, FtLearner, Learner, LearnerFactory, LearnerRegistry, LearnerSettings, MlpLearner,
    ModelKind,
};
pub use mlp::MlpModel;
pub use train::{epoch_lr, train_model, EarlyStopping, EpochRecord, FreezeSchedule, Phase, TrainTrace, Trainable};

use crate::datagen::SimDataset;
use crate::error::{Error, Result};
use crate::metrics::{density_grid, evaluate, portfolio_density, MetricRecord, PortfolioDensity};
use crate::model::FtModel;
use crate::schema::{split_stratified, EncodedBatch, Preprocessor, Schema};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOpts {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub cosine: bool,
    pub seed: u64,
    /// Probability of masking each active feature per training batch.
    pub feature_mask_rate: f64,
}

impl Default for TrainOpts {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 128,
            max_epochs: 100,
            patience: 10,
            cosine: false,
            seed: 0,
            feature_mask_rate: 0.0,
        }
    }
}

impl TrainOpts {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("training options: {m}")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and >= 0");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be >= 0");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return bad("batch_size, max_epochs and patience must be >= 1");
        }
        if !(0.0..1.0).contains(&self.feature_mask_rate) {
            return bad("feature_mask_rate must lie in [0, 1)");
        }
        Ok(())
    }

    fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PretrainFeatures {
    SharedOnly,
    FullSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferOpts {
    /// Overrides the per-model default when set.
    pub pretrain_features: Option<PretrainFeatures>,
    pub e_warm: usize,
    pub lr_divisor: f64,
}

impl Default for TransferOpts {
    fn default() -> Self {
        Self {
            pretrain_features: None,
            e_warm: 10,
            lr_divisor: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    ZeroShot,
    TargetBaseline,
    Transfer,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::ZeroShot, Scenario::TargetBaseline, Scenario::Transfer];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::ZeroShot => "zero_shot",
            Scenario::TargetBaseline => "target_baseline",
            Scenario::Transfer => "transfer",
        }
    }
}

impl std::str::FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown scenario `{s}`")))
    }
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Source pretraining of a feature-token model; returns the best-validation weights.
pub fn pretrain(model: &mut FtModel, source_train: &EncodedBatch, source_val: &EncodedBatch, opts: &TrainOpts) -> Result<TrainTrace> {
    train_model(model, source_train, source_val, opts, Phase::Pretrain, opts.lr, &FreezeSchedule::none())
}

/// Fine-tuning of a reconfigured model at `lr / divisor`, with shared tokens,
/// CLS, PAD and the first block frozen for the first `e_warm` epochs.
pub fn finetune(
    model: &mut FtModel,
    target_train: &EncodedBatch,
    target_val: &EncodedBatch,
    opts: &TrainOpts,
    topts: &TransferOpts,
    shared: &[String],
) -> Result<TrainTrace> {
    let freeze = warm_freeze(model, topts.e_warm, shared);
    train_model(model, target_train, target_val, opts, Phase::Finetune, opts.lr / topts.lr_divisor, &freeze)
}

/// Splits and preprocessing of one source/target pair, shared by every
/// model and scenario in a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellData {
    pub source_train: SimDataset,
    pub source_val: SimDataset,
    pub target_train: SimDataset,
    pub target_val: SimDataset,
    pub schema: Schema,
    pub prep: Preprocessor,
}

impl CellData {
    pub fn prepare(source: &SimDataset, target: &SimDataset, val_fraction: f64, seed: u64) -> Result<Self> {
        let (source_train, source_val) = split_stratified(source, val_fraction, seeds::derive(seed, "split/source"))?;
        let (target_train, target_val) = split_stratified(target, val_fraction, seeds::derive(seed, "split/target"))?;
        let schema = Schema::from_datasets(source, target)?;
        let prep = Preprocessor::fit(&source_train, &target_train, &schema)?;
        Ok(Self {
            source_train,
            source_val,
            target_train,
            target_val,
            schema,
            prep,
        })
    }

    /// Content hash of the target splits.
    pub fn target_digest(&self) -> String {
        let text = format!("{}\n--\n{}", self.target_train.to_csv(), self.target_val.to_csv());
        format!("{:016x}", seeds::hash_str(&text))
    }

    pub fn pretrain_schema(&self, features: PretrainFeatures) -> Schema {
        let keep = match features {
            PretrainFeatures::SharedOnly => self.schema.shared(),
            PretrainFeatures::FullSource => self.schema.source_features().into_iter().map(|f| f.0).collect(),
        };
        self.schema.restrict(&keep)
    }

    pub fn target_schema(&self) -> Schema {
        self.schema.restrict(&self.schema.target_features().into_iter().map(|f| f.0).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutcome {
    pub model: ModelKind,
    pub scenario: Scenario,
    pub metrics: MetricRecord,
    pub traces: Vec<TrainTrace>,
    /// Portfolio density on the target validation rows (mixture heads only).
    pub density: Option<PortfolioDensity>,
    pub target_digest: String,
}

/// Everything a scenario run needs besides the data.
#[derive(Debug, Clone)]
pub struct ScenarioConfig {
    pub settings: LearnerSettings,
    pub train: TrainOpts,
    pub transfer: TransferOpts,
}

fn outcome(
    model: &ModelKind,
    scenario: Scenario,
    learner: &dyn Learner,
    cell: &CellData,
    traces: Vec<TrainTrace>,
    digest: &str,
    mu_max: f64,
) -> Result<ScenarioOutcome> {
    let pred = learner.predict(&cell.target_val, &cell.prep)?;
    let metrics = evaluate(&pred, &cell.target_val.recovery)?;
    let density = match &pred.mixtures {
        Some(m) => Some(portfolio_density(m, &density_grid(mu_max))?),
        None => None,
    };
    Ok(ScenarioOutcome {
        model: model.clone(),
        scenario,
        metrics,
        traces,
        density,
        target_digest: digest.to_string(),
    })
}

/// Run `scenarios` for one model on a prepared cell. Zero-shot and transfer
/// share one pretraining run; the result equals running them separately.
pub fn run_scenarios(
    cell: &CellData,
    model: &ModelKind,
    scenarios: &[Scenario],
    cfg: &ScenarioConfig,
    registry: &LearnerRegistry,
    seed: u64,
) -> Result<Vec<ScenarioOutcome>> {
    let digest = cell.target_digest();
    let mu_max = cfg.settings.model.mu_max;
    let tag = |what: &str| seeds::derive(seed, &format!("{model}/{what}"));
    let mut out = Vec::new();

    if scenarios.contains(&Scenario::TargetBaseline) {
        let mut learner = registry.create(model, &cfg.settings)?;
        learner.initialize(&cell.target_schema(), &cell.prep, tag("init/baseline"))?;
        let plan = FitPlan {
            opts: cfg.train.with_seed(tag("train/baseline")),
            phase: Phase::Baseline,
            lr: cfg.train.lr,
            warm: None,
        };
        let trace = learner.fit(&cell.target_train, &cell.target_val, &cell.prep, &plan)?;
        out.push(outcome(model, Scenario::TargetBaseline, learner.as_ref(), cell, vec![trace], &digest, mu_max)?);
    }

    let wants_zero = scenarios.contains(&Scenario::ZeroShot);
    let wants_transfer = scenarios.contains(&Scenario::Transfer);
    if wants_zero || wants_transfer {
        let features = cfg.transfer.pretrain_features.unwrap_or_else(|| model.default_pretrain());
        let pre_schema = cell.pretrain_schema(features);
        if pre_schema.is_empty() {
            return Err(Error::Schema("no features available for pretraining".into()));
        }
        let mut learner = registry.create(model, &cfg.settings)?;
        learner.initialize(&pre_schema, &cell.prep, tag("init/pretrain"))?;
        let plan = FitPlan {
            opts: cfg.train.with_seed(tag("train/pretrain")),
            phase: Phase::Pretrain,
            lr: cfg.train.lr,
            warm: None,
        };
        let pre = learner.fit(&cell.source_train, &cell.source_val, &cell.prep, &plan)?;
        if wants_zero {
            out.push(outcome(model, Scenario::ZeroShot, learner.as_ref(), cell, vec![pre.clone()], &digest, mu_max)?);
        }
        if wants_transfer {
            learner.reconfigure(&cell.schema, &cell.prep, tag("init/reconfigure"))?;
            let plan = FitPlan {
                opts: cfg.train.with_seed(tag("train/finetune")),
                phase: Phase::Finetune,
                lr: cfg.train.lr / cfg.transfer.lr_divisor,
                warm: Some((cfg.transfer.e_warm, cell.schema.shared())),
            };
            let fine = learner.fit(&cell.target_train, &cell.target_val, &cell.prep, &plan)?;
            out.push(outcome(model, Scenario::Transfer, learner.as_ref(), cell, vec![pre, fine], &digest, mu_max)?);
        }
    }
    out.sort_by_key(|o| o.scenario);
    Ok(out)
}

#[cfg(test)]
mod tests;
