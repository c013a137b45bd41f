//! Monte Carlo grid runner with a resumable, append-only result store.
//!
//! Store layout under the output directory:
//!
//! ```text
//! grid.toml              grid the store was created with
//! index.json             completed cells, rebuilt from records/ after every run
//! records/<cell>.jsonl   one RunRecord per (model, scenario), or one failure record
//! densities/<cell>.json  portfolio densities (only with `save_densities`)
//! timings/<cell>.json    wall-clock seconds; kept apart so records stay reproducible
//! ```

mod aggregate;
mod report;
mod selftest;
mod svg;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use aggregate::{aggregate, mean_se, GainSummary, GroupSummary, Summary};
pub use selftest::{selftest, Check};
pub use report::{ols_slope, report, shift_axis, ReportFilter, ReportKind, ReportOutput};

use crate::datagen::{generate_domain_pair, FeatureKind, GeneratorConfig, ShiftSpec, ShiftType, SimDataset};
use crate::driftdiag::{drift_report, DriftReport};
use crate::error::{Error, Result};
use crate::metrics::{MetricRecord, PortfolioDensity};
use crate::model::ModelConfig;
use crate::seeds;
use crate::transfer::{
    run_scenarios, CellData, LearnerRegistry, LearnerSettings, ModelKind, Scenario, ScenarioConfig, TrainOpts,
    TransferOpts,
};

/// Store format version; bump when the record layout changes.
pub const STORE_VERSION: u32 = 1;

/// How source and target feature sets relate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaRelation {
    Equal,
    SourceSubsetTarget,
    TargetSubsetSource,
}

impl SchemaRelation {
    pub const ALL: [SchemaRelation; 3] = [
        SchemaRelation::Equal,
        SchemaRelation::SourceSubsetTarget,
        SchemaRelation::TargetSubsetSource,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SchemaRelation::Equal => "equal",
            SchemaRelation::SourceSubsetTarget => "source_subset_target",
            SchemaRelation::TargetSubsetSource => "target_subset_source",
        }
    }

    /// Source and target feature names; the smaller side drops `drop`.
    pub fn feature_sets(&self, all: &[String], drop: &[String]) -> (Vec<String>, Vec<String>) {
        let reduced: Vec<String> = all.iter().filter(|n| !drop.contains(n)).cloned().collect();
        match self {
            SchemaRelation::Equal => (all.to_vec(), all.to_vec()),
            SchemaRelation::SourceSubsetTarget => (reduced, all.to_vec()),
            SchemaRelation::TargetSubsetSource => (all.to_vec(), reduced),
        }
    }
}

impl std::fmt::Display for SchemaRelation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SchemaRelation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown schema relation `{s}`")))
    }
}

/// Declarative experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub name: String,
    pub shift_types: Vec<ShiftType>,
    pub intensities: Vec<f64>,
    pub relations: Vec<SchemaRelation>,
    pub n_target: Vec<usize>,
    pub n_source: usize,
    pub replications: usize,
    pub base_seed: u64,
    pub models: Vec<ModelKind>,
    pub scenarios: Vec<Scenario>,
    /// Features missing from the smaller schema in subset relations.
    pub subset_drop: Vec<String>,
    pub val_fraction: f64,
    pub save_densities: bool,
    pub mlp_hidden: usize,
    pub model: ModelConfig,
    pub train: TrainOpts,
    pub transfer: TransferOpts,
    pub generator: GeneratorConfig,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            name: "grid".into(),
            shift_types: vec![ShiftType::Covariate, ShiftType::Conditional, ShiftType::Label],
            intensities: vec![0.0, 0.5, 1.0, 1.5, 2.0, 3.0],
            relations: SchemaRelation::ALL.to_vec(),
            n_target: vec![100, 300, 500, 1000],
            n_source: 5000,
            replications: 15,
            base_seed: 0,
            models: vec![ModelKind::FtMdn, ModelKind::FtReg, ModelKind::Mlp],
            scenarios: Scenario::ALL.to_vec(),
            subset_drop: vec!["size_poly".into(), "rating_sig".into(), "coll_x_lev".into()],
            val_fraction: 0.2,
            save_densities: false,
            mlp_hidden: 64,
            model: ModelConfig::default(),
            train: TrainOpts::default(),
            transfer: TransferOpts::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

/// Coordinates of one Monte Carlo cell. Models and scenarios run inside a cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellCoords {
    pub shift_type: ShiftType,
    pub intensity: f64,
    pub relation: SchemaRelation,
    pub n_target: usize,
    pub replication: usize,
}

impl CellCoords {
    /// Canonical text form; also the seed tag.
    pub fn coordinate_string(&self) -> String {
        format!(
            "shift={};s={};relation={};n_t={};rep={}",
            self.shift_type, self.intensity, self.relation, self.n_target, self.replication
        )
    }

    /// File-name-safe key.
    pub fn key(&self) -> String {
        let s = format!("{}", self.intensity).replace('.', "p").replace('-', "m");
        format!(
            "{}_s{}_{}_nt{}_r{:03}",
            self.shift_type, s, self.relation, self.n_target, self.replication
        )
    }

    pub fn seed(&self, base: u64) -> u64 {
        seeds::derive(base, &self.coordinate_string())
    }

    /// Coordinates with the replication index removed, for grouping.
    pub fn group(&self) -> (ShiftType, u64, SchemaRelation, usize) {
        (self.shift_type, self.intensity.to_bits(), self.relation, self.n_target)
    }
}

impl GridSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let g: GridSpec = toml::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn settings(&self) -> LearnerSettings {
        LearnerSettings {
            model: self.model,
            mlp_hidden: self.mlp_hidden,
        }
    }

    pub fn scenario_config(&self) -> ScenarioConfig {
        ScenarioConfig {
            settings: self.settings(),
            train: self.train,
            transfer: self.transfer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("grid `{}`: {m}", self.name)));
        if self.replications == 0 {
            return bad("replications must be >= 1".into());
        }
        for (what, empty) in [
            ("shift_types", self.shift_types.is_empty()),
            ("intensities", self.intensities.is_empty()),
            ("relations", self.relations.is_empty()),
            ("n_target", self.n_target.is_empty()),
            ("models", self.models.is_empty()),
            ("scenarios", self.scenarios.is_empty()),
        ] {
            if empty {
                return bad(format!("{what} must not be empty"));
            }
        }
        if let Some(s) = self.intensities.iter().find(|s| !(s.is_finite() && **s >= 0.0)) {
            return bad(format!("intensity {s} must be finite and >= 0"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction must lie in (0, 1)".into());
        }
        let min_rows = (2.0 / self.val_fraction.min(1.0 - self.val_fraction)).ceil() as usize;
        if let Some(n) = self.n_target.iter().chain([&self.n_source]).find(|n| **n < min_rows) {
            return bad(format!("sample size {n} is too small for val_fraction {}", self.val_fraction));
        }
        self.model.validate()?;
        self.train.validate()?;
        if !(self.transfer.lr_divisor > 0.0) {
            return bad("transfer.lr_divisor must be > 0".into());
        }
        if self.mlp_hidden == 0 {
            return bad("mlp_hidden must be >= 1".into());
        }
        self.generator.validate()?;
        let kinds: BTreeMap<String, FeatureKind> =
            self.generator.features.iter().map(|f| (f.name.clone(), f.kind())).collect();
        if let Some(n) = self.subset_drop.iter().find(|n| !kinds.contains_key(*n)) {
            return bad(format!("subset_drop names unknown feature `{n}`"));
        }
        let all: Vec<String> = self.generator.features.iter().map(|f| f.name.clone()).collect();
        for rel in &self.relations {
            let (s, t) = rel.feature_sets(&all, &self.subset_drop);
            let shared: Vec<&String> = s.iter().filter(|n| t.contains(n)).collect();
            if s == t {
                continue;
            }
            let has = |k: FeatureKind| shared.iter().any(|n| kinds[*n] == k);
            if !has(FeatureKind::Numeric) || !has(FeatureKind::Categorical) {
                return bad(format!("{rel}: shared features need at least one numeric and one categorical"));
            }
            if (shared.len() as f64) < 0.3 * s.len().min(t.len()) as f64 {
                return bad(format!("{rel}: overlap below 30% of the smaller schema"));
            }
        }
        Ok(())
    }

    /// All cells in canonical order. Shift type `none` only uses intensity 0.
    pub fn cells(&self) -> Vec<CellCoords> {
        let mut out = Vec::new();
        let mut seen = BTreeSet::new();
        for &shift_type in &self.shift_types {
            for &s in &self.intensities {
                let intensity = if shift_type == ShiftType::None { 0.0 } else { s };
                for &relation in &self.relations {
                    for &n_target in &self.n_target {
                        for replication in 0..self.replications {
                            let c = CellCoords {
                                shift_type,
                                intensity,
                                relation,
                                n_target,
                                replication,
                            };
                            if seen.insert(c.coordinate_string()) {
                                out.push(c);
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Hash of the crate version, store version and the grid itself.
    pub fn version_hash(&self) -> Result<String> {
        let text = format!(
            "{}|{}|{}",
            env!("CARGO_PKG_VERSION"),
            STORE_VERSION,
            serde_json::to_string(self)?
        );
        Ok(format!("{:016x}", seeds::hash_str(&text)))
    }
}

/// One persisted result row. Failure records carry `error` and no metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub cell: CellCoords,
    /// Dataset-generation seed of the cell.
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<Scenario>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<MetricRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub drift: Option<DriftReport>,
    /// Best epoch of each training phase, in order.
    #[serde(default)]
    pub best_epochs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_digest: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub version: String,
}

impl RunRecord {
    pub fn is_failure(&self) -> bool {
        self.error.is_some()
    }
}

/// Densities saved for one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellDensities {
    pub cell: CellCoords,
    /// Target validation recovery rates.
    pub observed: Vec<f64>,
    pub densities: Vec<(ModelKind, Scenario, PortfolioDensity)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub key: String,
    pub records: usize,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreIndex {
    pub name: String,
    pub version: String,
    pub cells: Vec<IndexEntry>,
}

/// Runtime controls for `run_grid`.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub workers: usize,
    /// Skip cells already in the store. When off, an existing store is an error.
    pub resume: bool,
    /// Checked before each cell starts; set it to stop early.
    pub cancel: Arc<AtomicBool>,
    /// Raise `cancel` after this many newly completed cells.
    pub stop_after: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            resume: true,
            cancel: Arc::new(AtomicBool::new(false)),
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunSummary {
    pub total: usize,
    pub skipped: usize,
    pub completed: usize,
    pub failed: usize,
    pub cancelled: usize,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().expect("store paths have a parent");
    let tmp = dir.join(format!(".tmp-{}", path.file_name().unwrap().to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Read-only view of a result store.
#[derive(Debug, Clone)]
pub struct Store {
    pub root: PathBuf,
}

impl Store {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn records_dir(&self) -> PathBuf {
        self.root.join("records")
    }

    fn record_path(&self, key: &str) -> PathBuf {
        self.records_dir().join(format!("{key}.jsonl"))
    }

    pub fn grid_path(&self) -> PathBuf {
        self.root.join("grid.toml")
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::load(&self.grid_path())
    }

    /// Keys of cells with a record file.
    pub fn completed_keys(&self) -> Result<BTreeSet<String>> {
        let dir = self.records_dir();
        if !dir.exists() {
            return Ok(BTreeSet::new());
        }
        let mut keys = BTreeSet::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let name = entry.map_err(|e| Error::io(&dir, e))?.file_name().to_string_lossy().into_owned();
            if let Some(k) = name.strip_suffix(".jsonl").filter(|_| !name.starts_with('.')) {
                keys.insert(k.to_string());
            }
        }
        Ok(keys)
    }

    pub fn cell_records(&self, key: &str) -> Result<Vec<RunRecord>> {
        let path = self.record_path(key);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
    }

    /// Every record, ordered by cell key then file order.
    pub fn records(&self) -> Result<Vec<RunRecord>> {
        let mut out = Vec::new();
        for k in self.completed_keys()? {
            out.extend(self.cell_records(&k)?);
        }
        Ok(out)
    }

    pub fn densities(&self) -> Result<Vec<CellDensities>> {
        let dir = self.root.join("densities");
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                Ok(serde_json::from_str(&text)?)
            })
            .collect()
    }

    /// Rebuild index.json from the record files.
    pub fn write_index(&self, name: &str, version: &str) -> Result<StoreIndex> {
        let mut cells = Vec::new();
        for key in self.completed_keys()? {
            let recs = self.cell_records(&key)?;
            cells.push(IndexEntry {
                failed: recs.iter().any(RunRecord::is_failure),
                records: recs.len(),
                key,
            });
        }
        let index = StoreIndex {
            name: name.to_string(),
            version: version.to_string(),
            cells,
        };
        let mut text = serde_json::to_string_pretty(&index)?;
        text.push('\n');
        write_atomic(&self.root.join("index.json"), text.as_bytes())?;
        Ok(index)
    }
}

/// Source and target samples of one cell, restricted to the relation's feature sets.
pub fn cell_datasets(grid: &GridSpec, cell: &CellCoords) -> Result<(SimDataset, SimDataset)> {
    let shift = ShiftSpec::standard(cell.shift_type, cell.intensity, &grid.generator);
    let (source, target) =
        generate_domain_pair(&grid.generator, &shift, grid.n_source, cell.n_target, cell.seed(grid.base_seed))?;
    let all: Vec<String> = grid.generator.features.iter().map(|f| f.name.clone()).collect();
    let (s, t) = cell.relation.feature_sets(&all, &grid.subset_drop);
    let pick = |d: &SimDataset, keep: &[String]| d.select_features(&keep.iter().map(String::as_str).collect::<Vec<_>>());
    Ok((pick(&source, &s), pick(&target, &t)))
}

struct CellResult {
    records: Vec<RunRecord>,
    densities: Option<CellDensities>,
    timings: BTreeMap<String, f64>,
}

fn run_cell(grid: &GridSpec, cell: &CellCoords, registry: &LearnerRegistry, version: &str) -> Result<CellResult> {
    let seed = cell.seed(grid.base_seed);
    let t0 = Instant::now();
    let (source, target) = cell_datasets(grid, cell)?;
    let drift = drift_report(&source, &target)?;
    let data = CellData::prepare(&source, &target, grid.val_fraction, seed)?;
    let mut timings = BTreeMap::from([("data".to_string(), t0.elapsed().as_secs_f64())]);
    let cfg = grid.scenario_config();
    let mut records = Vec::new();
    let mut densities = Vec::new();
    for model in &grid.models {
        let t = Instant::now();
        let outcomes = run_scenarios(&data, model, &grid.scenarios, &cfg, registry, seed)?;
        timings.insert(model.to_string(), t.elapsed().as_secs_f64());
        for o in outcomes {
            records.push(RunRecord {
                cell: cell.clone(),
                seed,
                model: Some(model.clone()),
                scenario: Some(o.scenario),
                metrics: Some(o.metrics),
                drift: Some(drift.clone()),
                best_epochs: o.traces.iter().map(|t| t.best_epoch).collect(),
                target_digest: Some(o.target_digest),
                error: None,
                version: version.to_string(),
            });
            if let Some(d) = o.density {
                densities.push((model.clone(), o.scenario, d));
            }
        }
    }
    let densities = (grid.save_densities && !densities.is_empty()).then(|| CellDensities {
        cell: cell.clone(),
        observed: data.target_val.recovery.clone(),
        densities,
    });
    Ok(CellResult {
        records,
        densities,
        timings,
    })
}

fn prepare_store(grid: &GridSpec, store: &Store, resume: bool) -> Result<()> {
    let records = store.records_dir();
    fs::create_dir_all(&records).map_err(|e| Error::io(&records, e))?;
    let grid_text = grid.to_toml_string()?;
    let path = store.grid_path();
    if path.exists() {
        let existing = store.grid()?;
        if existing.version_hash()? != grid.version_hash()? {
            return Err(Error::Config(format!(
                "{} holds a different grid; use a fresh output directory",
                store.root.display()
            )));
        }
        if !resume && !store.completed_keys()?.is_empty() {
            return Err(Error::Config(format!(
                "{} already has results and resume is off",
                store.root.display()
            )));
        }
    } else {
        write_atomic(&path, grid_text.as_bytes())?;
    }
    // Leftovers from an interrupted write.
    for entry in fs::read_dir(&records).map_err(|e| Error::io(&records, e))?.flatten() {
        if entry.file_name().to_string_lossy().starts_with(".tmp-") {
            fs::remove_file(entry.path()).map_err(|e| Error::io(entry.path(), e))?;
        }
    }
    Ok(())
}

/// Run every missing cell of `grid` into the store at `out`.
pub fn run_grid(grid: &GridSpec, out: &Path, registry: &LearnerRegistry, opts: &RunOptions) -> Result<RunSummary> {
    grid.validate()?;
    let store = Store::new(out);
    prepare_store(grid, &store, opts.resume)?;
    let version = grid.version_hash()?;
    let done = store.completed_keys()?;
    let cells = grid.cells();
    let todo: Vec<&CellCoords> = cells.iter().filter(|c| !done.contains(&c.key())).collect();
    let mut summary = RunSummary {
        total: cells.len(),
        skipped: cells.len() - todo.len(),
        ..RunSummary::default()
    };
    log::info!(
        "grid `{}`: {} cells, {} already stored, {} to run",
        grid.name,
        summary.total,
        summary.skipped,
        todo.len()
    );

    let finished = AtomicUsize::new(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let results: Vec<Option<Result<bool>>> = pool.install(|| {
        todo.par_iter()
            .map(|cell| {
                if opts.cancel.load(Ordering::SeqCst) {
                    return None;
                }
                let key = cell.key();
                let outcome = run_cell(grid, cell, registry, &version);
                let persisted = (|| -> Result<bool> {
                    let failed = outcome.is_err();
                    let records = match outcome {
                        Ok(res) => {
                            if let Some(d) = &res.densities {
                                let dir = store.root.join("densities");
                                fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                                write_atomic(&dir.join(format!("{key}.json")), serde_json::to_string(d)?.as_bytes())?;
                            }
                            let dir = store.root.join("timings");
                            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                            write_atomic(
                                &dir.join(format!("{key}.json")),
                                serde_json::to_string(&res.timings)?.as_bytes(),
                            )?;
                            res.records
                        }
                        Err(e) => {
                            log::warn!("cell {key} failed: {e}");
                            vec![RunRecord {
                                cell: (*cell).clone(),
                                seed: cell.seed(grid.base_seed),
                                model: None,
                                scenario: None,
                                metrics: None,
                                drift: None,
                                best_epochs: Vec::new(),
                                target_digest: None,
                                error: Some(e.to_string()),
                                version: version.clone(),
                            }]
                        }
                    };
                    // The record file is written last: its presence marks the cell complete.
                    write_atomic(&store.record_path(&key), jsonl(&records)?.as_bytes())?;
                    Ok(failed)
                })();
                let n = finished.fetch_add(1, Ordering::SeqCst) + 1;
                log::info!("cell {key} done ({n}/{})", todo.len());
                if opts.stop_after.is_some_and(|k| n >= k) {
                    opts.cancel.store(true, Ordering::SeqCst);
                }
                Some(persisted)
            })
            .collect()
    });
    for r in results {
        match r {
            None => summary.cancelled += 1,
            Some(Ok(true)) => summary.failed += 1,
            Some(Ok(false)) => summary.completed += 1,
            Some(Err(e)) => return Err(e),
        }
    }
    store.write_index(&grid.name, &version)?;
    Ok(summary)
}
