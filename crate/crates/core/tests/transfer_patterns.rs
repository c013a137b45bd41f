//! Directional checks of the training and transfer pipeline on simulated
//! data. Each runs a few small grids at the desk budget.

use std::path::Path;

use rrlab::datagen::{generate_dataset, Domain, GeneratorConfig, ShiftType};
use rrlab::harness::{aggregate, mean_se, run_grid, GridSpec, RunOptions, SchemaRelation, Store};
use rrlab::metrics::r2;
use rrlab::model::{FtModel, HeadKind, ModelConfig};
use rrlab::schema::{encode, split_stratified, Preprocessor, Schema};
use rrlab::transfer::{pretrain, LearnerRegistry, ModelKind, Scenario, TrainOpts};

fn desk() -> GridSpec {
    GridSpec::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml")).unwrap()
}

fn run(grid: &GridSpec) -> Vec<rrlab::harness::RunRecord> {
    let dir = tempfile::tempdir().unwrap();
    let s = run_grid(grid, dir.path(), &LearnerRegistry::default(), &RunOptions::default()).unwrap();
    assert_eq!(s.failed, 0);
    Store::new(dir.path()).records().unwrap()
}

fn r2_of(records: &[rrlab::harness::RunRecord], model: &ModelKind, scenario: Scenario) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.model.as_ref() == Some(model) && r.scenario == Some(scenario))
        .map(|r| r.metrics.as_ref().unwrap().r2)
        .collect()
}

#[test]
fn pretraining_on_default_simulation_reaches_r2_above_point_two() {
    let data = generate_dataset(&GeneratorConfig::default(), 5000, 3, Domain::Source).unwrap();
    let (train, val) = split_stratified(&data, 0.2, 4).unwrap();
    let schema = Schema::from_datasets(&train, &train).unwrap();
    let prep = Preprocessor::fit(&train, &train, &schema).unwrap();
    let mut model = FtModel::new(ModelConfig::default(), HeadKind::Mdn, &schema, &prep.vocab, 5).unwrap();
    let tr = encode(&train, &schema, &prep).unwrap();
    let va = encode(&val, &schema, &prep).unwrap();
    let trace = pretrain(&mut model, &tr, &va, &TrainOpts::default()).unwrap();
    assert!(trace.epochs.len() <= 100);
    let pred = model.predict(&va).unwrap();
    let fit = r2(&val.recovery, &pred.mean).unwrap();
    assert!(fit > 0.2, "val R² {fit}");
}

#[test]
fn without_shift_transfer_and_baseline_agree_at_large_n_t() {
    let grid = GridSpec {
        shift_types: vec![ShiftType::None],
        intensities: vec![0.0],
        relations: vec![SchemaRelation::Equal],
        n_target: vec![1000],
        scenarios: vec![Scenario::TargetBaseline, Scenario::Transfer],
        ..desk()
    };
    let recs = run(&grid);
    let m = ModelKind::FtMdn;
    let (base, _) = mean_se(&r2_of(&recs, &m, Scenario::TargetBaseline));
    let (transfer, _) = mean_se(&r2_of(&recs, &m, Scenario::Transfer));
    assert!((transfer - base).abs() < 0.05, "baseline {base} transfer {transfer}");
}

#[test]
fn under_strong_label_shift_zero_shot_trails_transfer() {
    // pi 0.7 -> 0.2 is 10/3 steps of the standard label shift.
    let grid = GridSpec {
        shift_types: vec![ShiftType::Label],
        intensities: vec![10.0 / 3.0],
        relations: vec![SchemaRelation::Equal],
        n_target: vec![100],
        replications: 15,
        scenarios: vec![Scenario::ZeroShot, Scenario::Transfer],
        ..desk()
    };
    assert!((grid.generator.mixture.pi - 0.15 * 10.0 / 3.0 - 0.2).abs() < 1e-12);
    let recs = run(&grid);
    let m = ModelKind::FtMdn;
    let (zero, _) = mean_se(&r2_of(&recs, &m, Scenario::ZeroShot));
    let (transfer, _) = mean_se(&r2_of(&recs, &m, Scenario::Transfer));
    assert!(zero < transfer, "zero-shot {zero} transfer {transfer}");
}

#[test]
#[ignore = "does not hold under the default generator: MLP transfer R² lands between ft_mdn and ft_reg"]
fn mlp_gains_from_transfer_but_trails_feature_token_models() {
    let grid = GridSpec {
        shift_types: vec![ShiftType::Covariate],
        intensities: vec![1.0],
        n_target: vec![100],
        models: vec![ModelKind::FtMdn, ModelKind::FtReg, ModelKind::Mlp],
        scenarios: vec![Scenario::TargetBaseline, Scenario::Transfer],
        ..desk()
    };
    let recs = run(&grid);
    let mean = |m: ModelKind| mean_se(&r2_of(&recs, &m, Scenario::Transfer)).0;
    let summary = aggregate(&recs);
    let g: Vec<f64> = summary.gains.iter().filter(|g| g.model == ModelKind::Mlp).map(|g| g.gain_mean).collect();
    assert_eq!(g.len(), 3);
    let mlp_gain = g.iter().sum::<f64>() / 3.0;
    let (mdn, reg, mlp) = (mean(ModelKind::FtMdn), mean(ModelKind::FtReg), mean(ModelKind::Mlp));
    assert!(mlp_gain > 0.0, "mlp gain {mlp_gain}");
    assert!(mlp < mdn && mlp < reg, "transfer R²: ft_mdn {mdn} ft_reg {reg} mlp {mlp}");
}
