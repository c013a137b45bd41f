use super::*;
use crate::datagen::{generate_domain_pair, GeneratorConfig, ShiftSpec};
use crate::model::{HeadKind, ModelConfig, Predictions};
use crate::nn::check_gradients;
use crate::schema::encode;

fn tiny_settings() -> LearnerSettings {
    LearnerSettings {
        model: ModelConfig {
            d: 8,
            blocks: 2,
            heads: 2,
            dropout: 0.0,
            ..ModelConfig::default()
        },
        mlp_hidden: 16,
    }
}

fn quick_opts(epochs: usize) -> TrainOpts {
    TrainOpts {
        lr: 3e-3,
        batch_size: 64,
        max_epochs: epochs,
        patience: epochs,
        seed: 5,
        ..TrainOpts::default()
    }
}

/// Source lacks `sector`, target lacks `macro_gdp`.
fn hetero_cell(n_s: usize, n_t: usize, seed: u64) -> CellData {
    let cfg = GeneratorConfig::default();
    let (s, t) = generate_domain_pair(&cfg, &ShiftSpec::none(), n_s, n_t, seed).unwrap();
    let keep = |d: &SimDataset, drop: &str| {
        let names: Vec<&str> = d.feature_names().into_iter().filter(|n| *n != drop).collect();
        d.select_features(&names)
    };
    CellData::prepare(&keep(&s, "sector"), &keep(&t, "macro_gdp"), 0.2, seed).unwrap()
}

fn pretrained(cell: &CellData, head: HeadKind) -> FtModel {
    let schema = cell.pretrain_schema(PretrainFeatures::FullSource);
    let mut m = FtModel::new(tiny_settings().model, head, &schema, &cell.prep.vocab, 1).unwrap();
    let tr = encode(&cell.source_train, &schema, &cell.prep).unwrap();
    let va = encode(&cell.source_val, &schema, &cell.prep).unwrap();
    pretrain(&mut m, &tr, &va, &quick_opts(2)).unwrap();
    m
}

#[test]
fn opts_validation() {
    TrainOpts::default().validate().unwrap();
    for bad in [
        TrainOpts { lr: f64::NAN, ..TrainOpts::default() },
        TrainOpts { lr: -1.0, ..TrainOpts::default() },
        TrainOpts { patience: 0, ..TrainOpts::default() },
        TrainOpts { batch_size: 0, ..TrainOpts::default() },
        TrainOpts { feature_mask_rate: 1.0, ..TrainOpts::default() },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn early_stopping_patience_three_on_worsening_losses() {
    let mut es = EarlyStopping::new(3);
    let mut stopped_at = None;
    for (epoch, loss) in [1.0, 1.1, 1.2, 1.3, 1.4, 1.5].into_iter().enumerate() {
        let (_, stop) = es.update(epoch + 1, loss);
        if stop {
            stopped_at = Some(epoch + 1);
            break;
        }
    }
    assert_eq!(stopped_at, Some(4));
    assert_eq!(es.best_epoch, 1);
    // Equal losses are not improvements.
    let mut es = EarlyStopping::new(1);
    assert_eq!(es.update(1, 2.0), (true, false));
    assert_eq!(es.update(2, 2.0), (false, true));
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(epoch_lr(0.1, 1, 10, true), 0.1);
    assert!(epoch_lr(0.1, 10, 10, true).abs() < 1e-15);
    assert_eq!(epoch_lr(0.1, 7, 10, false), 0.1);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let cell = hetero_cell(300, 100, 2);
    let schema = cell.pretrain_schema(PretrainFeatures::FullSource);
    let mut m = FtModel::new(tiny_settings().model, HeadKind::Mdn, &schema, &cell.prep.vocab, 3).unwrap();
    let before = m.params.clone();
    let tr = encode(&cell.source_train, &schema, &cell.prep).unwrap();
    let va = encode(&cell.source_val, &schema, &cell.prep).unwrap();
    let opts = TrainOpts { lr: 0.0, ..quick_opts(3) };
    let trace = pretrain(&mut m, &tr, &va, &opts).unwrap();
    assert_eq!(m.params, before);
    let first = trace.epochs[0].val_loss;
    assert!(trace.epochs.iter().all(|e| e.val_loss == first));
}

#[test]
fn returned_weights_match_best_epoch() {
    let cell = hetero_cell(400, 100, 4);
    let schema = cell.pretrain_schema(PretrainFeatures::FullSource);
    let mut m = FtModel::new(tiny_settings().model, HeadKind::Mdn, &schema, &cell.prep.vocab, 3).unwrap();
    let tr = encode(&cell.source_train, &schema, &cell.prep).unwrap();
    let va = encode(&cell.source_val, &schema, &cell.prep).unwrap();
    let trace = pretrain(&mut m, &tr, &va, &quick_opts(4)).unwrap();
    let min = trace.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
    assert_eq!(trace.best().val_loss, min);
    assert_eq!(m.eval_loss(&va).unwrap(), min);
    assert!(trace.epochs.iter().all(|e| e.val_r2.is_some()));
}

#[test]
fn full_warm_freeze_keeps_shared_tokens_and_first_block() {
    let cell = hetero_cell(300, 150, 6);
    let pre = pretrained(&cell, HeadKind::Mdn);
    let mut m = pre.reconfigure_for_schema(&cell.schema, &cell.prep.vocab, 9).unwrap();
    let after_reconf = m.params.clone();
    let tr = encode(&cell.target_train, &cell.schema, &cell.prep).unwrap();
    let va = encode(&cell.target_val, &cell.schema, &cell.prep).unwrap();
    let opts = quick_opts(2);
    let topts = TransferOpts { e_warm: 2, ..TransferOpts::default() };
    let shared = cell.schema.shared();
    let trace = finetune(&mut m, &tr, &va, &opts, &topts, &shared).unwrap();

    let frozen = warm_freeze(&m, 2, &shared);
    assert!(!frozen.ids.is_empty());
    for p in after_reconf.iter() {
        let id = m.params.expect(&p.name);
        let now = m.params.value(id);
        if frozen.ids.contains(&id) {
            assert_eq!(now, &p.value, "{} moved while frozen", p.name);
        }
    }
    // The shared tokens equal the pretrained ones.
    for name in m.feature_param_names(&shared) {
        assert_eq!(m.params.by_name(&name).unwrap().value, pre.params.by_name(&name).unwrap().value);
    }
    // The head is not frozen and must have moved.
    assert_ne!(m.params.by_name("head.w").unwrap().value, after_reconf.by_name("head.w").unwrap().value);
    assert!(trace.epochs.iter().all(|e| e.frozen.contains(&"block0".to_string())));
    assert!(trace.epochs.iter().all(|e| (e.lr - opts.lr / 10.0).abs() < 1e-18));
}

#[test]
fn no_warm_freeze_updates_every_parameter_in_epoch_one() {
    let cell = hetero_cell(300, 200, 7);
    let pre = pretrained(&cell, HeadKind::Mdn);
    let mut m = pre.reconfigure_for_schema(&cell.schema, &cell.prep.vocab, 9).unwrap();
    let before = m.params.clone();
    let tr = encode(&cell.target_train, &cell.schema, &cell.prep).unwrap();
    let va = encode(&cell.target_val, &cell.schema, &cell.prep).unwrap();
    // Patience 1 with one epoch: the single epoch is the best one.
    let opts = TrainOpts { patience: 1, ..quick_opts(1) };
    let topts = TransferOpts { e_warm: 0, ..TransferOpts::default() };
    let trace = finetune(&mut m, &tr, &va, &opts, &topts, &cell.schema.shared()).unwrap();
    assert!(trace.epochs[0].frozen.is_empty());
    // PAD fills masked slots and source-only tokens are always masked on
    // target rows; attention excludes both, so neither gets a gradient.
    let mut inert = m.feature_param_names(&cell.schema.source_only());
    inert.push("pad".into());
    for p in before.iter().filter(|p| !inert.contains(&p.name)) {
        assert_ne!(m.params.by_name(&p.name).unwrap().value, p.value, "{} not updated", p.name);
    }
}

#[test]
fn mlp_identity_surgery_preserves_forward_pass() {
    let cell = hetero_cell(300, 100, 8);
    let schema = cell.target_schema();
    let mut learner = MlpLearner::new(16);
    learner.initialize(&schema, &cell.prep, 1).unwrap();
    let before = learner.predict(&cell.target_val, &cell.prep).unwrap();
    learner.reconfigure(&cell.schema, &cell.prep, 77).unwrap();
    let after = learner.predict(&cell.target_val, &cell.prep).unwrap();
    assert_eq!(before, after);
}

#[test]
fn mlp_surgery_copies_shared_inputs() {
    let cell = hetero_cell(300, 100, 8);
    let mut learner = MlpLearner::new(16);
    learner.initialize(&cell.pretrain_schema(PretrainFeatures::SharedOnly), &cell.prep, 1).unwrap();
    let old = learner.model.clone().unwrap();
    learner.reconfigure(&cell.schema, &cell.prep, 2).unwrap();
    let new = learner.model.as_ref().unwrap();
    assert_eq!(new.input_width(), old.input_width() + 4 + 1);
    for name in ["hid.w", "hid.b", "out.w", "out.b", "in.b"] {
        assert_eq!(new.params.by_name(name), old.params.by_name(name));
    }
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let cell = hetero_cell(200, 100, 9);
    let schema = cell.target_schema();
    let mut learner = MlpLearner::new(6);
    learner.initialize(&schema, &cell.prep, 4).unwrap();
    let m = learner.model.unwrap();
    let batch = encode(&cell.target_train, &schema, &cell.prep).unwrap().rows(&(0..12).collect::<Vec<_>>());
    let f = |s: &crate::nn::ParamStore| {
        let mm = MlpModel { params: s.clone(), ..m.clone() };
        let mut tape = crate::nn::Tape::new(s);
        let l = mm.batch_loss(&mut tape, &batch, None).unwrap();
        (tape.scalar(l), tape.backward(l))
    };
    let (_, grads) = f(&m.params);
    let res = check_gradients(&m.params, &grads, 1e-6, |s| f(s).0);
    assert!(res.max_rel_error() < 1e-5, "{res:?}");
}

fn quick_config() -> ScenarioConfig {
    ScenarioConfig {
        settings: tiny_settings(),
        train: quick_opts(2),
        transfer: TransferOpts { e_warm: 1, ..TransferOpts::default() },
    }
}

#[test]
fn scenarios_are_deterministic_and_aligned() {
    let cell = hetero_cell(300, 120, 10);
    let reg = LearnerRegistry::default();
    for kind in [ModelKind::FtMdn, ModelKind::Mlp] {
        let a = run_scenarios(&cell, &kind, &Scenario::ALL, &quick_config(), &reg, 11).unwrap();
        let b = run_scenarios(&cell, &kind, &Scenario::ALL, &quick_config(), &reg, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 3);
        assert!(a.iter().all(|o| o.target_digest == a[0].target_digest));
        assert_eq!(a[0].scenario, Scenario::ZeroShot);
        assert_eq!(a[2].traces.len(), 2);
        assert_eq!(a[0].density.is_some(), kind == ModelKind::FtMdn);
    }
}

#[test]
fn transfer_alone_equals_transfer_in_full_run() {
    let cell = hetero_cell(300, 120, 12);
    let reg = LearnerRegistry::default();
    let all = run_scenarios(&cell, &ModelKind::FtReg, &Scenario::ALL, &quick_config(), &reg, 3).unwrap();
    let one = run_scenarios(&cell, &ModelKind::FtReg, &[Scenario::Transfer], &quick_config(), &reg, 3).unwrap();
    assert_eq!(all[2], one[0]);
}

/// Predicts the training-set mean of the target.
struct MeanLearner(f64);

impl Learner for MeanLearner {
    fn initialize(&mut self, _: &Schema, _: &Preprocessor, _: u64) -> Result<()> {
        Ok(())
    }
    fn reconfigure(&mut self, _: &Schema, _: &Preprocessor, _: u64) -> Result<()> {
        Ok(())
    }
    fn fit(&mut self, train: &SimDataset, _: &SimDataset, _: &Preprocessor, plan: &FitPlan) -> Result<TrainTrace> {
        self.0 = train.recovery.iter().sum::<f64>() / train.len() as f64;
        Ok(TrainTrace {
            phase: plan.phase,
            epochs: Vec::new(),
            best_epoch: 0,
            stopped_early: false,
        })
    }
    fn predict(&self, data: &SimDataset, _: &Preprocessor) -> Result<Predictions> {
        Ok(Predictions { mean: vec![self.0; data.len()], mixtures: None })
    }
}

#[test]
fn external_learner_plugs_in() {
    let cell = hetero_cell(200, 100, 13);
    let mut reg = LearnerRegistry::default();
    let kind: ModelKind = "ext:mean".parse().unwrap();
    assert!(reg.create(&kind, &tiny_settings()).is_err());
    reg.register("mean", || Box::new(MeanLearner(0.0)));
    let out = run_scenarios(&cell, &kind, &Scenario::ALL, &quick_config(), &reg, 1).unwrap();
    assert_eq!(out.len(), 3);
    // Train-mean predictions sit near zero R² on held-out rows.
    assert!(out.iter().all(|o| o.metrics.r2 < 0.05));
    assert_eq!(serde_json::to_string(&kind).unwrap(), "\"ext:mean\"");
}

#[test]
fn trace_jsonl_has_one_line_per_epoch() {
    let cell = hetero_cell(300, 100, 14);
    let schema = cell.target_schema();
    let mut learner = MlpLearner::new(8);
    learner.initialize(&schema, &cell.prep, 1).unwrap();
    let plan = FitPlan { opts: quick_opts(3), phase: Phase::Baseline, lr: 1e-3, warm: None };
    let trace = learner.fit(&cell.target_train, &cell.target_val, &cell.prep, &plan).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    trace.append_jsonl(&path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let rows: Vec<EpochRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows, trace.epochs);
}
