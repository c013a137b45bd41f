use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{RunRecord, SchemaRelation};
use crate::datagen::ShiftType;
use crate::transfer::{ModelKind, Scenario};

/// Mean and standard error of the mean (sample sd over √n). SE is NaN for n < 2.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub shift_type: ShiftType,
    pub intensity: f64,
    pub relation: SchemaRelation,
    pub n_target: usize,
    pub model: ModelKind,
    pub scenario: Scenario,
    pub n: usize,
    pub r2_mean: f64,
    pub r2_se: f64,
    pub mae_mean: f64,
    pub mae_se: f64,
    pub nll_mean: Option<f64>,
    pub nll_se: Option<f64>,
    pub feature_shift_mean: f64,
    pub label_shift_mean: f64,
}

/// Transfer minus target-baseline R², paired by replication.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainSummary {
    pub shift_type: ShiftType,
    pub intensity: f64,
    pub relation: SchemaRelation,
    pub n_target: usize,
    pub model: ModelKind,
    pub n: usize,
    pub gain_mean: f64,
    pub gain_se: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    pub groups: Vec<GroupSummary>,
    pub gains: Vec<GainSummary>,
    pub failures: usize,
}

type GroupKey = (ShiftType, u64, SchemaRelation, usize, ModelKind);

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

impl Summary {
    pub fn groups_csv(&self) -> String {
        let mut out = String::from(
            "shift_type,intensity,relation,n_target,model,scenario,n,r2_mean,r2_se,mae_mean,mae_se,nll_mean,nll_se,feature_shift_mean,label_shift_mean\n",
        );
        for g in &self.groups {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                g.shift_type,
                g.intensity,
                g.relation,
                g.n_target,
                g.model,
                g.scenario,
                g.n,
                g.r2_mean,
                g.r2_se,
                g.mae_mean,
                g.mae_se,
                fmt_opt(g.nll_mean),
                fmt_opt(g.nll_se),
                g.feature_shift_mean,
                g.label_shift_mean
            );
        }
        out
    }

    pub fn gains_csv(&self) -> String {
        let mut out = String::from("shift_type,intensity,relation,n_target,model,n,gain_mean,gain_se\n");
        for g in &self.gains {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                g.shift_type, g.intensity, g.relation, g.n_target, g.model, g.n, g.gain_mean, g.gain_se
            );
        }
        out
    }
}

/// Group successful records by cell coordinates minus replication.
pub fn aggregate(records: &[RunRecord]) -> Summary {
    let mut by_group: BTreeMap<(GroupKey, Scenario), Vec<&RunRecord>> = BTreeMap::new();
    let mut failures = 0;
    for r in records {
        match (&r.model, r.scenario, &r.metrics) {
            (Some(m), Some(s), Some(_)) => {
                let (st, bits, rel, nt) = r.cell.group();
                by_group.entry(((st, bits, rel, nt, m.clone()), s)).or_default().push(r);
            }
            _ => failures += 1,
        }
    }
    let mut groups = Vec::new();
    for (((st, bits, rel, nt, model), scenario), rows) in &by_group {
        let metric = |f: &dyn Fn(&RunRecord) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
        let (r2_mean, r2_se) = mean_se(&metric(&|r| r.metrics.unwrap().r2));
        let (mae_mean, mae_se) = mean_se(&metric(&|r| r.metrics.unwrap().mae));
        let nll: Option<Vec<f64>> = rows.iter().map(|r| r.metrics.unwrap().nll).collect();
        let nll = nll.map(|v| mean_se(&v));
        let drift = |f: &dyn Fn(&crate::driftdiag::DriftReport) -> f64| {
            mean_se(&rows.iter().filter_map(|r| r.drift.as_ref().map(f)).collect::<Vec<_>>()).0
        };
        groups.push(GroupSummary {
            shift_type: *st,
            intensity: f64::from_bits(*bits),
            relation: *rel,
            n_target: *nt,
            model: model.clone(),
            scenario: *scenario,
            n: rows.len(),
            r2_mean,
            r2_se,
            mae_mean,
            mae_se,
            nll_mean: nll.map(|x| x.0),
            nll_se: nll.map(|x| x.1),
            feature_shift_mean: drift(&|d| d.feature_shift),
            label_shift_mean: drift(&|d| d.label_shift),
        });
    }

    let mut gains = Vec::new();
    let keys: Vec<&GroupKey> = by_group.keys().map(|(k, _)| k).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    for key in keys {
        let per_rep = |s: Scenario| -> BTreeMap<usize, f64> {
            by_group
                .get(&(key.clone(), s))
                .map(|rows| rows.iter().map(|r| (r.cell.replication, r.metrics.unwrap().r2)).collect())
                .unwrap_or_default()
        };
        let (tr, base) = (per_rep(Scenario::Transfer), per_rep(Scenario::TargetBaseline));
        let diffs: Vec<f64> = tr.iter().filter_map(|(rep, a)| base.get(rep).map(|b| a - b)).collect();
        if diffs.is_empty() {
            continue;
        }
        let (gain_mean, gain_se) = mean_se(&diffs);
        let (st, bits, rel, nt, model) = key.clone();
        gains.push(GainSummary {
            shift_type: st,
            intensity: f64::from_bits(bits),
            relation: rel,
            n_target: nt,
            model,
            n: diffs.len(),
            gain_mean,
            gain_se,
        });
    }
    Summary {
        groups,
        gains,
        failures,
    }
}
