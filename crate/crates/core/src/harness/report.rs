use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::aggregate::mean_se;
use super::svg::{Chart, PALETTE};
use super::{RunRecord, SchemaRelation, Store};
use crate::datagen::ShiftType;
use crate::error::{Error, Result};
use crate::metrics::{count_modes, empirical_density};
use crate::transfer::{ModelKind, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportKind {
    Violin,
    ShiftCurve,
    SampleCurve,
    Density,
}

impl ReportKind {
    pub const ALL: [ReportKind; 4] = [
        ReportKind::Violin,
        ReportKind::ShiftCurve,
        ReportKind::SampleCurve,
        ReportKind::Density,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ReportKind::Violin => "violin",
            ReportKind::ShiftCurve => "shift_curve",
            ReportKind::SampleCurve => "sample_curve",
            ReportKind::Density => "density",
        }
    }
}

impl std::str::FromStr for ReportKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown report kind `{s}`")))
    }
}

/// Record selection. Unset fields fall back to per-report defaults.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReportFilter {
    pub model: Option<ModelKind>,
    pub n_target: Option<usize>,
    pub shift_type: Option<ShiftType>,
    pub scenario: Option<Scenario>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportOutput {
    pub files: Vec<PathBuf>,
    /// Headline numbers: slopes, mean differences, mode counts.
    pub values: BTreeMap<String, f64>,
}

fn available(records: &[&RunRecord]) -> String {
    let mut models = BTreeSet::new();
    let mut nts = BTreeSet::new();
    let mut shifts = BTreeSet::new();
    let mut scen = BTreeSet::new();
    for r in records {
        if let Some(m) = &r.model {
            models.insert(m.to_string());
        }
        if let Some(s) = r.scenario {
            scen.insert(s.to_string());
        }
        nts.insert(r.cell.n_target);
        shifts.insert(r.cell.shift_type.to_string());
    }
    let join = |s: BTreeSet<String>| s.into_iter().collect::<Vec<_>>().join(", ");
    format!(
        "models [{}]; n_target [{}]; shift types [{}]; scenarios [{}]",
        join(models),
        join(nts.into_iter().map(|n| n.to_string()).collect()),
        join(shifts),
        join(scen)
    )
}

fn empty(what: &str, records: &[&RunRecord]) -> Error {
    Error::EmptySelection {
        message: what.to_string(),
        available: available(records),
    }
}

/// Ordinary least squares slope of y on x; None when x has no spread.
pub fn ols_slope(points: &[(f64, f64)]) -> Option<f64> {
    let n = points.len() as f64;
    if points.len() < 2 {
        return None;
    }
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Drift score a shift type is plotted against.
pub fn shift_axis(r: &RunRecord) -> (&'static str, f64) {
    let d = r.drift.as_ref();
    match r.cell.shift_type {
        ShiftType::Covariate => ("feature_shift", d.map_or(f64::NAN, |d| d.feature_shift)),
        ShiftType::Label => ("label_shift", d.map_or(f64::NAN, |d| d.label_shift)),
        ShiftType::Combined => ("feature_plus_label_shift", d.map_or(f64::NAN, |d| d.feature_shift + d.label_shift)),
        ShiftType::Conditional | ShiftType::None => ("intensity", r.cell.intensity),
    }
}

/// Gaussian KDE outline of a violin centred at `x`, half-width at most `half`.
fn violin_outline(values: &[f64], x: f64, half: f64) -> Vec<(f64, f64)> {
    let (mean, _) = mean_se(values);
    let n = values.len() as f64;
    let sd = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    let h = (1.06 * sd * n.powf(-0.2)).max(1e-3);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let ys: Vec<f64> = (0..64).map(|i| lo + (hi - lo) * i as f64 / 63.0).collect();
    let dens: Vec<f64> = ys
        .iter()
        .map(|y| values.iter().map(|v| (-0.5 * ((y - v) / h).powi(2)).exp()).sum::<f64>())
        .collect();
    let peak = dens.iter().copied().fold(0.0, f64::max).max(1e-300);
    let mut out: Vec<(f64, f64)> = ys.iter().zip(&dens).map(|(y, d)| (x + half * d / peak, *y)).collect();
    out.extend(ys.iter().zip(&dens).rev().map(|(y, d)| (x - half * d / peak, *y)));
    out
}

struct Ctx<'a> {
    ok: Vec<&'a RunRecord>,
    dir: PathBuf,
}

impl Ctx<'_> {
    fn write(&self, name: &str, text: &str, out: &mut ReportOutput) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        out.files.push(path);
        Ok(())
    }

    fn default_model(&self, filter: &ReportFilter) -> Option<ModelKind> {
        filter.model.clone().or_else(|| {
            let present: BTreeSet<&ModelKind> = self.ok.iter().filter_map(|r| r.model.as_ref()).collect();
            if present.contains(&ModelKind::FtMdn) {
                Some(ModelKind::FtMdn)
            } else {
                present.into_iter().next().cloned()
            }
        })
    }

    fn select(&self, filter: &ReportFilter, model: &ModelKind, n_t: Option<usize>) -> Vec<&RunRecord> {
        self.ok
            .iter()
            .copied()
            .filter(|r| r.model.as_ref() == Some(model))
            .filter(|r| n_t.is_none_or(|n| r.cell.n_target == n))
            .filter(|r| filter.shift_type.is_none_or(|s| r.cell.shift_type == s))
            .collect()
    }

    fn smallest_nt(&self, model: &ModelKind, filter: &ReportFilter) -> Option<usize> {
        filter.n_target.or_else(|| self.select(filter, model, None).iter().map(|r| r.cell.n_target).min())
    }
}

fn violin(ctx: &Ctx, filter: &ReportFilter) -> Result<ReportOutput> {
    let model = ctx.default_model(filter).ok_or_else(|| empty("no successful records", &ctx.ok))?;
    let nt = ctx.smallest_nt(&model, filter);
    let rows: Vec<&RunRecord> = ctx
        .select(filter, &model, nt)
        .into_iter()
        .filter(|r| matches!(r.scenario, Some(Scenario::Transfer | Scenario::TargetBaseline)))
        .collect();
    if rows.is_empty() {
        return Err(empty(&format!("no transfer or target_baseline records for {model}"), &ctx.ok));
    }
    let mut by_rel: BTreeMap<SchemaRelation, BTreeMap<Scenario, Vec<&RunRecord>>> = BTreeMap::new();
    for r in &rows {
        by_rel.entry(r.cell.relation).or_default().entry(r.scenario.unwrap()).or_default().push(r);
    }
    let mut out = ReportOutput::default();
    let mut raw = String::from("relation,scenario,shift_type,intensity,replication,r2\n");
    let mut summary = String::from("relation,n,target_baseline_mean,transfer_mean,mean_difference,difference_se\n");
    let nt_label = nt.map_or("all".to_string(), |n| n.to_string());
    let mut chart = Chart::new(&format!("Transfer vs target-only R², {model}, n_t = {nt_label}"), "schema relation", "R²");
    let mut ticks = Vec::new();
    for (i, (rel, scen)) in by_rel.iter().enumerate() {
        let centre = 3.0 * i as f64 + 1.0;
        ticks.push((centre, rel.to_string()));
        for (j, s) in [Scenario::TargetBaseline, Scenario::Transfer].into_iter().enumerate() {
            let Some(rs) = scen.get(&s) else { continue };
            for r in rs {
                let _ = writeln!(
                    raw,
                    "{rel},{s},{},{},{},{}",
                    r.cell.shift_type,
                    r.cell.intensity,
                    r.cell.replication,
                    r.metrics.unwrap().r2
                );
            }
            let vals: Vec<f64> = rs.iter().map(|r| r.metrics.unwrap().r2).collect();
            let label = (i == 0).then_some(s.as_str());
            chart.area(violin_outline(&vals, centre - 0.5 + j as f64, 0.45), PALETTE[j], label);
        }
        // Paired by (shift cell, replication).
        let key = |r: &RunRecord| (r.cell.coordinate_string(), r.cell.replication);
        let base: BTreeMap<_, f64> = scen
            .get(&Scenario::TargetBaseline)
            .map(|v| v.iter().map(|r| (key(r), r.metrics.unwrap().r2)).collect())
            .unwrap_or_default();
        let trans: BTreeMap<_, f64> = scen
            .get(&Scenario::Transfer)
            .map(|v| v.iter().map(|r| (key(r), r.metrics.unwrap().r2)).collect())
            .unwrap_or_default();
        let diffs: Vec<f64> = trans.iter().filter_map(|(k, t)| base.get(k).map(|b| t - b)).collect();
        let (bm, _) = mean_se(&base.values().copied().collect::<Vec<_>>());
        let (tm, _) = mean_se(&trans.values().copied().collect::<Vec<_>>());
        let (dm, dse) = mean_se(&diffs);
        let _ = writeln!(summary, "{rel},{},{bm},{tm},{dm},{dse}", diffs.len());
        out.values.insert(format!("{rel}.mean_difference"), dm);
        let top = base.values().chain(trans.values()).copied().fold(f64::NEG_INFINITY, f64::max);
        if dm.is_finite() {
            chart.text(centre, top + 0.05, &format!("Δ = {dm:+.3}"));
        }
    }
    chart.x_ticks(ticks);
    ctx.write("violin.csv", &raw, &mut out)?;
    ctx.write("violin_summary.csv", &summary, &mut out)?;
    ctx.write("violin.svg", &chart.render(), &mut out)?;
    Ok(out)
}

fn shift_curve(ctx: &Ctx, filter: &ReportFilter) -> Result<ReportOutput> {
    let model = ctx.default_model(filter).ok_or_else(|| empty("no successful records", &ctx.ok))?;
    let scenario = filter.scenario.unwrap_or(Scenario::Transfer);
    let nt = ctx.smallest_nt(&model, filter);
    let rows: Vec<&RunRecord> = ctx
        .select(filter, &model, nt)
        .into_iter()
        .filter(|r| r.scenario == Some(scenario))
        .collect();
    if rows.is_empty() {
        return Err(empty(&format!("no {scenario} records for {model}"), &ctx.ok));
    }
    let mut by_shift: BTreeMap<ShiftType, Vec<&RunRecord>> = BTreeMap::new();
    for r in rows {
        by_shift.entry(r.cell.shift_type).or_default().push(r);
    }
    let mut out = ReportOutput::default();
    let mut table = String::from("shift_type,axis,x,r2,intensity,relation,replication\n");
    let mut slopes = String::from("shift_type,axis,n,slope\n");
    let nt_label = nt.map_or("all".to_string(), |n| n.to_string());
    let mut chart = Chart::new(&format!("R² vs drift score, {model} {scenario}, n_t = {nt_label}"), "drift score", "R²");
    for (i, (st, rs)) in by_shift.iter().enumerate() {
        let axis = shift_axis(rs[0]).0;
        let pts: Vec<(f64, f64)> = rs.iter().map(|r| (shift_axis(r).1, r.metrics.unwrap().r2)).collect();
        for (r, (x, y)) in rs.iter().zip(&pts) {
            let _ = writeln!(table, "{st},{axis},{x},{y},{},{},{}", r.cell.intensity, r.cell.relation, r.cell.replication);
        }
        let color = PALETTE[i % PALETTE.len()];
        let slope = ols_slope(&pts);
        let _ = writeln!(slopes, "{st},{axis},{},{}", pts.len(), slope.map_or(String::new(), |s| s.to_string()));
        chart.points(pts.clone(), color, Some(&format!("{st} (x = {axis})")));
        if let Some(b) = slope {
            out.values.insert(format!("{st}.slope"), b);
            let n = pts.len() as f64;
            let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
            let lo = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let hi = pts.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            chart.line(vec![(lo, my + b * (lo - mx)), (hi, my + b * (hi - mx))], color, None);
        }
    }
    ctx.write("shift_curve.csv", &table, &mut out)?;
    ctx.write("shift_curve_slopes.csv", &slopes, &mut out)?;
    ctx.write("shift_curve.svg", &chart.render(), &mut out)?;
    Ok(out)
}

fn sample_curve(ctx: &Ctx, filter: &ReportFilter) -> Result<ReportOutput> {
    let model = ctx.default_model(filter).ok_or_else(|| empty("no successful records", &ctx.ok))?;
    let rows: Vec<&RunRecord> = ctx
        .select(filter, &model, None)
        .into_iter()
        .filter(|r| matches!(r.scenario, Some(Scenario::Transfer | Scenario::TargetBaseline)))
        .collect();
    if rows.is_empty() {
        return Err(empty(&format!("no transfer or target_baseline records for {model}"), &ctx.ok));
    }
    let mut groups: BTreeMap<(SchemaRelation, Scenario), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in &rows {
        groups
            .entry((r.cell.relation, r.scenario.unwrap()))
            .or_default()
            .entry(r.cell.n_target)
            .or_default()
            .push(r.metrics.unwrap().r2);
    }
    let mut out = ReportOutput::default();
    let mut table = String::from("relation,scenario,n_target,n,r2_mean,r2_se\n");
    let mut chart = Chart::new(&format!("R² vs target sample size, {model}"), "n_t", "R²");
    for (i, ((rel, s), by_n)) in groups.iter().enumerate() {
        let mut line = Vec::new();
        for (nt, vals) in by_n {
            let (m, se) = mean_se(vals);
            let _ = writeln!(table, "{rel},{s},{nt},{},{m},{se}", vals.len());
            line.push((*nt as f64, m));
            out.values.insert(format!("{rel}.{s}.{nt}"), m);
        }
        let color = PALETTE[i % PALETTE.len()];
        chart.line(line.clone(), color, Some(&format!("{rel} / {s}")));
        chart.points(line, color, None);
    }
    ctx.write("sample_curve.csv", &table, &mut out)?;
    ctx.write("sample_curve.svg", &chart.render(), &mut out)?;
    Ok(out)
}

fn density(ctx: &Ctx, store: &Store, filter: &ReportFilter) -> Result<ReportOutput> {
    let scenario = filter.scenario.unwrap_or(Scenario::Transfer);
    let model = filter.model.clone().unwrap_or(ModelKind::FtMdn);
    let cells = store.densities()?;
    let found = cells.iter().find_map(|c| {
        let ok = filter.n_target.is_none_or(|n| c.cell.n_target == n)
            && filter.shift_type.is_none_or(|s| c.cell.shift_type == s);
        ok.then(|| c.densities.iter().find(|(m, s, _)| *m == model && *s == scenario).map(|d| (c, &d.2)))
            .flatten()
    });
    let Some((cell, dens)) = found else {
        let saved: BTreeSet<String> = cells
            .iter()
            .flat_map(|c| c.densities.iter().map(|(m, s, _)| format!("{m}/{s}")))
            .collect();
        return Err(Error::EmptySelection {
            message: format!("no saved density for {model}/{scenario} (grids need save_densities = true)"),
            available: format!("densities [{}]", saved.into_iter().collect::<Vec<_>>().join(", ")),
        });
    };
    let upper = dens.grid.last().copied().unwrap_or(1.0);
    let (centers, hist) = empirical_density(&cell.observed, 30, 0.0, upper);
    let width = upper / 30.0;
    let mut out = ReportOutput::default();
    ctx.write("density.csv", &dens.to_csv(), &mut out)?;
    let mut h = String::from("bin_center,density\n");
    for (c, v) in centers.iter().zip(&hist) {
        let _ = writeln!(h, "{c},{v}");
    }
    ctx.write("density_histogram.csv", &h, &mut out)?;
    let mut chart = Chart::new(
        &format!("Portfolio density vs observed, {model} {scenario}, {}", cell.cell.key()),
        "recovery rate",
        "density",
    );
    chart.bars(
        centers.iter().zip(&hist).map(|(c, v)| (c - width / 2.0, c + width / 2.0, *v)).collect(),
        PALETTE[1],
        Some("observed"),
    );
    chart.line(dens.grid.iter().copied().zip(dens.density.iter().copied()).collect(), PALETTE[0], Some("predicted"));
    ctx.write("density.svg", &chart.render(), &mut out)?;
    out.values.insert("modes".into(), count_modes(&dens.density) as f64);
    out.values.insert("m".into(), dens.m as f64);
    Ok(out)
}

/// Write one figure and its backing tables into `<store>/reports/`.
pub fn report(store_dir: &Path, kind: ReportKind, filter: &ReportFilter) -> Result<ReportOutput> {
    let store = Store::new(store_dir);
    let records = store.records()?;
    let ok: Vec<&RunRecord> = records.iter().filter(|r| !r.is_failure()).collect();
    let dir = store_dir.join("reports");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let ctx = Ctx { ok, dir };
    match kind {
        ReportKind::Violin => violin(&ctx, filter),
        ReportKind::ShiftCurve => shift_curve(&ctx, filter),
        ReportKind::SampleCurve => sample_curve(&ctx, filter),
        ReportKind::Density => density(&ctx, &store, filter),
    }
}
