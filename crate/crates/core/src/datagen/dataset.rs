use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::FeatureKind;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl std::fmt::Display for Domain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Domain::Source => write!(f, "source"),
            Domain::Target => write!(f, "target"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ColumnData {
    Numeric(Vec<f64>),
    /// Class codes index into `labels`.
    Categorical { codes: Vec<u32>, labels: Vec<String> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub data: ColumnData,
}

impl Column {
    pub fn kind(&self) -> FeatureKind {
        match self.data {
            ColumnData::Numeric(_) => FeatureKind::Numeric,
            ColumnData::Categorical { .. } => FeatureKind::Categorical,
        }
    }

    pub fn len(&self) -> usize {
        match &self.data {
            ColumnData::Numeric(v) => v.len(),
            ColumnData::Categorical { codes, .. } => codes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn numeric(&self) -> Option<&[f64]> {
        match &self.data {
            ColumnData::Numeric(v) => Some(v),
            _ => None,
        }
    }

    /// Category label of row `i` (categorical columns only).
    pub fn label(&self, i: usize) -> Option<&str> {
        match &self.data {
            ColumnData::Categorical { codes, labels } => Some(&labels[codes[i] as usize]),
            _ => None,
        }
    }

    fn subset(&self, rows: &[usize]) -> Column {
        let data = match &self.data {
            ColumnData::Numeric(v) => ColumnData::Numeric(rows.iter().map(|&i| v[i]).collect()),
            ColumnData::Categorical { codes, labels } => ColumnData::Categorical {
                codes: rows.iter().map(|&i| codes[i]).collect(),
                labels: labels.clone(),
            },
        };
        Column {
            name: self.name.clone(),
            data,
        }
    }
}

/// A simulated portfolio: feature columns, recovery rates in `[0, 1]` and the
/// secured indicator, tagged with its schema, domain and seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SimDataset {
    pub columns: Vec<Column>,
    pub recovery: Vec<f64>,
    pub secured: Vec<bool>,
    pub schema_id: String,
    pub domain: Domain,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub schema_id: String,
    pub domain: Domain,
    pub seed: u64,
    pub rows: usize,
    pub features: Vec<(String, FeatureKind)>,
}

impl SimDataset {
    pub fn len(&self) -> usize {
        self.recovery.len()
    }

    pub fn is_empty(&self) -> bool {
        self.recovery.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<&Column> {
        self.columns.iter().find(|c| c.name == name)
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.columns.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn subset(&self, rows: &[usize]) -> SimDataset {
        SimDataset {
            columns: self.columns.iter().map(|c| c.subset(rows)).collect(),
            recovery: rows.iter().map(|&i| self.recovery[i]).collect(),
            secured: rows.iter().map(|&i| self.secured[i]).collect(),
            schema_id: self.schema_id.clone(),
            domain: self.domain,
            seed: self.seed,
        }
    }

    /// Keep only the named columns, in the dataset's own order.
    pub fn select_features(&self, keep: &[&str]) -> SimDataset {
        let mut out = self.clone();
        out.columns.retain(|c| keep.contains(&c.name.as_str()));
        out
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            schema_id: self.schema_id.clone(),
            domain: self.domain,
            seed: self.seed,
            rows: self.len(),
            features: self
                .columns
                .iter()
                .map(|c| (c.name.clone(), c.kind()))
                .collect(),
        }
    }

    /// Columnar text: header of feature names then `recovery_rate,secured`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for c in &self.columns {
            out.push_str(&c.name);
            out.push(',');
        }
        out.push_str("recovery_rate,secured\n");
        for i in 0..self.len() {
            for c in &self.columns {
                match &c.data {
                    ColumnData::Numeric(v) => write!(out, "{}", v[i]).unwrap(),
                    ColumnData::Categorical { codes, labels } => {
                        out.push_str(&labels[codes[i] as usize])
                    }
                }
                out.push(',');
            }
            writeln!(out, "{},{}", self.recovery[i], u8::from(self.secured[i])).unwrap();
        }
        out
    }

    /// Writes `path` and the `_seed` sidecar next to it.
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))?;
        let side = sidecar_path(path);
        let meta = serde_json::to_string_pretty(&self.meta())?;
        fs::write(&side, meta).map_err(|e| Error::io(&side, e))?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<SimDataset> {
        let side = sidecar_path(path);
        let meta: DatasetMeta = serde_json::from_str(
            &fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?,
        )?;
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, meta)
    }

    pub fn from_csv(text: &str, meta: DatasetMeta) -> Result<SimDataset> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Config("empty dataset file".into()))?
            .split(',')
            .collect();
        let nf = meta.features.len();
        let expected: Vec<&str> = meta
            .features
            .iter()
            .map(|(n, _)| n.as_str())
            .chain(["recovery_rate", "secured"])
            .collect();
        if header != expected {
            return Err(Error::Config("dataset header does not match its sidecar".into()));
        }
        let mut numeric: Vec<Vec<f64>> = vec![Vec::new(); nf];
        let mut cats: Vec<Vec<String>> = vec![Vec::new(); nf];
        let mut recovery = Vec::new();
        let mut secured = Vec::new();
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number `{s}` in dataset")))
        };
        for line in lines.filter(|l| !l.is_empty()) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != nf + 2 {
                return Err(Error::Config("ragged dataset row".into()));
            }
            for (j, (_, kind)) in meta.features.iter().enumerate() {
                match kind {
                    FeatureKind::Numeric => numeric[j].push(parse(cells[j])?),
                    FeatureKind::Categorical => cats[j].push(cells[j].to_string()),
                }
            }
            recovery.push(parse(cells[nf])?);
            secured.push(cells[nf + 1] == "1");
        }
        let columns = meta
            .features
            .iter()
            .enumerate()
            .map(|(j, (name, kind))| {
                let data = match kind {
                    FeatureKind::Numeric => ColumnData::Numeric(std::mem::take(&mut numeric[j])),
                    FeatureKind::Categorical => {
                        let mut labels: Vec<String> = cats[j].clone();
                        labels.sort();
                        labels.dedup();
                        let codes = cats[j]
                            .iter()
                            .map(|l| labels.binary_search(l).unwrap() as u32)
                            .collect();
                        ColumnData::Categorical { codes, labels }
                    }
                };
                Column {
                    name: name.clone(),
                    data,
                }
            })
            .collect();
        Ok(SimDataset {
            columns,
            recovery,
            secured,
            schema_id: meta.schema_id,
            domain: meta.domain,
            seed: meta.seed,
        })
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}_seed.json"))
}
