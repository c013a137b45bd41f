//! Global feature universe, domain presence, vocabularies, scaling, splits
//! and batch encoding.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::datagen::{ColumnData, Domain, FeatureKind, SimDataset};
use crate::error::{Error, Result};
use crate::seeds;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaFeature {
    pub name: String,
    pub kind: FeatureKind,
    pub in_source: bool,
    pub in_target: bool,
}

/// Ordered union of source and target features with per-domain presence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    pub features: Vec<SchemaFeature>,
}

/// Source order first, then target-only features in target order.
pub fn build_schema(source: &[(String, FeatureKind)], target: &[(String, FeatureKind)]) -> Result<Schema> {
    for (side, list) in [("source", source), ("target", target)] {
        let mut seen = BTreeSet::new();
        for (name, _) in list {
            if !seen.insert(name) {
                return Err(Error::Schema(format!("duplicate {side} feature `{name}`")));
            }
        }
    }
    let tmap: BTreeMap<&str, FeatureKind> = target.iter().map(|(n, k)| (n.as_str(), *k)).collect();
    let mut features = Vec::with_capacity(source.len() + target.len());
    for (name, kind) in source {
        if let Some(tk) = tmap.get(name.as_str()) {
            if tk != kind {
                return Err(Error::SchemaConflict {
                    name: name.clone(),
                    left: kind.to_string(),
                    right: tk.to_string(),
                });
            }
        }
        features.push(SchemaFeature {
            name: name.clone(),
            kind: *kind,
            in_source: true,
            in_target: tmap.contains_key(name.as_str()),
        });
    }
    let smap: BTreeSet<&str> = source.iter().map(|(n, _)| n.as_str()).collect();
    for (name, kind) in target {
        if !smap.contains(name.as_str()) {
            features.push(SchemaFeature {
                name: name.clone(),
                kind: *kind,
                in_source: false,
                in_target: true,
            });
        }
    }
    Ok(Schema { features })
}

fn typed_columns(data: &SimDataset) -> Vec<(String, FeatureKind)> {
    data.columns.iter().map(|c| (c.name.clone(), c.kind())).collect()
}

impl Schema {
    pub fn from_datasets(source: &SimDataset, target: &SimDataset) -> Result<Schema> {
        build_schema(&typed_columns(source), &typed_columns(target))
    }

    /// Schema of a single feature list, present in both domains.
    pub fn single(features: &[(String, FeatureKind)]) -> Result<Schema> {
        build_schema(features, features)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn names(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&SchemaFeature> {
        self.features.iter().find(|f| f.name == name)
    }

    pub fn presence(&self, domain: Domain) -> Vec<bool> {
        self.features
            .iter()
            .map(|f| match domain {
                Domain::Source => f.in_source,
                Domain::Target => f.in_target,
            })
            .collect()
    }

    fn names_where(&self, pred: impl Fn(&SchemaFeature) -> bool) -> Vec<String> {
        self.features.iter().filter(|f| pred(f)).map(|f| f.name.clone()).collect()
    }

    pub fn shared(&self) -> Vec<String> {
        self.names_where(|f| f.in_source && f.in_target)
    }

    pub fn source_only(&self) -> Vec<String> {
        self.names_where(|f| f.in_source && !f.in_target)
    }

    pub fn target_only(&self) -> Vec<String> {
        self.names_where(|f| !f.in_source && f.in_target)
    }

    pub fn source_features(&self) -> Vec<(String, FeatureKind)> {
        self.features
            .iter()
            .filter(|f| f.in_source)
            .map(|f| (f.name.clone(), f.kind))
            .collect()
    }

    pub fn target_features(&self) -> Vec<(String, FeatureKind)> {
        self.features
            .iter()
            .filter(|f| f.in_target)
            .map(|f| (f.name.clone(), f.kind))
            .collect()
    }

    /// Sub-schema over `keep`, in this schema's order.
    pub fn restrict(&self, keep: &[String]) -> Schema {
        Schema {
            features: self
                .features
                .iter()
                .filter(|f| keep.contains(&f.name))
                .cloned()
                .collect(),
        }
    }
}

/// Per categorical feature: sorted category labels, with the unknown index
/// equal to the label count.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CategoryVocab {
    pub categories: BTreeMap<String, Vec<String>>,
}

pub const UNK: &str = "<UNK>";

impl CategoryVocab {
    pub fn labels(&self, feature: &str) -> Option<&[String]> {
        self.categories.get(feature).map(|v| v.as_slice())
    }

    /// Table size including the unknown slot.
    pub fn size(&self, feature: &str) -> Option<usize> {
        self.categories.get(feature).map(|v| v.len() + 1)
    }

    pub fn unk(&self, feature: &str) -> Option<u32> {
        self.categories.get(feature).map(|v| v.len() as u32)
    }

    pub fn index(&self, feature: &str, label: &str) -> Option<u32> {
        let cats = self.categories.get(feature)?;
        Some(match cats.binary_search_by(|c| c.as_str().cmp(label)) {
            Ok(i) => i as u32,
            Err(_) => cats.len() as u32,
        })
    }
}

fn observed_labels(data: &SimDataset, name: &str, into: &mut BTreeSet<String>) {
    if let Some(c) = data.column(name) {
        if let ColumnData::Categorical { codes, labels } = &c.data {
            let mut used = vec![false; labels.len()];
            for &k in codes {
                used[k as usize] = true;
            }
            for (l, u) in labels.iter().zip(used) {
                if u {
                    into.insert(l.clone());
                }
            }
        }
    }
}

/// Vocabulary from categories observed in the two training splits.
pub fn build_vocab(source_train: &SimDataset, target_train: &SimDataset, schema: &Schema) -> CategoryVocab {
    let mut categories = BTreeMap::new();
    for f in schema.features.iter().filter(|f| f.kind == FeatureKind::Categorical) {
        let mut seen = BTreeSet::new();
        observed_labels(source_train, &f.name, &mut seen);
        observed_labels(target_train, &f.name, &mut seen);
        categories.insert(f.name.clone(), seen.into_iter().collect());
    }
    CategoryVocab { categories }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub mean: f64,
    pub sd: f64,
}

/// Per numeric feature mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Standardizer {
    pub scaling: BTreeMap<String, Scaling>,
}

fn scaling_of(values: &[f64]) -> Scaling {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    Scaling {
        mean,
        sd: if sd > 0.0 && sd.is_finite() { sd } else { 1.0 },
    }
}

impl Standardizer {
    /// Fit on source-train rows. Numeric features absent from the source are
    /// fitted on `fallback` (normally target-train) if given.
    pub fn fit(source_train: &SimDataset, fallback: Option<&SimDataset>, schema: &Schema) -> Result<Self> {
        if source_train.is_empty() {
            return Err(Error::Config("cannot fit a standardizer on empty data".into()));
        }
        let mut scaling = BTreeMap::new();
        for f in schema.features.iter().filter(|f| f.kind == FeatureKind::Numeric) {
            let col = source_train
                .column(&f.name)
                .or_else(|| fallback.and_then(|d| d.column(&f.name)))
                .and_then(|c| c.numeric());
            match col {
                Some(v) if !v.is_empty() => {
                    scaling.insert(f.name.clone(), scaling_of(v));
                }
                _ => {}
            }
        }
        Ok(Self { scaling })
    }

    pub fn apply(&self, feature: &str, values: &[f64]) -> Option<Vec<f64>> {
        let s = self.scaling.get(feature)?;
        Some(values.iter().map(|v| (v - s.mean) / s.sd).collect())
    }
}

/// Everything needed to turn a dataset into model inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub vocab: CategoryVocab,
    pub standardizer: Standardizer,
}

impl Preprocessor {
    pub fn fit(source_train: &SimDataset, target_train: &SimDataset, schema: &Schema) -> Result<Self> {
        Ok(Self {
            vocab: build_vocab(source_train, target_train, schema),
            standardizer: Standardizer::fit(source_train, Some(target_train), schema)?,
        })
    }
}

/// Self-describing manifest stored beside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaManifest {
    pub schema: Schema,
    pub preprocessor: Preprocessor,
}

/// Model inputs for `n` rows over an ordered feature list of length `L`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedBatch {
    pub n: usize,
    pub features: Vec<String>,
    /// `n × L` standardized numeric values; 0 where masked or categorical.
    pub values: Vec<f64>,
    /// `n × L` category indices; the unknown index where masked, 0 for numeric.
    pub codes: Vec<u32>,
    /// `n × (L + 1)`, CLS slot first and always set.
    pub mask: Vec<bool>,
    pub target: Vec<f64>,
}

impl EncodedBatch {
    pub fn width(&self) -> usize {
        self.features.len()
    }

    #[inline]
    pub fn is_active(&self, row: usize, feature: usize) -> bool {
        self.mask[row * (self.width() + 1) + feature + 1]
    }

    /// Whether feature `j` is active in any row.
    pub fn any_active(&self, feature: usize) -> bool {
        (0..self.n).any(|i| self.is_active(i, feature))
    }

    pub fn value(&self, row: usize, feature: usize) -> f64 {
        self.values[row * self.width() + feature]
    }

    pub fn code(&self, row: usize, feature: usize) -> u32 {
        self.codes[row * self.width() + feature]
    }

    pub fn rows(&self, idx: &[usize]) -> EncodedBatch {
        let l = self.width();
        let mut out = EncodedBatch {
            n: idx.len(),
            features: self.features.clone(),
            values: Vec::with_capacity(idx.len() * l),
            codes: Vec::with_capacity(idx.len() * l),
            mask: Vec::with_capacity(idx.len() * (l + 1)),
            target: Vec::with_capacity(idx.len()),
        };
        for &i in idx {
            out.values.extend_from_slice(&self.values[i * l..(i + 1) * l]);
            out.codes.extend_from_slice(&self.codes[i * l..(i + 1) * l]);
            out.mask.extend_from_slice(&self.mask[i * (l + 1)..(i + 1) * (l + 1)]);
            out.target.push(self.target[i]);
        }
        out
    }

    /// Clear feature `feature` in every row.
    pub fn mask_feature(&mut self, feature: usize) {
        let l = self.width();
        for i in 0..self.n {
            self.mask[i * (l + 1) + feature + 1] = false;
        }
    }
}

/// Encode `data` against `schema`. Features missing from `data` are masked.
pub fn encode(data: &SimDataset, schema: &Schema, prep: &Preprocessor) -> Result<EncodedBatch> {
    let n = data.len();
    let l = schema.len();
    let mut batch = EncodedBatch {
        n,
        features: schema.names().into_iter().map(String::from).collect(),
        values: vec![0.0; n * l],
        codes: vec![0; n * l],
        mask: vec![false; n * (l + 1)],
        target: data.recovery.clone(),
    };
    for i in 0..n {
        batch.mask[i * (l + 1)] = true;
    }
    for (j, f) in schema.features.iter().enumerate() {
        let col = data.column(&f.name);
        if let Some(c) = col {
            if c.kind() != f.kind {
                return Err(Error::Encoding(format!(
                    "`{}` is {} in the data but {} in the schema",
                    f.name,
                    c.kind(),
                    f.kind
                )));
            }
        }
        match f.kind {
            FeatureKind::Numeric => {
                let Some(c) = col else { continue };
                let z = prep
                    .standardizer
                    .apply(&f.name, c.numeric().expect("numeric column"))
                    .ok_or_else(|| Error::Encoding(format!("no scaling for `{}`", f.name)))?;
                for (i, v) in z.into_iter().enumerate() {
                    batch.values[i * l + j] = v;
                    batch.mask[i * (l + 1) + j + 1] = true;
                }
            }
            FeatureKind::Categorical => {
                let unk = prep
                    .vocab
                    .unk(&f.name)
                    .ok_or_else(|| Error::Encoding(format!("no vocabulary for `{}`", f.name)))?;
                for i in 0..n {
                    batch.codes[i * l + j] = unk;
                }
                let Some(c) = col else { continue };
                let ColumnData::Categorical { codes, labels } = &c.data else {
                    unreachable!("kind checked above")
                };
                let lookup: Vec<u32> = labels
                    .iter()
                    .map(|lab| prep.vocab.index(&f.name, lab).expect("vocab present"))
                    .collect();
                for (i, &k) in codes.iter().enumerate() {
                    batch.codes[i * l + j] = lookup[k as usize];
                    batch.mask[i * (l + 1) + j + 1] = true;
                }
            }
        }
    }
    Ok(batch)
}

/// Row indices of a stratified train/validation split. Strata are the
/// deciles of the recovery rate; strata with fewer than two rows are merged
/// into a neighbour.
pub fn split_indices(recovery: &[f64], val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n = recovery.len();
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("validation fraction {val_fraction} outside (0, 1)")));
    }
    if n < 10 {
        return Err(Error::Config(format!("need at least 10 rows to split, got {n}")));
    }
    let mut sorted = recovery.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut edges: Vec<f64> = (1..10).map(|q| sorted[q * n / 10]).collect();
    edges.dedup();
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); edges.len() + 1];
    for (i, &r) in recovery.iter().enumerate() {
        strata[edges.partition_point(|&e| e < r)].push(i);
    }
    strata.retain(|s| !s.is_empty());
    let mut k = 0;
    while k < strata.len() {
        if strata[k].len() < 2 && strata.len() > 1 {
            let small = strata.remove(k);
            let into = if k > 0 { k - 1 } else { 0 };
            strata[into].extend(small);
            k = 0;
        } else {
            k += 1;
        }
    }
    let total = (n as f64 * val_fraction).round() as usize;
    let quotas: Vec<f64> = strata.iter().map(|s| s.len() as f64 * val_fraction).collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..strata.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(take.iter().sum());
    for &s in order.iter().cycle().take(order.len() * 2) {
        if left == 0 {
            break;
        }
        if take[s] < strata[s].len() {
            take[s] += 1;
            left -= 1;
        }
    }
    let mut rng = seeds::derive_rng(seed, "split");
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, t) in strata.iter_mut().zip(take) {
        s.sort_unstable();
        s.shuffle(&mut rng);
        val.extend_from_slice(&s[..t]);
        train.extend_from_slice(&s[t..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((train, val))
}

pub fn split_stratified(data: &SimDataset, val_fraction: f64, seed: u64) -> Result<(SimDataset, SimDataset)> {
    let (train, val) = split_indices(&data.recovery, val_fraction, seed)?;
    Ok((data.subset(&train), data.subset(&val)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_dataset, Column, GeneratorConfig, ShiftSpec, ShiftType};
    use proptest::prelude::*;

    fn typed(names: &[&str]) -> Vec<(String, FeatureKind)> {
        names.iter().map(|n| (n.to_string(), FeatureKind::Numeric)).collect()
    }

    fn dataset(columns: Vec<Column>, recovery: Vec<f64>) -> SimDataset {
        SimDataset {
            secured: recovery.iter().map(|&r| r > 0.5).collect(),
            columns,
            recovery,
            schema_id: "t".into(),
            domain: Domain::Source,
            seed: 0,
        }
    }

    fn cat(name: &str, labels: &[&str], codes: Vec<u32>) -> Column {
        Column {
            name: name.into(),
            data: ColumnData::Categorical {
                codes,
                labels: labels.iter().map(|s| s.to_string()).collect(),
            },
        }
    }

    fn num(name: &str, v: Vec<f64>) -> Column {
        Column {
            name: name.into(),
            data: ColumnData::Numeric(v),
        }
    }

    #[test]
    fn schema_set_algebra() {
        let s = build_schema(&typed(&["a", "b"]), &typed(&["a", "b"])).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.shared(), vec!["a", "b"]);
        assert!(s.source_only().is_empty() && s.target_only().is_empty());

        let s = build_schema(&typed(&["a", "b", "c"]), &typed(&["b", "c", "d"])).unwrap();
        assert_eq!(s.names(), vec!["a", "b", "c", "d"]);
        assert_eq!(s.shared(), vec!["b", "c"]);
        assert_eq!(s.source_only(), vec!["a"]);
        assert_eq!(s.target_only(), vec!["d"]);
        assert_eq!(s.presence(Domain::Target), vec![false, true, true, true]);
    }

    #[test]
    fn schema_large_overlap_counts() {
        let src: Vec<String> = (0..73).map(|i| format!("f{i}")).collect();
        let tgt: Vec<String> = (36..200).map(|i| format!("f{i}")).collect();
        let t = |v: &[String]| v.iter().map(|n| (n.clone(), FeatureKind::Numeric)).collect::<Vec<_>>();
        let s = build_schema(&t(&src), &t(&tgt)).unwrap();
        assert_eq!((s.len(), s.shared().len(), s.source_only().len(), s.target_only().len()), (200, 37, 36, 127));
    }

    #[test]
    fn schema_conflicts_and_duplicates() {
        let err = build_schema(
            &[("a".into(), FeatureKind::Numeric)],
            &[("a".into(), FeatureKind::Categorical)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::SchemaConflict { .. }));
        assert!(build_schema(&typed(&["a", "a"]), &typed(&["a"])).is_err());
    }

    #[test]
    fn vocab_union_and_unk() {
        let s = dataset(vec![cat("c", &["A", "B", "Z"], vec![0, 1, 0])], vec![0.1, 0.2, 0.3]);
        let t = dataset(vec![cat("c", &["B", "C"], vec![0, 1])], vec![0.1, 0.2]);
        let schema = Schema::from_datasets(&s, &t).unwrap();
        let v = build_vocab(&s, &t, &schema);
        assert_eq!(v.labels("c").unwrap(), &["A", "B", "C"]);
        assert_eq!(v.size("c"), Some(4));
        assert_eq!(v.index("c", "D"), Some(3));
        assert_eq!(v.index("c", "Z"), Some(3));
        assert_eq!(v.index("c", "C"), Some(2));

        let t2 = dataset(vec![num("x", vec![1.0, 2.0])], vec![0.1, 0.2]);
        let schema = Schema::from_datasets(&s, &t2).unwrap();
        assert_eq!(build_vocab(&s, &t2, &schema).labels("c").unwrap(), &["A", "B"]);
    }

    #[test]
    fn standardizer_examples() {
        let d = dataset(vec![num("x", vec![1.0, 2.0, 3.0]), num("k", vec![5.0; 3])], vec![0.1, 0.2, 0.3]);
        let schema = Schema::from_datasets(&d, &d).unwrap();
        let st = Standardizer::fit(&d, None, &schema).unwrap();
        let z = st.apply("x", &[1.0, 2.0, 3.0]).unwrap();
        let want = [-1.224744871391589, 0.0, 1.224744871391589];
        for (a, b) in z.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(st.apply("k", &[5.0, 5.0, 5.0]).unwrap(), vec![0.0; 3]);
        let empty = d.subset(&[]);
        assert!(Standardizer::fit(&empty, None, &schema).is_err());
    }

    #[test]
    fn target_under_covariate_shift_is_off_centre() {
        let base = GeneratorConfig::default();
        let shift = ShiftSpec::standard(ShiftType::Covariate, 2.0, &base);
        let (s, t) = crate::datagen::generate_domain_pair(&base, &shift, 4000, 4000, 11).unwrap();
        let schema = Schema::from_datasets(&s, &t).unwrap();
        let prep = Preprocessor::fit(&s, &t, &schema).unwrap();
        let es = encode(&s, &schema, &prep).unwrap();
        let et = encode(&t, &schema, &prep).unwrap();
        let j = schema.index("collateral_ratio").unwrap();
        let mean = |b: &EncodedBatch| (0..b.n).map(|i| b.value(i, j)).sum::<f64>() / b.n as f64;
        let var = |b: &EncodedBatch| {
            let m = mean(b);
            (0..b.n).map(|i| (b.value(i, j) - m).powi(2)).sum::<f64>() / b.n as f64
        };
        assert!(mean(&es).abs() < 1e-10 && (var(&es) - 1.0).abs() < 1e-10);
        assert!(mean(&et) > 0.5);
    }

    #[test]
    fn encoding_masks_absent_and_maps_unknown() {
        let s = dataset(
            vec![num("x", vec![1.0, 3.0]), cat("c", &["A", "B"], vec![0, 1])],
            vec![0.1, 0.9],
        );
        let t = dataset(vec![cat("c", &["A", "Q"], vec![1, 0])], vec![0.2, 0.8]);
        let schema = Schema::from_datasets(&s, &t).unwrap();
        let prep = Preprocessor::fit(&s, &s, &schema).unwrap();
        let b = encode(&t, &schema, &prep).unwrap();
        assert_eq!(b.mask, vec![true, false, true, true, false, true]);
        assert_eq!(b.codes, vec![0, 2, 0, 0]);
        assert_eq!(b.values, vec![0.0; 4]);
        let b = encode(&s, &schema, &prep).unwrap();
        assert_eq!(b.values, vec![-1.0, 0.0, 1.0, 0.0]);
        assert_eq!(b.codes, vec![0, 0, 0, 1]);
    }

    #[test]
    fn split_counts() {
        let r: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let (tr, va) = split_indices(&r, 0.2, 3).unwrap();
        assert_eq!((tr.len(), va.len()), (80, 20));
        let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert_eq!(split_indices(&r, 0.2, 3).unwrap(), (tr, va));

        let flat = vec![0.5; 50];
        let (tr, va) = split_indices(&flat, 0.2, 1).unwrap();
        assert_eq!((tr.len(), va.len()), (40, 10));
        assert!(split_indices(&flat[..9], 0.2, 1).is_err());
        assert!(split_indices(&flat, 1.0, 1).is_err());
    }

    #[test]
    fn split_balances_bimodal_groups() {
        for seed in 0..20 {
            let r: Vec<f64> = (0..303)
                .map(|i| if i % 2 == 0 { 0.01 * (i % 7) as f64 } else { 1.0 - 0.01 * (i % 5) as f64 })
                .collect();
            let high: Vec<usize> = (0..r.len()).filter(|&i| r[i] > 0.5).collect();
            let (_, va) = split_indices(&r, 0.2, seed).unwrap();
            let got = va.iter().filter(|i| r[**i] > 0.5).count() as f64;
            assert!((got - 0.2 * high.len() as f64).abs() <= 2.0, "{got}");
        }
    }

    proptest! {
        #[test]
        fn split_partitions_and_respects_share(r in proptest::collection::vec(0.0f64..1.0, 10..300), f in 0.05f64..0.95, seed in 0u64..1000) {
            let (tr, va) = split_indices(&r, f, seed).unwrap();
            prop_assert_eq!(tr.len() + va.len(), r.len());
            prop_assert_eq!(va.len(), (r.len() as f64 * f).round() as usize);
            let mut all: Vec<usize> = tr.iter().chain(&va).copied().collect();
            all.sort_unstable();
            all.dedup();
            prop_assert_eq!(all.len(), r.len());
        }
    }

    #[test]
    fn schema_and_vocab_ignore_row_order() {
        let cfg = GeneratorConfig::default();
        let d = generate_dataset(&cfg, 300, 4, Domain::Source).unwrap();
        let mut rows: Vec<usize> = (0..d.len()).collect();
        rows.reverse();
        let r = d.subset(&rows);
        let s1 = Schema::from_datasets(&d, &d).unwrap();
        assert_eq!(s1, Schema::from_datasets(&r, &r).unwrap());
        assert_eq!(build_vocab(&d, &d, &s1), build_vocab(&r, &r, &s1));
    }

    #[test]
    fn fitted_objects_ignore_validation_rows() {
        let cfg = GeneratorConfig::default();
        let d = generate_dataset(&cfg, 1000, 2, Domain::Source).unwrap();
        let (tr, _va) = split_stratified(&d, 0.2, 5).unwrap();
        let schema = Schema::from_datasets(&d, &d).unwrap();
        let a = Preprocessor::fit(&tr, &tr, &schema).unwrap();
        let b = Preprocessor::fit(&tr.subset(&(0..tr.len()).collect::<Vec<_>>()), &tr, &schema).unwrap();
        assert_eq!(a, b);
    }
}
