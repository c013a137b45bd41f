use std::collections::BTreeMap;

use super::train::Trainable;
use crate::datagen::FeatureKind;
use crate::error::{Error, Result};
use crate::model::{chunks, Predictions, TokenFeature};
use crate::nn::{fan_in_uniform, uniform, Matrix, ParamStore, Tape, Var};
use crate::schema::EncodedBatch;
use crate::seeds::{self, Rng};

/// Two-hidden-layer GELU regressor over standardized numeric values and
/// one-hot categories. Masked features contribute zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    pub features: Vec<TokenFeature>,
    pub hidden: usize,
    pub params: ParamStore,
}

fn width(f: &TokenFeature) -> usize {
    match f.kind {
        FeatureKind::Numeric => 1,
        FeatureKind::Categorical => f.categories.len() + 1,
    }
}

impl MlpModel {
    pub fn new(features: Vec<TokenFeature>, hidden: usize, seed: u64) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("MLP hidden width must be >= 1".into()));
        }
        let p_in: usize = features.iter().map(width).sum();
        let init = |name: &str| seeds::derive_rng(seed, &format!("init/{name}"));
        let mut params = ParamStore::new();
        let mut layer = |w: &str, b: &str, rows: usize, cols: usize| {
            params.add(w, fan_in_uniform(rows, cols, &mut init(w)), true);
            let bound = 1.0 / (rows.max(1) as f64).sqrt();
            params.add(b, uniform(1, cols, bound, &mut init(b)), false);
        };
        layer("in.w", "in.b", p_in, hidden);
        layer("hid.w", "hid.b", hidden, hidden);
        layer("out.w", "out.b", hidden, 1);
        Ok(Self {
            features,
            hidden,
            params,
        })
    }

    pub fn input_width(&self) -> usize {
        self.features.iter().map(width).sum()
    }

    fn check_batch(&self, batch: &EncodedBatch) -> Result<()> {
        if batch.features.len() != self.features.len()
            || batch.features.iter().zip(&self.features).any(|(a, b)| a != &b.name)
        {
            return Err(Error::Encoding("batch features do not match MLP inputs".into()));
        }
        Ok(())
    }

    /// `n × P` design matrix.
    pub fn design(&self, batch: &EncodedBatch) -> Result<Matrix> {
        self.check_batch(batch)?;
        let p = self.input_width();
        let mut x = Matrix::zeros(batch.n, p);
        let mut offset = 0;
        for (j, f) in self.features.iter().enumerate() {
            let w = width(f);
            for i in 0..batch.n {
                if !batch.is_active(i, j) {
                    continue;
                }
                match f.kind {
                    FeatureKind::Numeric => x.set(i, offset, batch.value(i, j)),
                    FeatureKind::Categorical => {
                        let c = batch.code(i, j) as usize;
                        if c >= w {
                            return Err(Error::Encoding(format!("category index {c} out of range for `{}`", f.name)));
                        }
                        x.set(i, offset + c, 1.0);
                    }
                }
            }
            offset += w;
        }
        Ok(x)
    }

    fn forward(&self, tape: &mut Tape<'_>, batch: &EncodedBatch) -> Result<Var> {
        let x = tape.constant(self.design(batch)?);
        let mut h = x;
        for (w, b) in [("in.w", "in.b"), ("hid.w", "hid.b")] {
            let (w, b) = (tape.param_named(w), tape.param_named(b));
            let a = tape.affine(h, w, b);
            h = tape.gelu(a);
        }
        let (w, b) = (tape.param_named("out.w"), tape.param_named("out.b"));
        Ok(tape.affine(h, w, b))
    }

    /// Input-layer surgery onto a new feature list: rows of shared features
    /// (and shared categories) are copied, new rows freshly initialised,
    /// dropped rows discarded. Hidden and output layers are copied.
    pub fn with_features(&self, features: Vec<TokenFeature>, seed: u64) -> Result<MlpModel> {
        let old: BTreeMap<&str, (usize, &TokenFeature)> = {
            let mut off = 0;
            self.features
                .iter()
                .map(|f| {
                    let e = (f.name.as_str(), (off, f));
                    off += width(f);
                    e
                })
                .collect()
        };
        let mut out = MlpModel::new(features, self.hidden, seed)?;
        let src = self.params.value(self.params.expect("in.w")).clone();
        let id = out.params.expect("in.w");
        let mut offset = 0;
        let feats = out.features.clone();
        for f in &feats {
            if let Some(&(o_off, o)) = old.get(f.name.as_str()) {
                if o.kind != f.kind {
                    return Err(Error::SchemaConflict {
                        name: f.name.clone(),
                        left: o.kind.to_string(),
                        right: f.kind.to_string(),
                    });
                }
                let dst = out.params.value_mut(id);
                match f.kind {
                    FeatureKind::Numeric => dst.row_mut(offset).copy_from_slice(src.row(o_off)),
                    FeatureKind::Categorical => {
                        for (r, label) in f.categories.iter().enumerate() {
                            if let Some(k) = o.categories.iter().position(|c| c == label) {
                                dst.row_mut(offset + r).copy_from_slice(src.row(o_off + k));
                            }
                        }
                        let unk = f.categories.len();
                        dst.row_mut(offset + unk).copy_from_slice(src.row(o_off + o.categories.len()));
                    }
                }
            }
            offset += width(f);
        }
        for name in ["in.b", "hid.w", "hid.b", "out.w", "out.b"] {
            let v = self.params.value(self.params.expect(name)).clone();
            let id = out.params.expect(name);
            *out.params.value_mut(id) = v;
        }
        Ok(out)
    }
}

impl Trainable for MlpModel {
    fn store(&self) -> &ParamStore {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn batch_loss(&self, tape: &mut Tape<'_>, batch: &EncodedBatch, _rng: Option<&mut Rng>) -> Result<Var> {
        let y = self.forward(tape, batch)?;
        Ok(tape.mse(y, &batch.target))
    }

    fn eval_loss(&self, batch: &EncodedBatch) -> Result<f64> {
        let pred = self.predict(batch)?;
        Ok(pred
            .mean
            .iter()
            .zip(&batch.target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            / batch.n as f64)
    }

    fn predict(&self, batch: &EncodedBatch) -> Result<Predictions> {
        let mut mean = Vec::with_capacity(batch.n);
        for idx in chunks(batch.n) {
            let sub = batch.rows(&idx);
            let mut tape = Tape::new(&self.params);
            let y = self.forward(&mut tape, &sub)?;
            mean.extend_from_slice(&tape.value(y).data);
        }
        Ok(Predictions { mean, mixtures: None })
    }
}
