//! Feature-token transformer with a mixture-density (or regression) head.

mod checkpoint;
mod mixture;

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use mixture::{mdn_nll, mixture_mean, mixture_pdf, MixtureOutput};

use crate::datagen::FeatureKind;
use crate::error::{Error, Result};
use crate::nn::{fan_in_uniform, normal, Matrix, MdnTransform, ParamStore, Tape, Var};
use crate::schema::{CategoryVocab, EncodedBatch, Schema};
use crate::seeds::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_mult: f64,
    pub k: usize,
    pub tau: f64,
    pub mu_max: f64,
    pub sigma_floor: f64,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            blocks: 3,
            heads: 4,
            ffn_mult: 4.0 / 3.0,
            k: 2,
            tau: 1.0,
            mu_max: 1.0,
            sigma_floor: 1e-3,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("model config: {m}")));
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return bad("d must be a positive multiple of heads");
        }
        if self.k == 0 {
            return bad("k must be >= 1");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        if !(self.mu_max > 0.0 && self.mu_max <= 1.2) {
            return bad("mu_max must lie in (0, 1.2]");
        }
        if !(self.sigma_floor > 0.0) {
            return bad("sigma_floor must be > 0");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.ffn_mult > 0.0) {
            return bad("ffn_mult must be > 0");
        }
        Ok(())
    }

    pub fn ffn_width(&self) -> usize {
        ((self.d as f64 * self.ffn_mult).round() as usize).max(1)
    }

    pub fn mdn(&self) -> MdnTransform {
        MdnTransform {
            k: self.k,
            tau: self.tau,
            mu_max: self.mu_max,
            sigma_floor: self.sigma_floor,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Mixture-density head trained by negative log-likelihood.
    Mdn,
    /// Linear head trained by squared error.
    Reg,
}

/// One input token slot.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenFeature {
    pub name: String,
    pub kind: FeatureKind,
    /// Category labels (categorical only); the embedding table has one more
    /// row for unknown categories.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub categories: Vec<String>,
}

fn token_features(schema: &Schema, vocab: &CategoryVocab) -> Result<Vec<TokenFeature>> {
    schema
        .features
        .iter()
        .map(|f| {
            let categories = match f.kind {
                FeatureKind::Numeric => Vec::new(),
                FeatureKind::Categorical => vocab
                    .labels(&f.name)
                    .ok_or_else(|| Error::Schema(format!("no vocabulary for `{}`", f.name)))?
                    .to_vec(),
            };
            Ok(TokenFeature {
                name: f.name.clone(),
                kind: f.kind,
                categories,
            })
        })
        .collect()
}

/// Predictions for a batch: point estimates and, for the MDN head, the full
/// per-row mixtures.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub mean: Vec<f64>,
    pub mixtures: Option<Vec<MixtureOutput>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FtModel {
    pub config: ModelConfig,
    pub head: HeadKind,
    pub features: Vec<TokenFeature>,
    pub params: ParamStore,
}

pub(crate) fn tok_names(name: &str) -> [String; 4] {
    ["w1", "b1", "w2", "b2"].map(|p| format!("tok.{name}.{p}"))
}

pub(crate) fn emb_name(name: &str) -> String {
    format!("emb.{name}")
}

const PREEMBED_SD: f64 = 0.02;

impl FtModel {
    pub fn new(config: ModelConfig, head: HeadKind, schema: &Schema, vocab: &CategoryVocab, seed: u64) -> Result<Self> {
        Self::from_features(config, head, token_features(schema, vocab)?, seed)
    }

    pub fn from_features(config: ModelConfig, head: HeadKind, features: Vec<TokenFeature>, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let mut p = ParamStore::new();
        let init = |name: &str| seeds::derive_rng(seed, &format!("init/{name}"));
        let affine = |p: &mut ParamStore, w: &str, b: &str, rows: usize, cols: usize| {
            let mut rng = init(w);
            p.add(w, fan_in_uniform(rows, cols, &mut rng), true);
            let bound = 1.0 / (rows as f64).sqrt();
            p.add(b, crate::nn::uniform(1, cols, bound, &mut init(b)), false);
        };
        p.add("cls", normal(1, d, PREEMBED_SD, &mut init("cls")), false);
        p.add("pad", normal(1, d, PREEMBED_SD, &mut init("pad")), false);
        for f in &features {
            match f.kind {
                FeatureKind::Numeric => {
                    let [w1, b1, w2, b2] = tok_names(&f.name);
                    affine(&mut p, &w1, &b1, 1, d);
                    affine(&mut p, &w2, &b2, d, d);
                }
                FeatureKind::Categorical => {
                    let name = emb_name(&f.name);
                    let table = normal(f.categories.len() + 1, d, PREEMBED_SD, &mut init(&name));
                    p.add(name, table, false);
                }
            }
        }
        let m = config.ffn_width();
        for b in 0..config.blocks {
            for ln in ["ln1", "ln2"] {
                p.add(format!("block{b}.{ln}.g"), Matrix::from_vec(1, d, vec![1.0; d]), false);
                p.add(format!("block{b}.{ln}.b"), Matrix::zeros(1, d), false);
            }
            affine(&mut p, &format!("block{b}.attn.wqkv"), &format!("block{b}.attn.bqkv"), d, 3 * d);
            affine(&mut p, &format!("block{b}.attn.wo"), &format!("block{b}.attn.bo"), d, d);
            affine(&mut p, &format!("block{b}.ffn.w1"), &format!("block{b}.ffn.b1"), d, 2 * m);
            affine(&mut p, &format!("block{b}.ffn.w2"), &format!("block{b}.ffn.b2"), m, d);
        }
        let out = match head {
            HeadKind::Mdn => 3 * config.k,
            HeadKind::Reg => 1,
        };
        affine(&mut p, "head.w", "head.b", d, out);
        Ok(Self {
            config,
            head,
            features,
            params: p,
        })
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.name.as_str()).collect()
    }

    /// Schema over the model's token slots, for encoding.
    pub fn schema(&self) -> Schema {
        let typed: Vec<(String, FeatureKind)> = self.features.iter().map(|f| (f.name.clone(), f.kind)).collect();
        Schema::single(&typed).expect("model features are unique")
    }

    fn check_batch(&self, batch: &EncodedBatch) -> Result<()> {
        if batch.features.len() != self.features.len()
            || batch.features.iter().zip(&self.features).any(|(a, b)| a != &b.name)
        {
            return Err(Error::Encoding(format!(
                "batch features {:?} do not match model features {:?}",
                batch.features,
                self.feature_names()
            )));
        }
        Ok(())
    }

    /// Token matrix `(n·(L+1)) × d`.
    pub fn tokenize(&self, tape: &mut Tape, batch: &EncodedBatch) -> Result<Var> {
        self.check_batch(batch)?;
        let n = batch.n;
        let l = self.features.len();
        let mut toks = Vec::with_capacity(l);
        for (j, f) in self.features.iter().enumerate() {
            if !batch.any_active(j) {
                toks.push(None);
                continue;
            }
            let t = match f.kind {
                FeatureKind::Numeric => {
                    let x = tape.constant(Matrix::from_fn(n, 1, |i, _| batch.value(i, j)));
                    let [w1, b1, w2, b2] = tok_names(&f.name).map(|s| tape.param_named(&s));
                    let h = tape.affine(x, w1, b1);
                    let h = tape.gelu(h);
                    tape.affine(h, w2, b2)
                }
                FeatureKind::Categorical => {
                    let size = f.categories.len() + 1;
                    let mut index = Vec::with_capacity(n);
                    for i in 0..n {
                        let c = batch.code(i, j) as usize;
                        if c >= size {
                            return Err(Error::Encoding(format!(
                                "category index {c} out of range for `{}` (size {size})",
                                f.name
                            )));
                        }
                        index.push(c);
                    }
                    let table = tape.param_named(&emb_name(&f.name));
                    tape.gather(table, index)
                }
            };
            toks.push(Some(t));
        }
        let cls = tape.param_named("cls");
        let pad = tape.param_named("pad");
        Ok(tape.assemble(cls, pad, toks, batch.mask.clone()))
    }

    /// Encoder stack; returns the contextual token matrix.
    pub fn encode_tokens(&self, tape: &mut Tape, tokens: Var, mask: &[bool], mut rng: Option<&mut Rng>) -> Var {
        let seq = self.features.len() + 1;
        let rate = if rng.is_some() { self.config.dropout } else { 0.0 };
        let mut x = tokens;
        for b in 0..self.config.blocks {
            let pn = |t: &mut Tape, s: &str| t.param_named(&format!("block{b}.{s}"));
            let (g1, b1) = (pn(tape, "ln1.g"), pn(tape, "ln1.b"));
            let a = tape.layer_norm(x, g1, b1);
            let (wqkv, bqkv) = (pn(tape, "attn.wqkv"), pn(tape, "attn.bqkv"));
            let qkv = tape.affine(a, wqkv, bqkv);
            let att = tape.attention(qkv, self.config.heads, seq, mask.to_vec());
            let (wo, bo) = (pn(tape, "attn.wo"), pn(tape, "attn.bo"));
            let mut o = tape.affine(att, wo, bo);
            if let Some(r) = rng.as_deref_mut() {
                o = tape.dropout(o, rate, r);
            }
            x = tape.add(x, o);
            let (g2, b2) = (pn(tape, "ln2.g"), pn(tape, "ln2.b"));
            let c = tape.layer_norm(x, g2, b2);
            let (w1, fb1) = (pn(tape, "ffn.w1"), pn(tape, "ffn.b1"));
            let g = tape.affine(c, w1, fb1);
            let u = tape.geglu(g);
            let (w2, fb2) = (pn(tape, "ffn.w2"), pn(tape, "ffn.b2"));
            let mut f = tape.affine(u, w2, fb2);
            if let Some(r) = rng.as_deref_mut() {
                f = tape.dropout(f, rate, r);
            }
            x = tape.add(x, f);
        }
        x
    }

    /// Pooled CLS representation `h`, `n × d`.
    pub fn pooled(&self, tape: &mut Tape, batch: &EncodedBatch, rng: Option<&mut Rng>) -> Result<Var> {
        let tokens = self.tokenize(tape, batch)?;
        let z = self.encode_tokens(tape, tokens, &batch.mask, rng);
        let seq = self.features.len() + 1;
        Ok(tape.select_rows(z, (0..batch.n).map(|i| i * seq).collect()))
    }

    /// Raw head outputs: `n × 3K` for the MDN head, `n × 1` for regression.
    pub fn head_output(&self, tape: &mut Tape, h: Var) -> Var {
        let w = tape.param_named("head.w");
        let b = tape.param_named("head.b");
        tape.affine(h, w, b)
    }

    /// Mean training loss over the batch. Dropout is active iff `rng` is given.
    pub fn loss(&self, tape: &mut Tape, batch: &EncodedBatch, rng: Option<&mut Rng>) -> Result<Var> {
        let h = self.pooled(tape, batch, rng)?;
        let z = self.head_output(tape, h);
        Ok(match self.head {
            HeadKind::Mdn => tape.mdn_nll(z, &batch.target, self.config.mdn()),
            HeadKind::Reg => tape.mse(z, &batch.target),
        })
    }

    /// Evaluation loss (no dropout) on `batch`, in chunks.
    pub fn eval_loss(&self, batch: &EncodedBatch) -> Result<f64> {
        let mut total = 0.0;
        for idx in chunks(batch.n) {
            let sub = batch.rows(&idx);
            let mut tape = Tape::new(&self.params);
            let l = self.loss(&mut tape, &sub, None)?;
            total += tape.scalar(l) * sub.n as f64;
        }
        Ok(total / batch.n as f64)
    }

    /// Raw head outputs without dropout, row-major.
    pub fn raw_outputs(&self, batch: &EncodedBatch) -> Result<Matrix> {
        let cols = match self.head {
            HeadKind::Mdn => 3 * self.config.k,
            HeadKind::Reg => 1,
        };
        let mut out = Matrix::zeros(0, cols);
        for idx in chunks(batch.n) {
            let sub = batch.rows(&idx);
            let mut tape = Tape::new(&self.params);
            let h = self.pooled(&mut tape, &sub, None)?;
            let z = self.head_output(&mut tape, h);
            out.data.extend_from_slice(&tape.value(z).data);
            out.rows += sub.n;
        }
        Ok(out)
    }

    pub fn predict(&self, batch: &EncodedBatch) -> Result<Predictions> {
        let z = self.raw_outputs(batch)?;
        Ok(match self.head {
            HeadKind::Mdn => {
                let t = self.config.mdn();
                let mixtures: Vec<MixtureOutput> = (0..z.rows).map(|i| t.decode(z.row(i))).collect();
                Predictions {
                    mean: mixtures.iter().map(mixture_mean).collect(),
                    mixtures: Some(mixtures),
                }
            }
            HeadKind::Reg => Predictions {
                mean: z.data,
                mixtures: None,
            },
        })
    }

    /// Carry this model over to `schema`: shared tokenizers, embedding rows
    /// (matched by category label), backbone and head are copied; features
    /// new to the model are freshly initialised from `seed`.
    pub fn reconfigure_for_schema(&self, schema: &Schema, vocab: &CategoryVocab, seed: u64) -> Result<FtModel> {
        let old: BTreeMap<&str, &TokenFeature> = self.features.iter().map(|f| (f.name.as_str(), f)).collect();
        for f in &schema.features {
            if let Some(o) = old.get(f.name.as_str()) {
                if o.kind != f.kind {
                    return Err(Error::SchemaConflict {
                        name: f.name.clone(),
                        left: o.kind.to_string(),
                        right: f.kind.to_string(),
                    });
                }
            }
        }
        let mut out = FtModel::new(self.config, self.head, schema, vocab, seed)?;
        let features = out.features.clone();
        for f in &features {
            let Some(o) = old.get(f.name.as_str()) else { continue };
            match f.kind {
                FeatureKind::Numeric => {
                    for name in tok_names(&f.name) {
                        self.copy_param(&mut out, &name);
                    }
                }
                FeatureKind::Categorical => {
                    let name = emb_name(&f.name);
                    let src = self.params.value(self.params.expect(&name));
                    let id = out.params.expect(&name);
                    let dst = out.params.value_mut(id);
                    for (r, label) in f.categories.iter().enumerate() {
                        if let Some(k) = o.categories.iter().position(|c| c == label) {
                            dst.row_mut(r).copy_from_slice(src.row(k));
                        }
                    }
                    let unk = f.categories.len();
                    dst.row_mut(unk).copy_from_slice(src.row(o.categories.len()));
                }
            }
        }
        let backbone: Vec<String> = self
            .params
            .iter()
            .map(|p| p.name.clone())
            .filter(|n| !n.starts_with("tok.") && !n.starts_with("emb."))
            .collect();
        for name in backbone {
            self.copy_param(&mut out, &name);
        }
        Ok(out)
    }

    fn copy_param(&self, out: &mut FtModel, name: &str) {
        let v = self.params.value(self.params.expect(name)).clone();
        let id = out.params.expect(name);
        *out.params.value_mut(id) = v;
    }

    /// Names of parameters belonging to the given token slots.
    pub fn feature_param_names(&self, names: &[String]) -> Vec<String> {
        let mut out = Vec::new();
        for f in self.features.iter().filter(|f| names.contains(&f.name)) {
            match f.kind {
                FeatureKind::Numeric => out.extend(tok_names(&f.name)),
                FeatureKind::Categorical => out.push(emb_name(&f.name)),
            }
        }
        out
    }
}

pub(crate) fn chunks(n: usize) -> Vec<Vec<usize>> {
    const CHUNK: usize = 1024;
    (0..n.div_ceil(CHUNK))
        .map(|c| (c * CHUNK..((c + 1) * CHUNK).min(n)).collect())
        .collect()
}

/// Mask each active feature position independently with probability `rate`.
pub fn random_feature_masking(batch: &EncodedBatch, rate: f64, seed: u64) -> Result<EncodedBatch> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("masking rate {rate} outside [0, 1)")));
    }
    let mut out = batch.clone();
    if rate == 0.0 {
        return Ok(out);
    }
    let mut rng = seeds::derive_rng(seed, "feature-mask");
    let seq = batch.width() + 1;
    for (p, m) in out.mask.iter_mut().enumerate() {
        if p % seq != 0 && *m && rng.random::<f64>() < rate {
            *m = false;
        }
    }
    Ok(out)
}
