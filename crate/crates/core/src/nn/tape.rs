use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::Rng as _;

use super::params::{Grads, ParamId, ParamStore};
use super::Matrix;
use crate::seeds::Rng;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Output transforms of the mixture-density head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdnTransform {
    pub k: usize,
    pub tau: f64,
    pub mu_max: f64,
    pub sigma_floor: f64,
}

/// Mixture parameters decoded from raw head outputs `[z_alpha | z_mu | z_sigma]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub alpha: Vec<f64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl MdnTransform {
    pub fn decode(&self, z: &[f64]) -> MixtureParams {
        let k = self.k;
        let scaled: Vec<f64> = z[..k].iter().map(|a| a / self.tau).collect();
        let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scaled.iter().map(|a| (a - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        MixtureParams {
            alpha: exps.iter().map(|e| e / total).collect(),
            mu: z[k..2 * k].iter().map(|&m| sigmoid(m) * self.mu_max).collect(),
            sigma: z[2 * k..3 * k]
                .iter()
                .map(|&s| softplus(s) + self.sigma_floor)
                .collect(),
        }
    }

    /// Per-row negative log-likelihood and its gradient w.r.t. `z`.
    fn nll_and_grad(&self, z: &[f64], r: f64, grad: Option<&mut [f64]>) -> f64 {
        let k = self.k;
        let p = self.decode(z);
        let mut terms = Vec::with_capacity(k);
        for c in 0..k {
            let s = p.sigma[c];
            let d = (r - p.mu[c]) / s;
            terms.push(p.alpha[c].ln() - s.ln() - 0.5 * d * d - 0.5 * (2.0 * PI).ln());
        }
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln();
        if let Some(g) = grad {
            for c in 0..k {
                let gamma = (terms[c] - lse).exp();
                let s = p.sigma[c];
                let diff = r - p.mu[c];
                g[c] = -(gamma - p.alpha[c]) / self.tau;
                let sm = sigmoid(z[k + c]);
                g[k + c] = -gamma * diff / (s * s) * self.mu_max * sm * (1.0 - sm);
                g[2 * k + c] = -gamma * (diff * diff / (s * s * s) - 1.0 / s) * sigmoid(z[2 * k + c]);
            }
        }
        -lse
    }

    pub fn nll(&self, z: &[f64], r: f64) -> f64 {
        self.nll_and_grad(z, r, None)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

/// Exact GELU `x Φ(x)`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

const LN_EPS: f64 = 1e-5;

enum Op {
    Constant,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Gelu(Var),
    Geglu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        keep: Vec<f64>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        seq: usize,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
    Assemble {
        cls: Var,
        pad: Var,
        features: Vec<Option<Var>>,
        mask: Vec<bool>,
    },
    Gather {
        table: Var,
        index: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    MdnNll {
        z: Var,
        grad: Matrix,
    },
    Mse {
        y: Var,
        target: Vec<f64>,
    },
}

struct Node {
    op: Op,
    value: Option<Matrix>,
}

/// Reverse-mode autodiff over matrices. Parameter values are read from the
/// borrowed store, never copied.
pub struct Tape<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
}

impl<'a> Tape<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
        }
    }

    fn push(&mut self, op: Op, value: Matrix) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match (&self.nodes[v.0].op, &self.nodes[v.0].value) {
            (Op::Param(id), _) => self.store.value(*id),
            (_, Some(m)) => m,
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data[0]
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.push(Op::Constant, m)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_named(&mut self, name: &str) -> Var {
        let id = self.store.expect(name);
        self.param(id)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
        self.push(Op::MatMul(a, b), out)
    }

    /// Adds a `1 × c` row vector to every row.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let mut out = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!((b.rows, b.cols), (1, out.cols), "bias shape");
        for i in 0..out.rows {
            for (x, y) in out.row_mut(i).iter_mut().zip(&b.data) {
                *x += y;
            }
        }
        self.push(Op::AddBias(a, bias), out)
    }

    /// `x · w + b`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(Op::Add(a, b), out)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(Op::Gelu(a), out)
    }

    /// Splits columns in halves `[u | g]` and returns `u ⊙ gelu(g)`.
    pub fn geglu(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert!(x.cols % 2 == 0, "geglu needs an even width");
        let h = x.cols / 2;
        let out = Matrix::from_fn(x.rows, h, |i, j| x.get(i, j) * gelu(x.get(i, h + j)));
        self.push(Op::Geglu(a), out)
    }

    /// Row-wise layer normalisation with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let mut xhat = Matrix::zeros(n, d);
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(inv);
            for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let g = self.value(gain);
        let b = self.value(bias);
        let mut out = xhat.clone();
        for i in 0..n {
            for ((o, gj), bj) in out.row_mut(i).iter_mut().zip(&g.data).zip(&b.data) {
                *o = *o * gj + bj;
            }
        }
        self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            out,
        )
    }

    /// Inverted dropout; identity when `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let xv = self.value(x);
        let scale = 1.0 / (1.0 - rate);
        let keep: Vec<f64> = (0..xv.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { scale })
            .collect();
        let out = Matrix::from_vec(
            xv.rows,
            xv.cols,
            xv.data.iter().zip(&keep).map(|(a, k)| a * k).collect(),
        );
        self.push(Op::Dropout { x, keep }, out)
    }

    /// Multi-head self-attention over `seq`-row groups of a fused
    /// `[q | k | v]` matrix. `mask[i]` (one entry per row) excludes a
    /// position as key and zeroes its output as query.
    pub fn attention(&mut self, qkv: Var, heads: usize, seq: usize, mask: Vec<bool>) -> Var {
        let x = self.value(qkv);
        let d = x.cols / 3;
        assert_eq!(x.cols, 3 * d);
        assert_eq!(d % heads, 0, "width not divisible by heads");
        assert_eq!(x.rows % seq, 0);
        assert_eq!(mask.len(), x.rows);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let groups = x.rows / seq;
        let mut out = Matrix::zeros(x.rows, d);
        let mut probs = vec![0.0; groups * heads * seq * seq];
        let mut scores = vec![0.0; seq];
        for g in 0..groups {
            let base = g * seq;
            for h in 0..heads {
                let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                for i in 0..seq {
                    if !mask[base + i] {
                        continue;
                    }
                    let q = &x.row(base + i)[qo..qo + dh];
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..seq {
                        scores[j] = if mask[base + j] {
                            let k = &x.row(base + j)[ko..ko + dh];
                            q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                        max = max.max(scores[j]);
                    }
                    let p = &mut probs[((g * heads + h) * seq + i) * seq..][..seq];
                    let mut total = 0.0;
                    for j in 0..seq {
                        p[j] = if mask[base + j] { (scores[j] - max).exp() } else { 0.0 };
                        total += p[j];
                    }
                    for pj in p.iter_mut() {
                        *pj /= total;
                    }
                    let o = &mut out.row_mut(base + i)[h * dh..(h + 1) * dh];
                    for j in 0..seq {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let v = &x.row(base + j)[vo..vo + dh];
                        for (oc, vc) in o.iter_mut().zip(v) {
                            *oc += p[j] * vc;
                        }
                    }
                }
            }
        }
        self.push(
            Op::Attention {
                qkv,
                heads,
                seq,
                mask,
                probs,
            },
            out,
        )
    }

    /// Builds the `(n·(L+1)) × d` token matrix: per observation a CLS row,
    /// then feature rows where `mask` is set and PAD rows elsewhere.
    /// `features[j]` is `n × d` or `None` if the feature is absent from the
    /// whole batch.
    pub fn assemble(&mut self, cls: Var, pad: Var, features: Vec<Option<Var>>, mask: Vec<bool>) -> Var {
        let seq = features.len() + 1;
        assert_eq!(mask.len() % seq, 0);
        let n = mask.len() / seq;
        let d = self.value(cls).cols;
        let mut out = Matrix::zeros(n * seq, d);
        for i in 0..n {
            out.row_mut(i * seq).copy_from_slice(&self.value(cls).data);
            for (j, f) in features.iter().enumerate() {
                let r = i * seq + j + 1;
                match f {
                    Some(f) if mask[r] => out.row_mut(r).copy_from_slice(self.value(*f).row(i)),
                    None if mask[r] => panic!("active position for an absent feature"),
                    _ => out.row_mut(r).copy_from_slice(&self.value(pad).data),
                }
            }
        }
        self.push(
            Op::Assemble {
                cls,
                pad,
                features,
                mask,
            },
            out,
        )
    }

    /// Rows `table[index[i]]`.
    pub fn gather(&mut self, table: Var, index: Vec<usize>) -> Var {
        let t = self.value(table);
        let mut out = Matrix::zeros(index.len(), t.cols);
        for (i, &k) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(k));
        }
        self.push(Op::Gather { table, index }, out)
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let xv = self.value(x);
        let mut out = Matrix::zeros(rows.len(), xv.cols);
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        self.push(Op::SelectRows { x, rows }, out)
    }

    /// Mean mixture negative log-likelihood of `target` under raw head outputs `z`.
    pub fn mdn_nll(&mut self, z: Var, target: &[f64], t: MdnTransform) -> Var {
        let zv = self.value(z);
        assert_eq!(zv.cols, 3 * t.k);
        assert_eq!(zv.rows, target.len());
        let n = target.len() as f64;
        let mut grad = Matrix::zeros(zv.rows, zv.cols);
        let mut total = 0.0;
        for (i, &r) in target.iter().enumerate() {
            total += t.nll_and_grad(zv.row(i), r, Some(grad.row_mut(i)));
        }
        for g in &mut grad.data {
            *g /= n;
        }
        self.push(Op::MdnNll { z, grad }, Matrix::from_vec(1, 1, vec![total / n]))
    }

    /// Mean squared error of an `n × 1` prediction.
    pub fn mse(&mut self, y: Var, target: &[f64]) -> Var {
        let yv = self.value(y);
        assert_eq!((yv.rows, yv.cols), (target.len(), 1));
        let loss = yv.data.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            / target.len() as f64;
        self.push(
            Op::Mse {
                y,
                target: target.to_vec(),
            },
            Matrix::from_vec(1, 1, vec![loss]),
        )
    }

    /// Gradients of the scalar `loss` w.r.t. every parameter in the store.
    pub fn backward(mut self, loss: Var) -> Grads {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::from_vec(1, 1, vec![1.0]));
        let mut out: Grads = (0..self.store.len()).map(|_| None).collect();
        for idx in (0..=loss.0).rev() {
            let Some(dout) = grads[idx].take() else { continue };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Constant);
            match op {
                Op::Constant => {}
                Op::Param(id) => accumulate(&mut out[id], dout),
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(a), self.value(b));
                    let mut da = Matrix::zeros(av.rows, av.cols);
                    super::gemm(&mut da, &dout, false, bv, true, 1.0, 0.0);
                    let mut db = Matrix::zeros(bv.rows, bv.cols);
                    super::gemm(&mut db, av, true, &dout, false, 1.0, 0.0);
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::AddBias(a, bias) => {
                    let mut db = Matrix::zeros(1, dout.cols);
                    for i in 0..dout.rows {
                        for (x, y) in db.data.iter_mut().zip(dout.row(i)) {
                            *x += y;
                        }
                    }
                    accumulate(&mut grads[bias.0], db);
                    accumulate(&mut grads[a.0], dout);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[b.0], dout.clone());
                    accumulate(&mut grads[a.0], dout);
                }
                Op::Gelu(a) => {
                    let av = self.value(a);
                    let da = Matrix::from_vec(
                        av.rows,
                        av.cols,
                        av.data.iter().zip(&dout.data).map(|(x, g)| g * gelu_grad(*x)).collect(),
                    );
                    accumulate(&mut grads[a.0], da);
                }
                Op::Geglu(a) => {
                    let av = self.value(a);
                    let h = av.cols / 2;
                    let mut da = Matrix::zeros(av.rows, av.cols);
                    for i in 0..av.rows {
                        let (row, g) = (av.row(i), dout.row(i));
                        let dr = da.row_mut(i);
                        for j in 0..h {
                            let (u, v) = (row[j], row[h + j]);
                            dr[j] = g[j] * gelu(v);
                            dr[h + j] = g[j] * u * gelu_grad(v);
                        }
                    }
                    accumulate(&mut grads[a.0], da);
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(gain);
                    let (rows, d) = xhat.shape();
                    let mut dg = Matrix::zeros(1, d);
                    let mut db = Matrix::zeros(1, d);
                    let mut dx = Matrix::zeros(rows, d);
                    let mut dxhat = vec![0.0; d];
                    for i in 0..rows {
                        let (dy, xh) = (dout.row(i), xhat.row(i));
                        let (mut s1, mut s2) = (0.0, 0.0);
                        for j in 0..d {
                            dg.data[j] += dy[j] * xh[j];
                            db.data[j] += dy[j];
                            dxhat[j] = dy[j] * gv.data[j];
                            s1 += dxhat[j];
                            s2 += dxhat[j] * xh[j];
                        }
                        let k = inv_std[i] / d as f64;
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = k * (d as f64 * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                    accumulate(&mut grads[gain.0], dg);
                    accumulate(&mut grads[bias.0], db);
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Dropout { x, keep } => {
                    let mut dx = dout;
                    for (g, k) in dx.data.iter_mut().zip(&keep) {
                        *g *= k;
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::Attention {
                    qkv,
                    heads,
                    seq,
                    mask,
                    probs,
                } => {
                    let x = self.value(qkv);
                    let d = x.cols / 3;
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let groups = x.rows / seq;
                    let mut dx = Matrix::zeros(x.rows, x.cols);
                    let mut dp = vec![0.0; seq];
                    for g in 0..groups {
                        let base = g * seq;
                        for h in 0..heads {
                            let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
                            for i in 0..seq {
                                if !mask[base + i] {
                                    continue;
                                }
                                let p = &probs[((g * heads + h) * seq + i) * seq..][..seq];
                                let go = &dout.row(base + i)[h * dh..(h + 1) * dh];
                                let mut dot = 0.0;
                                for j in 0..seq {
                                    if p[j] == 0.0 {
                                        dp[j] = 0.0;
                                        continue;
                                    }
                                    let v = &x.row(base + j)[vo..vo + dh];
                                    dp[j] = go.iter().zip(v).map(|(a, b)| a * b).sum();
                                    dot += dp[j] * p[j];
                                    let dv = &mut dx.row_mut(base + j)[vo..vo + dh];
                                    for (o, gc) in dv.iter_mut().zip(go) {
                                        *o += p[j] * gc;
                                    }
                                }
                                for j in 0..seq {
                                    if p[j] == 0.0 {
                                        continue;
                                    }
                                    let ds = p[j] * (dp[j] - dot) * scale;
                                    for c in 0..dh {
                                        let kc = x.get(base + j, ko + c);
                                        let qc = x.get(base + i, qo + c);
                                        dx.data[(base + i) * x.cols + qo + c] += ds * kc;
                                        dx.data[(base + j) * x.cols + ko + c] += ds * qc;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[qkv.0], dx);
                }
                Op::Assemble {
                    cls,
                    pad,
                    features,
                    mask,
                } => {
                    let seq = features.len() + 1;
                    let n = mask.len() / seq;
                    let d = dout.cols;
                    let mut dcls = Matrix::zeros(1, d);
                    let mut dpad = Matrix::zeros(1, d);
                    let mut dfeat: Vec<Option<Matrix>> = features
                        .iter()
                        .map(|f| f.map(|_| Matrix::zeros(n, d)))
                        .collect();
                    let mut any_pad = false;
                    for i in 0..n {
                        for (x, y) in dcls.data.iter_mut().zip(dout.row(i * seq)) {
                            *x += y;
                        }
                        for j in 0..features.len() {
                            let r = i * seq + j + 1;
                            if mask[r] {
                                if let Some(df) = &mut dfeat[j] {
                                    df.row_mut(i).copy_from_slice(dout.row(r));
                                }
                            } else {
                                any_pad = true;
                                for (x, y) in dpad.data.iter_mut().zip(dout.row(r)) {
                                    *x += y;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[cls.0], dcls);
                    if any_pad {
                        accumulate(&mut grads[pad.0], dpad);
                    }
                    for (f, df) in features.iter().zip(dfeat) {
                        if let (Some(f), Some(df)) = (f, df) {
                            accumulate(&mut grads[f.0], df);
                        }
                    }
                }
                Op::Gather { table, index } => {
                    let t = self.value(table);
                    let mut dt = Matrix::zeros(t.rows, t.cols);
                    for (i, &k) in index.iter().enumerate() {
                        for (x, y) in dt.row_mut(k).iter_mut().zip(dout.row(i)) {
                            *x += y;
                        }
                    }
                    accumulate(&mut grads[table.0], dt);
                }
                Op::SelectRows { x, rows } => {
                    let xv = self.value(x);
                    let mut dx = Matrix::zeros(xv.rows, xv.cols);
                    for (i, &r) in rows.iter().enumerate() {
                        for (a, b) in dx.row_mut(r).iter_mut().zip(dout.row(i)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::MdnNll { z, mut grad } => {
                    let s = dout.data[0];
                    for g in &mut grad.data {
                        *g *= s;
                    }
                    accumulate(&mut grads[z.0], grad);
                }
                Op::Mse { y, target } => {
                    let yv = self.value(y);
                    let k = 2.0 * dout.data[0] / target.len() as f64;
                    let dy = Matrix::from_vec(
                        yv.rows,
                        1,
                        yv.data.iter().zip(&target).map(|(a, b)| k * (a - b)).collect(),
                    );
                    accumulate(&mut grads[y.0], dy);
                }
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Matrix>, g: Matrix) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}
