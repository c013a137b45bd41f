//! Minimal reverse-mode autodiff on dense `f64` matrices, with the fused ops
//! the feature-token transformer and the MLP baseline need.

mod matrix;
mod params;
mod tape;

pub use matrix::{gemm, Matrix};
pub use params::{fan_in_uniform, normal, uniform, AdamW, Grads, Param, ParamId, ParamShape, ParamStore};
pub use tape::{gelu, gelu_grad, sigmoid, softplus, MdnTransform, MixtureParams, Tape, Var};

/// Result of comparing analytic gradients with central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    /// `(parameter name, ‖g − g_fd‖ / max(‖g‖ + ‖g_fd‖, 1e-12))`
    pub groups: Vec<(String, f64)>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.1).fold(0.0, f64::max)
    }
}

/// Compare `grads` (analytic, from one evaluation of `loss`) with central
/// differences of `loss` with step `h`, per parameter.
pub fn check_gradients(
    store: &ParamStore,
    grads: &Grads,
    h: f64,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> GradCheck {
    let mut work = store.clone();
    let mut groups = Vec::new();
    for id in 0..store.len() {
        let n = store.value(id).len();
        let analytic = grads[id].clone().unwrap_or_else(|| {
            let v = store.value(id);
            Matrix::zeros(v.rows, v.cols)
        });
        let mut diff2 = 0.0;
        let mut fd2 = 0.0;
        for e in 0..n {
            let orig = work.value(id).data[e];
            work.value_mut(id).data[e] = orig + h;
            let up = loss(&work);
            work.value_mut(id).data[e] = orig - h;
            let down = loss(&work);
            work.value_mut(id).data[e] = orig;
            let fd = (up - down) / (2.0 * h);
            diff2 += (fd - analytic.data[e]).powi(2);
            fd2 += fd * fd;
        }
        let rel = diff2.sqrt() / (analytic.norm() + fd2.sqrt()).max(1e-12);
        groups.push((store.get(id).name.clone(), rel));
    }
    GradCheck { groups }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    fn store_with(shapes: &[(&str, usize, usize)], seed: u64) -> ParamStore {
        let mut rng = seeds::rng(seed);
        let mut s = ParamStore::new();
        for &(name, r, c) in shapes {
            s.add(name, normal(r, c, 0.7, &mut rng), true);
        }
        s
    }

    fn check(store: &ParamStore, f: impl Fn(&mut Tape) -> Var) {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape);
        let grads = tape.backward(loss);
        let res = check_gradients(store, &grads, 1e-5, |s| {
            let mut t = Tape::new(s);
            let l = f(&mut t);
            t.scalar(l)
        });
        assert!(res.max_rel_error() < 1e-6, "{:?}", res.groups);
    }

    #[test]
    fn mlp_ops_gradients() {
        let s = store_with(&[("x", 5, 3), ("w", 3, 4), ("b", 1, 4), ("w2", 4, 1)], 1);
        let target = [0.1, 0.5, -0.2, 0.9, 0.3];
        check(&s, |t| {
            let x = t.param_named("x");
            let w = t.param_named("w");
            let b = t.param_named("b");
            let h = t.affine(x, w, b);
            let h = t.gelu(h);
            let h2 = t.add(h, h);
            let w2 = t.param_named("w2");
            let y = t.matmul(h2, w2);
            t.mse(y, &target)
        });
    }

    #[test]
    fn norm_geglu_gather_gradients() {
        let s = store_with(
            &[("e", 4, 6), ("g", 1, 6), ("b", 1, 6), ("w", 3, 6)],
            2,
        );
        let target = [0.2, 0.8, 0.4];
        let mdn = MdnTransform { k: 1, tau: 1.0, mu_max: 1.0, sigma_floor: 1e-3 };
        check(&s, |t| {
            let e = t.param_named("e");
            let rows = t.gather(e, vec![0, 2, 2, 3, 1]);
            let g = t.param_named("g");
            let b = t.param_named("b");
            let n = t.layer_norm(rows, g, b);
            let sel = t.select_rows(n, vec![4, 1, 2]);
            let gg = t.geglu(sel);
            let w = t.param_named("w");
            let z = t.matmul(gg, w);
            // Keep three columns for a one-component mixture head.
            let pick = t.constant(Matrix::from_fn(6, 3, |i, j| if i == j { 1.0 } else { 0.0 }));
            let z = t.matmul(z, pick);
            t.mdn_nll(z, &target, mdn)
        });
    }

    #[test]
    fn attention_and_assemble_gradients() {
        let seq = 4;
        let n = 3;
        let d = 4;
        let s = store_with(
            &[("cls", 1, d), ("pad", 1, d), ("f1", n, d), ("f3", n, d), ("wqkv", d, 3 * d), ("head", d, 6)],
            3,
        );
        let mut mask = vec![true; n * seq];
        mask[1 * seq + 1] = false;
        mask[2 * seq + 3] = false;
        for i in 0..n {
            mask[i * seq + 2] = false;
        }
        let target = [0.1, 0.95, 0.6];
        let mdn = MdnTransform { k: 2, tau: 0.7, mu_max: 1.0, sigma_floor: 1e-3 };
        check(&s, |t| {
            let cls = t.param_named("cls");
            let pad = t.param_named("pad");
            let f1 = t.param_named("f1");
            let f3 = t.param_named("f3");
            let x = t.assemble(cls, pad, vec![Some(f1), None, Some(f3)], mask.clone());
            let w = t.param_named("wqkv");
            let qkv = t.matmul(x, w);
            let a = t.attention(qkv, 2, seq, mask.clone());
            let x = t.add(x, a);
            let h = t.select_rows(x, (0..n).map(|i| i * seq).collect());
            let hw = t.param_named("head");
            let z = t.matmul(h, hw);
            t.mdn_nll(z, &target, mdn)
        });
    }

    #[test]
    fn mdn_head_examples() {
        let t = MdnTransform { k: 2, tau: 1.0, mu_max: 1.0, sigma_floor: 1e-3 };
        let p = t.decode(&[3.0, 3.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.alpha, vec![0.5, 0.5]);
        assert_eq!(p.mu, vec![0.5, 0.5]);
        assert!((p.sigma[0] - (2f64.ln() + 1e-3)).abs() < 1e-15);
        assert!((p.sigma[0] - 0.6941).abs() < 1e-4);
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let s = store_with(&[("x", 2, 2)], 4);
        let mut t = Tape::new(&s);
        let x = t.param_named("x");
        let mut rng = seeds::rng(0);
        assert_eq!(t.dropout(x, 0.0, &mut rng), x);
    }
}
