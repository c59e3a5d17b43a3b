//! Loss terms.
//!
//! Each term has a plain function over slices (used by reports and tests) and
//! a `*_on` variant that records it on a [`Tape`] for training. Logarithms are
//! natural and floored at [`EPS`]; floored terms are constants for
//! differentiation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::tensor::{CustomOp, NodeId, Tape, Tensor};

pub const EPS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("beta is {0} but no blocks are supervised")]
    NoSupervisedBlocks(f64),
    #[error("loss weights must be non-negative (alpha {alpha}, beta {beta})")]
    NegativeWeight { alpha: f64, beta: f64 },
}

fn floor_ln(x: f64) -> f64 {
    x.max(EPS).ln()
}

/// `−ln P(gold)`.
pub fn loss_main(pred: &[f64], gold: Label) -> f64 {
    -floor_ln(pred[gold.index()])
}

/// Mean over positions of `−ln P(e_i | v_i)`; `token_preds` is row-major
/// `l × 3`.
pub fn loss_er(token_preds: &[f64], labels: &[u8]) -> f64 {
    assert_eq!(token_preds.len(), labels.len() * 3);
    let s: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &e)| -floor_ln(token_preds[i * 3 + e as usize]))
        .sum();
    s / labels.len() as f64
}

/// `Σ_i |ẽ_i − attn_i|`, or the squared differences when `squared` is set.
pub fn loss_sa(attn: &[f64], targets: &[f64], squared: bool) -> f64 {
    assert_eq!(attn.len(), targets.len());
    attn.iter()
        .zip(targets)
        .map(|(a, t)| if squared { (t - a) * (t - a) } else { (t - a).abs() })
        .sum()
}

/// Joint label distribution of two independent sub-inferences when the
/// combined label is the lower-priority one.
///
/// For each label `y`: both sub-inferences give `y`, or one gives `y` and the
/// other a higher-priority label.
pub fn joint_distribution(psi: &[f64], sigma: &[f64]) -> [f64; 3] {
    assert_eq!(psi.len(), 3);
    assert_eq!(sigma.len(), 3);
    let mut out = [0.0; 3];
    for y in Label::ALL {
        let i = y.index();
        let mut p = psi[i] * sigma[i];
        for higher in Label::ALL.iter().filter(|h| h.priority() > y.priority()) {
            let j = higher.index();
            p += psi[i] * sigma[j];
            p += psi[j] * sigma[i];
        }
        out[i] = p;
    }
    out
}

/// Jensen–Shannon divergence in nats.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    assert_eq!(p.len(), q.len());
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let lm = floor_ln(a + b);
        s += a * (floor_ln(2.0 * a) - lm) + b * (floor_ln(2.0 * b) - lm);
    }
    (0.5 * s).max(0.0)
}

/// JS divergence between a main distribution and the joint of two
/// sub-inferences.
pub fn loss_si(main: &[f64], psi: &[f64], sigma: &[f64]) -> f64 {
    js_divergence(main, &joint_distribution(psi, sigma))
}

struct JointOp;

impl CustomOp for JointOp {
    fn name(&self) -> &'static str {
        "joint_distribution"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64], grad_in: &mut [Option<&mut [f64]>]) {
        let (psi, sigma) = (inputs[0].data(), inputs[1].data());
        // Class index order is descending priority, so the joint class of
        // (a, b) is max(a, b).
        if let Some(d) = grad_in[0].as_deref_mut() {
            for a in 0..3 {
                d[a] += (0..3).map(|b| g[a.max(b)] * sigma[b]).sum::<f64>();
            }
        }
        if let Some(d) = grad_in[1].as_deref_mut() {
            for b in 0..3 {
                d[b] += (0..3).map(|a| g[a.max(b)] * psi[a]).sum::<f64>();
            }
        }
    }
}

struct JsOp;

impl CustomOp for JsOp {
    fn name(&self) -> &'static str {
        "js_divergence"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, g: &[f64], grad_in: &mut [Option<&mut [f64]>]) {
        let (p, q) = (inputs[0].data(), inputs[1].data());
        let ind = |x: f64| if x > EPS { 1.0 } else { 0.0 };
        for (k, (own, _)) in [(p, q), (q, p)].into_iter().enumerate() {
            if let Some(d) = grad_in[k].as_deref_mut() {
                for i in 0..p.len() {
                    let s = p[i] + q[i];
                    let a = own[i];
                    let v = 0.5 * (floor_ln(2.0 * a) - floor_ln(s)) + 0.5 * (ind(2.0 * a) - ind(s));
                    d[i] += g[0] * v;
                }
            }
        }
    }
}

pub fn loss_main_on(tape: &mut Tape, probs: NodeId, gold: Label) -> NodeId {
    let lp = tape.ln_floor(probs, EPS);
    let pick = tape.pick(lp, gold.index());
    tape.scale(pick, -1.0)
}

pub fn loss_er_on(tape: &mut Tape, token_probs: NodeId, labels: &[u8]) -> NodeId {
    let l = labels.len();
    let mut onehot = vec![0.0; l * 3];
    for (i, &e) in labels.iter().enumerate() {
        onehot[i * 3 + e as usize] = 1.0;
    }
    let mask = tape.constant(Tensor::matrix(l, 3, onehot).expect("l × 3"));
    let lp = tape.ln_floor(token_probs, EPS);
    let picked = tape.mul(lp, mask);
    let s = tape.sum(picked);
    tape.scale(s, -1.0 / l as f64)
}

pub fn loss_sa_on(tape: &mut Tape, attn: NodeId, targets: &[f64], squared: bool) -> NodeId {
    let t = tape.constant(Tensor::vector(targets.to_vec()));
    let diff = tape.sub(t, attn);
    let per = if squared { tape.square(diff) } else { tape.abs(diff) };
    tape.sum(per)
}

pub fn joint_distribution_on(tape: &mut Tape, psi: NodeId, sigma: NodeId) -> NodeId {
    let out = joint_distribution(tape.value(psi).data(), tape.value(sigma).data());
    tape.custom(&[psi, sigma], Tensor::vector(out.to_vec()), Box::new(JointOp))
}

pub fn js_divergence_on(tape: &mut Tape, p: NodeId, q: NodeId) -> NodeId {
    let v = js_divergence(tape.value(p).data(), tape.value(q).data());
    tape.custom(&[p, q], Tensor::scalar(v), Box::new(JsOp))
}

pub fn loss_si_on(tape: &mut Tape, main: NodeId, psi: NodeId, sigma: NodeId) -> NodeId {
    let joint = joint_distribution_on(tape, psi, sigma);
    js_divergence_on(tape, main, joint)
}

/// All loss components for one example or a batch mean.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_main: f64,
    pub l_er: f64,
    /// Keyed by 1-based block index.
    pub l_sa: BTreeMap<usize, f64>,
    pub l_si: BTreeMap<usize, f64>,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub h: usize,
}

impl LossBundle {
    /// `total = l_main + α·l_er + (β/H)·Σ_h (l_sa[h] + l_si[h])` with `H` the
    /// number of supervised blocks.
    pub fn combine(
        l_main: f64,
        l_er: f64,
        l_sa: BTreeMap<usize, f64>,
        l_si: BTreeMap<usize, f64>,
        alpha: f64,
        beta: f64,
        supervised: &[usize],
    ) -> Result<Self, ObjectiveError> {
        if alpha < 0.0 || beta < 0.0 {
            return Err(ObjectiveError::NegativeWeight { alpha, beta });
        }
        if beta > 0.0 && supervised.is_empty() {
            return Err(ObjectiveError::NoSupervisedBlocks(beta));
        }
        let h = supervised.len();
        let mut b = LossBundle {
            l_main,
            l_er,
            l_sa,
            l_si,
            total: 0.0,
            alpha,
            beta,
            h,
        };
        b.total = b.recombine();
        Ok(b)
    }

    pub fn l_sa_sum(&self) -> f64 {
        self.l_sa.values().sum()
    }

    pub fn l_si_sum(&self) -> f64 {
        self.l_si.values().sum()
    }

    /// The regularization part `(β/H)·Σ_h (l_sa[h] + l_si[h])`.
    pub fn block_term(&self) -> f64 {
        if self.h == 0 {
            0.0
        } else {
            self.beta / self.h as f64 * (self.l_sa_sum() + self.l_si_sum())
        }
    }

    pub fn recombine(&self) -> f64 {
        self.l_main + self.alpha * self.l_er + self.block_term()
    }

    /// Component-wise mean; the total is recombined from the means.
    pub fn mean(items: &[LossBundle]) -> Option<LossBundle> {
        let first = items.first()?;
        let n = items.len() as f64;
        let avg = |f: &dyn Fn(&LossBundle) -> f64| items.iter().map(f).sum::<f64>() / n;
        let avg_map = |f: &dyn Fn(&LossBundle) -> &BTreeMap<usize, f64>| {
            let mut m = BTreeMap::new();
            for it in items {
                for (&k, &v) in f(it) {
                    *m.entry(k).or_insert(0.0) += v;
                }
            }
            m.values_mut().for_each(|v| *v /= n);
            m
        };
        let mut b = LossBundle {
            l_main: avg(&|b| b.l_main),
            l_er: avg(&|b| b.l_er),
            l_sa: avg_map(&|b| &b.l_sa),
            l_si: avg_map(&|b| &b.l_si),
            total: 0.0,
            alpha: first.alpha,
            beta: first.beta,
            h: first.h,
        };
        b.total = b.recombine();
        Some(b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check;
    use proptest::prelude::*;

    const LN2: f64 = std::f64::consts::LN_2;

    /// Enumerates all nine outcome pairs and assigns each to the label with
    /// the smaller priority value.
    fn joint_oracle(psi: &[f64], sigma: &[f64]) -> [f64; 3] {
        let tau = [2u8, 1, 0];
        let mut out = [0.0; 3];
        for a in 0..3 {
            for b in 0..3 {
                let t = tau[a].min(tau[b]);
                let y = tau.iter().position(|&x| x == t).unwrap();
                out[y] += psi[a] * sigma[b];
            }
        }
        out
    }

    #[test]
    fn loss_main_examples() {
        assert_eq!(loss_main(&[1.0, 0.0, 0.0], Label::Entailed), 0.0);
        assert!((loss_main(&[1.0 / 3.0; 3], Label::Neutral) - 3f64.ln()).abs() < 1e-12);
        assert!((loss_main(&[0.25, 0.5, 0.25], Label::Neutral) - LN2).abs() < 1e-12);
        assert!((loss_main(&[1.0, 0.0, 0.0], Label::Neutral) + EPS.ln()).abs() < 1e-9);
    }

    #[test]
    fn loss_er_examples() {
        assert_eq!(loss_er(&[1.0, 0.0, 0.0, 0.0, 0.0, 1.0], &[0, 2]), 0.0);
        assert!((loss_er(&[1.0 / 3.0; 6], &[0, 1]) - 3f64.ln()).abs() < 1e-12);
        let v = loss_er(&[0.5, 0.5, 0.0, 0.25, 0.5, 0.25], &[0, 2]);
        assert!((v - (2f64.ln() + 4f64.ln()) / 2.0).abs() < 1e-12);
        assert!((v - 1.0397).abs() < 1e-4);
    }

    #[test]
    fn loss_sa_examples() {
        assert_eq!(loss_sa(&[0.2, 0.8], &[0.2, 0.8], false), 0.0);
        assert_eq!(loss_sa(&[0.5, 0.5], &[0.0, 1.0], false), 1.0);
        assert_eq!(loss_sa(&[0.5, 0.5], &[0.0, 1.0], true), 0.5);
    }

    #[test]
    fn joint_examples() {
        let e = [1.0, 0.0, 0.0];
        let c = [0.0, 0.0, 1.0];
        assert_eq!(joint_distribution(&e, &e), e);
        assert_eq!(joint_distribution(&c, &[0.2, 0.3, 0.5]), c);
        let u = [1.0 / 3.0; 3];
        let j = joint_distribution(&u, &u);
        for (a, b) in j.iter().zip([1.0 / 9.0, 3.0 / 9.0, 5.0 / 9.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn js_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(js_divergence(&p, &p), 0.0);
        assert!((js_divergence(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]) - LN2).abs() < 1e-12);
        // ½[1·ln(2/1.5)] + ½[0.5·ln(1/1.5) + 0.5·ln(1/0.5)], termwise.
        let expected = 0.5 * (2.0f64 / 1.5).ln() + 0.5 * (0.5 * (1.0f64 / 1.5).ln() + 0.5 * 2f64.ln());
        let v = js_divergence(&[1.0, 0.0, 0.0], &[0.5, 0.5, 0.0]);
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.2158).abs() < 1e-4);
    }

    #[test]
    fn loss_si_examples() {
        let u = [1.0 / 3.0; 3];
        let j = joint_distribution(&u, &u);
        assert_eq!(loss_si(&j, &u, &u), 0.0);
        let e = [1.0, 0.0, 0.0];
        let c = [0.0, 0.0, 1.0];
        assert!((loss_si(&e, &c, &c) - LN2).abs() < 1e-12);
        // uniform main against (1/9, 3/9, 5/9)
        let q = [1.0 / 9.0, 3.0 / 9.0, 5.0 / 9.0];
        let mut expected = 0.0;
        for i in 0..3 {
            let m = (u[i] + q[i]) / 2.0;
            expected += 0.5 * u[i] * (u[i] / m).ln() + 0.5 * q[i] * (q[i] / m).ln();
        }
        assert!((loss_si(&u, &u, &u) - expected).abs() < 1e-14);
    }

    #[test]
    fn total_examples() {
        let sa: BTreeMap<usize, f64> = [(2, 0.1), (3, 0.2), (4, 0.3)].into_iter().collect();
        let si: BTreeMap<usize, f64> = [(2, 0.1), (3, 0.1), (4, 0.1)].into_iter().collect();
        let b = LossBundle::combine(1.0, 0.5, sa.clone(), si.clone(), 0.4, 0.8, &[2, 3, 4]).unwrap();
        assert!((b.total - 1.44).abs() < 1e-12);
        let b0 = LossBundle::combine(1.0, 0.5, sa.clone(), si.clone(), 0.0, 0.0, &[]).unwrap();
        assert_eq!(b0.total, 1.0);
        let (alpha, beta) = (0.4f64, 0.8f64);
        assert!((alpha + 2.0 * beta - 2.0).abs() < 1e-15);
        assert_eq!(
            LossBundle::combine(1.0, 0.0, sa, si, 0.4, 0.8, &[]),
            Err(ObjectiveError::NoSupervisedBlocks(0.8))
        );
    }

    #[test]
    fn total_is_linear_in_beta() {
        let sa: BTreeMap<usize, f64> = [(3, 0.37), (4, 0.11)].into_iter().collect();
        let si: BTreeMap<usize, f64> = [(3, 0.05), (4, 0.21)].into_iter().collect();
        let b1 = LossBundle::combine(0.7, 0.2, sa.clone(), si.clone(), 0.4, 0.8, &[3, 4]).unwrap();
        let b2 = LossBundle::combine(0.7, 0.2, sa, si, 0.4, 1.6, &[3, 4]).unwrap();
        assert_eq!(b2.block_term(), 2.0 * b1.block_term());
    }

    fn softmax3(z: &[f64]) -> Vec<f64> {
        crate::tensor::softmax(z, 1.0).unwrap()
    }

    #[test]
    fn js_gradient_matches_finite_differences() {
        let point = [0.3, -1.1, 0.8, 1.4, 0.2, -0.5];
        let f = |x: &[f64]| js_divergence(&softmax3(&x[..3]), &softmax3(&x[3..]));
        let mut tape = Tape::new();
        let zp = tape.leaf(Tensor::vector(point[..3].to_vec()).with_grad(true));
        let zq = tape.leaf(Tensor::vector(point[3..].to_vec()).with_grad(true));
        let p = tape.softmax_rows(zp, 1.0).unwrap();
        let q = tape.softmax_rows(zq, 1.0).unwrap();
        let js = js_divergence_on(&mut tape, p, q);
        let g = tape.backward(js).unwrap();
        let analytic: Vec<f64> = g.wrt(zp).into_iter().chain(g.wrt(zq)).collect();
        let r = finite_diff_check(f, &point, &analytic, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn si_gradient_matches_finite_differences() {
        let point = [0.3, -1.1, 0.8, 1.4, 0.2, -0.5, -0.3, 0.9, 0.1];
        let f = |x: &[f64]| loss_si(&softmax3(&x[..3]), &softmax3(&x[3..6]), &softmax3(&x[6..]));
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = (0..3)
            .map(|k| tape.leaf(Tensor::vector(point[k * 3..k * 3 + 3].to_vec()).with_grad(true)))
            .collect();
        let probs: Vec<NodeId> = ids.iter().map(|&z| tape.softmax_rows(z, 1.0).unwrap()).collect();
        let l = loss_si_on(&mut tape, probs[0], probs[1], probs[2]);
        assert!((tape.value(l).item() - f(&point)).abs() < 1e-15);
        let g = tape.backward(l).unwrap();
        let analytic: Vec<f64> = ids.iter().flat_map(|&z| g.wrt(z)).collect();
        let r = finite_diff_check(f, &point, &analytic, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn tape_losses_match_plain_functions() {
        let mut tape = Tape::new();
        let probs = tape.constant(Tensor::vector(vec![0.2, 0.5, 0.3]));
        let l = loss_main_on(&mut tape, probs, Label::Contradicted);
        assert_eq!(tape.value(l).item(), loss_main(&[0.2, 0.5, 0.3], Label::Contradicted));

        let tp = vec![0.2, 0.5, 0.3, 0.6, 0.3, 0.1];
        let tpn = tape.constant(Tensor::matrix(2, 3, tp.clone()).unwrap());
        let l = loss_er_on(&mut tape, tpn, &[1, 0]);
        assert!((tape.value(l).item() - loss_er(&tp, &[1, 0])).abs() < 1e-15);

        let attn = tape.constant(Tensor::vector(vec![0.1, 0.6, 0.3]));
        let l = loss_sa_on(&mut tape, attn, &[0.0, 0.5, 0.5], false);
        assert!((tape.value(l).item() - loss_sa(&[0.1, 0.6, 0.3], &[0.0, 0.5, 0.5], false)).abs() < 1e-15);
    }

    fn simplex3() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 3).prop_filter_map("positive mass", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn joint_matches_enumeration(psi in simplex3(), sigma in simplex3()) {
            let j = joint_distribution(&psi, &sigma);
            let o = joint_oracle(&psi, &sigma);
            for k in 0..3 {
                prop_assert!((j[k] - o[k]).abs() <= 1e-12);
            }
            prop_assert!((j.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn joint_contradiction_monotone(psi in simplex3(), sigma in simplex3(), bump in 0.0f64..1.0) {
            let mut raised = psi.clone();
            raised[2] += bump;
            let s: f64 = raised.iter().sum();
            raised.iter_mut().for_each(|v| *v /= s);
            let before = joint_distribution(&psi, &sigma)[2];
            let after = joint_distribution(&raised, &sigma)[2];
            prop_assert!(after >= before - 1e-12);
        }

        #[test]
        fn js_symmetric_and_bounded(p in simplex3(), q in simplex3()) {
            let a = js_divergence(&p, &q);
            let b = js_divergence(&q, &p);
            prop_assert!((a - b).abs() <= 1e-12);
            prop_assert!(a >= 0.0);
            prop_assert!(a <= LN2 + 1e-12);
        }
    }
}
