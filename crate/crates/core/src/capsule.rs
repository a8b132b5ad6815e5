//! Capsule primitives: squash, prediction vectors, dynamic routing and the
//! margin loss.
//!
//! Routing treats the coupling-logit updates as bookkeeping: gradients flow
//! through the final iteration's weighted sum and squash only, with the final
//! couplings held constant.

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_data, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Epsilon inside the square root of every capsule norm.
pub const NORM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CapsuleLayerSpec {
    pub num_in: usize,
    pub dim_in: usize,
    pub num_out: usize,
    pub dim_out: usize,
    pub routing_iters: usize,
}

impl CapsuleLayerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_in == 0 || self.dim_in == 0 || self.num_out == 0 || self.dim_out == 0 {
            return Err(Error::config(format!("capsule layer has a zero extent: {self:?}")));
        }
        if self.routing_iters == 0 {
            return Err(Error::config("routing_iters must be at least 1"));
        }
        Ok(())
    }

    /// One `dim_in x dim_out` transform per (input, parent) pair, no bias.
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.num_in, self.num_out, self.dim_in, self.dim_out]
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product()
    }
}

/// Routing logits `b` and couplings `c`, both `[B, I, J]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState<T: Scalar = f32> {
    pub logits: Tensor<T>,
    pub couplings: Tensor<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginLossConfig {
    pub m_plus: f64,
    pub m_minus: f64,
    pub lambda_down: f64,
}

impl Default for MarginLossConfig {
    fn default() -> Self {
        MarginLossConfig {
            m_plus: 0.9,
            m_minus: 0.1,
            lambda_down: 0.5,
        }
    }
}

impl MarginLossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.m_minus && self.m_minus < self.m_plus && self.m_plus < 1.0 && self.lambda_down > 0.0;
        if !ok {
            return Err(Error::config(format!(
                "margin loss needs 0 < m_minus < m_plus < 1 and lambda > 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Squash over the last axis with the default norm epsilon.
pub fn squash<T: Scalar>(s: &Tensor<T>) -> Tensor<T> {
    squash_with_eps(s, T::of(NORM_EPS))
}

#[inline]
fn squash_factor<T: Scalar>(q: T, eps: T) -> T {
    q / ((T::one() + q) * (q + eps).sqrt())
}

pub fn squash_with_eps<T: Scalar>(s: &Tensor<T>, eps: T) -> Tensor<T> {
    let d = *s.shape().last().expect("squash of a rank-0 tensor");
    let mut out = s.clone();
    out.requires_grad = false;
    out.grad = None;
    for v in out.data_mut().chunks_mut(d) {
        let q: T = v.iter().map(|&x| x * x).sum();
        let f = squash_factor(q, eps);
        v.iter_mut().for_each(|x| *x = *x * f);
    }
    out
}

/// Vector-Jacobian product of squash. With `v = f(q) s`, `q = |s|^2`:
/// `ds = f g + 2 f'(q) (s.g) s`.
pub(crate) fn squash_backward<T: Scalar>(s: &Tensor<T>, gout: &[T], eps: T) -> Vec<T> {
    let d = *s.shape().last().expect("squash of a rank-0 tensor");
    let one = T::one();
    let two = T::of(2.0);
    let mut gs = vec![T::zero(); s.len()];
    for ((sv, gv), out) in s.data().chunks(d).zip(gout.chunks(d)).zip(gs.chunks_mut(d)) {
        let q: T = sv.iter().map(|&x| x * x).sum();
        let r = (q + eps).sqrt();
        let f = squash_factor(q, eps);
        let df = one / ((one + q) * (one + q) * r) - q / (two * (one + q) * r * r * r);
        let dot: T = sv.iter().zip(gv).map(|(&a, &b)| a * b).sum();
        for k in 0..d {
            out[k] = f * gv[k] + two * df * dot * sv[k];
        }
    }
    gs
}

/// `u_hat[b,i,j,:] = u[b,i,:] · w[i,j,:,:]` for `u: [B,I,Din]`, `w: [I,J,Din,Dout]`.
pub fn predict<T: Scalar>(u: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    let (us, ws) = (u.shape(), w.shape());
    if us.len() != 3 || ws.len() != 4 || us[1] != ws[0] || us[2] != ws[2] {
        return Err(Error::dim(format!(
            "predict expects u [B,I,Din] and W [I,J,Din,Dout] with matching I and Din, got {us:?} and {ws:?}"
        )));
    }
    let (b, i_n, din) = (us[0], us[1], us[2]);
    let (j_n, dout) = (ws[1], ws[3]);
    let mut out = vec![T::zero(); b * i_n * j_n * dout];
    let (ud, wd) = (u.data(), w.data());
    for bi in 0..b {
        for i in 0..i_n {
            let uv = &ud[(bi * i_n + i) * din..][..din];
            for j in 0..j_n {
                let dst = &mut out[((bi * i_n + i) * j_n + j) * dout..][..dout];
                let wm = &wd[(i * j_n + j) * din * dout..][..din * dout];
                for (d, &x) in uv.iter().enumerate() {
                    for (o, &wv) in dst.iter_mut().zip(&wm[d * dout..(d + 1) * dout]) {
                        *o = *o + x * wv;
                    }
                }
            }
        }
    }
    Tensor::new(&[b, i_n, j_n, dout], out)
}

pub(crate) fn predict_backward<T: Scalar>(
    u: &Tensor<T>,
    w: &Tensor<T>,
    gout: &[T],
    want_u: bool,
    want_w: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (b, i_n, din) = (u.shape()[0], u.shape()[1], u.shape()[2]);
    let (j_n, dout) = (w.shape()[1], w.shape()[3]);
    let mut gu = want_u.then(|| vec![T::zero(); u.len()]);
    let mut gw = want_w.then(|| vec![T::zero(); w.len()]);
    let (ud, wd) = (u.data(), w.data());
    for bi in 0..b {
        for i in 0..i_n {
            let uo = (bi * i_n + i) * din;
            for j in 0..j_n {
                let g = &gout[((bi * i_n + i) * j_n + j) * dout..][..dout];
                let wo = (i * j_n + j) * din * dout;
                for d in 0..din {
                    let row = wo + d * dout;
                    if let Some(gw) = gw.as_mut() {
                        let x = ud[uo + d];
                        for (acc, &gv) in gw[row..row + dout].iter_mut().zip(g) {
                            *acc = *acc + x * gv;
                        }
                    }
                    if let Some(gu) = gu.as_mut() {
                        let dot: T = wd[row..row + dout].iter().zip(g).map(|(&a, &c)| a * c).sum();
                        gu[uo + d] = gu[uo + d] + dot;
                    }
                }
            }
        }
    }
    (gu, gw)
}

/// `s[b,j,:] = sum_i c[b,i,j] u_hat[b,i,j,:]`.
pub fn weighted_sum<T: Scalar>(u_hat: &Tensor<T>, c: &Tensor<T>) -> Result<Tensor<T>> {
    let s = u_hat.shape();
    if s.len() != 4 || c.shape() != &s[..3] {
        return Err(Error::dim(format!(
            "weighted_sum expects u_hat [B,I,J,D] and c [B,I,J], got {s:?} and {:?}",
            c.shape()
        )));
    }
    let (b, i_n, j_n, d) = (s[0], s[1], s[2], s[3]);
    let mut out = vec![T::zero(); b * j_n * d];
    for bi in 0..b {
        for i in 0..i_n {
            for j in 0..j_n {
                let cij = c.data()[(bi * i_n + i) * j_n + j];
                let src = &u_hat.data()[((bi * i_n + i) * j_n + j) * d..][..d];
                let dst = &mut out[(bi * j_n + j) * d..][..d];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o = *o + cij * x;
                }
            }
        }
    }
    Tensor::new(&[b, j_n, d], out)
}

pub(crate) fn weighted_sum_backward<T: Scalar>(shape: &[usize], c: &[T], gout: &[T]) -> Vec<T> {
    let (b, i_n, j_n, d) = (shape[0], shape[1], shape[2], shape[3]);
    let mut g = vec![T::zero(); b * i_n * j_n * d];
    for bi in 0..b {
        for i in 0..i_n {
            for j in 0..j_n {
                let cij = c[(bi * i_n + i) * j_n + j];
                let src = &gout[(bi * j_n + j) * d..][..d];
                let dst = &mut g[((bi * i_n + i) * j_n + j) * d..][..d];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o = cij * x;
                }
            }
        }
    }
    g
}

/// Dynamic routing-by-agreement on predictions `u_hat: [B,I,J,D]`.
///
/// Logits start at zero; each iteration takes `c = softmax_j(b)`,
/// `v = squash(sum_i c u_hat)`, then (except after the last iteration)
/// `b += u_hat . v`. Returns the final parent outputs `[B,J,D]`.
pub fn route<T: Scalar>(u_hat: &Tensor<T>, iters: usize) -> Result<(Tensor<T>, RoutingState<T>)> {
    if iters < 1 {
        return Err(Error::contract("routing needs at least one iteration"));
    }
    let s = u_hat.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!("route expects u_hat [B,I,J,D], got {s:?}")));
    }
    let (b, i_n, j_n, d) = (s[0], s[1], s[2], s[3]);
    let mut logits = Tensor::<T>::zeros(&[b, i_n, j_n]);
    let mut couplings = Tensor::<T>::zeros(&[b, i_n, j_n]);
    let mut v = Tensor::<T>::zeros(&[b, j_n, d]);
    for it in 0..iters {
        let c = softmax_data(logits.data(), logits.shape(), 2);
        couplings = Tensor::new(&[b, i_n, j_n], c)?;
        v = squash(&weighted_sum(u_hat, &couplings)?);
        if it + 1 < iters {
            let a = agreement(u_hat, &v)?;
            for (lg, &x) in logits.data_mut().iter_mut().zip(a.data()) {
                *lg = *lg + x;
            }
        }
    }
    Ok((v, RoutingState { logits, couplings }))
}

/// `a[b,i,j] = u_hat[b,i,j,:] . v[b,j,:]`.
pub fn agreement<T: Scalar>(u_hat: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let s = u_hat.shape();
    if s.len() != 4 || v.shape() != [s[0], s[2], s[3]] {
        return Err(Error::dim(format!(
            "agreement expects u_hat [B,I,J,D] and v [B,J,D], got {s:?} and {:?}",
            v.shape()
        )));
    }
    let (i_n, j_n, d) = (s[1], s[2], s[3]);
    let (ud, vd) = (u_hat.data(), v.data());
    let out = (0..s[0] * i_n * j_n)
        .map(|idx| {
            let (bi, j) = (idx / (i_n * j_n), idx % j_n);
            let uh = &ud[idx * d..][..d];
            let vv = &vd[(bi * j_n + j) * d..][..d];
            uh.iter().zip(vv).map(|(&x, &y)| x * y).sum::<T>()
        })
        .collect();
    Tensor::new(&s[..3], out)
}

/// Routing on the tape, differentiable through every iteration.
pub fn route_on<T: Scalar>(g: &mut Graph<T>, u_hat: Var, iters: usize) -> Result<(Var, RoutingState<T>)> {
    if iters < 1 {
        return Err(Error::contract("routing needs at least one iteration"));
    }
    let s = g.shape(u_hat).to_vec();
    if s.len() != 4 {
        return Err(Error::dim(format!("route expects u_hat [B,I,J,D], got {s:?}")));
    }
    let mut logits = g.constant(Tensor::zeros(&s[..3]));
    let mut v = None;
    let mut c = logits;
    for it in 0..iters {
        c = g.softmax(logits, 2)?;
        let sum = g.coupling_sum(c, u_hat)?;
        let out = g.squash(sum, T::of(NORM_EPS));
        v = Some(out);
        if it + 1 < iters {
            let a = g.agreement(u_hat, out)?;
            logits = g.add(logits, a)?;
        }
    }
    let state = RoutingState {
        logits: g.value(logits).clone(),
        couplings: g.value(c).clone(),
    };
    Ok((v.expect("at least one iteration"), state))
}

fn check_one_hot<T: Scalar>(targets: &Tensor<T>) -> Result<()> {
    let k = *targets.shape().last().unwrap_or(&0);
    for (row, t) in targets.data().chunks(k.max(1)).enumerate() {
        let ones = t.iter().filter(|&&x| x == T::one()).count();
        let zeros = t.iter().filter(|&&x| x == T::zero()).count();
        if ones != 1 || ones + zeros != t.len() {
            return Err(Error::contract(format!("target row {row} is not one-hot")));
        }
    }
    Ok(())
}

/// Batch mean of `sum_k T_k max(0, m+ - |v_k|)^2 + lambda (1 - T_k) max(0, |v_k| - m-)^2`.
pub fn margin_loss<T: Scalar>(norms: &Tensor<T>, targets: &Tensor<T>, cfg: &MarginLossConfig) -> Result<T> {
    if norms.shape() != targets.shape() || norms.rank() != 2 {
        return Err(Error::dim(format!(
            "margin_loss expects norms and targets [B,K], got {:?} and {:?}",
            norms.shape(),
            targets.shape()
        )));
    }
    check_one_hot(targets)?;
    let (mp, mm, lam) = (T::of(cfg.m_plus), T::of(cfg.m_minus), T::of(cfg.lambda_down));
    let total: T = norms
        .data()
        .iter()
        .zip(targets.data())
        .map(|(&n, &t)| {
            let present = (mp - n).max(T::zero());
            let absent = (n - mm).max(T::zero());
            t * present * present + lam * (T::one() - t) * absent * absent
        })
        .sum();
    Ok(total / T::of(norms.shape()[0] as f64))
}

/// Per-class capsule lengths `[B,K]` of `v: [B,K,D]`.
pub fn capsule_logits<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    if v.rank() != 3 {
        return Err(Error::dim(format!("capsule_logits expects [B,K,D], got {:?}", v.shape())));
    }
    let (b, k, d) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let norms = v
        .data()
        .chunks(d)
        .map(|c| c.iter().map(|&x| x * x).sum::<T>().sqrt())
        .collect();
    Tensor::new(&[b, k], norms)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Vec<usize> {
    let k = *scores.shape().last().unwrap_or(&1);
    scores
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
                .0
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    #[test]
    fn squash_zero_is_zero() {
        let out = squash(&Tensor::<f64>::zeros(&[1, 8]));
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn squash_unit_vector_has_half_norm() {
        let out = squash(&vec_t(&[3], &[0.0, 1.0, 0.0]));
        assert!((out.data()[1] - 0.5).abs() < 1e-6);
        assert_eq!(out.data()[0], 0.0);
    }

    #[test]
    fn squash_norm_ten() {
        // 8-D vector of norm 10 -> 100/101.
        let s: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 5.0 } else { -5.0 }).collect();
        let s = vec_t(&[8], &s.iter().map(|x| x * 10.0 / (8f64.sqrt() * 5.0)).collect::<Vec<_>>());
        assert!((norm(s.data()) - 10.0).abs() < 1e-12);
        assert!((norm(squash(&s).data()) - 0.990_099).abs() < 1e-6);
    }

    #[test]
    fn predict_identity_and_zero() {
        let u = Tensor::<f64>::from_fn(&[2, 3, 4], |i| i as f64 * 0.1);
        let eye = Tensor::<f64>::from_fn(&[3, 2, 4, 4], |idx| if idx % 4 == (idx / 4) % 4 { 1.0 } else { 0.0 });
        let uh = predict(&u, &eye).unwrap();
        for b in 0..2 {
            for i in 0..3 {
                for j in 0..2 {
                    for d in 0..4 {
                        assert_eq!(uh.at(&[b, i, j, d]), u.at(&[b, i, d]));
                    }
                }
            }
        }
        let z = predict(&u, &Tensor::zeros(&[3, 2, 4, 4])).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
        assert!(matches!(predict(&u, &Tensor::zeros(&[2, 2, 4, 4])), Err(Error::Dimension(_))));
    }

    #[test]
    fn zero_iterations_rejected() {
        assert!(matches!(route(&Tensor::<f32>::zeros(&[1, 2, 2, 3]), 0), Err(Error::Contract(_))));
    }

    #[test]
    fn single_iteration_uses_uniform_couplings() {
        // I = 2, J = 2, D = 2; hand computed s_j = (u_0j + u_1j) / 2.
        let uh = vec_t(&[1, 2, 2, 2], &[1.0, 0.0, 0.0, 2.0, 3.0, 0.0, 0.0, -4.0]);
        let (v, st) = route(&uh, 1).unwrap();
        assert!(st.couplings.data().iter().all(|&c| c == 0.5));
        assert!(st.logits.data().iter().all(|&b| b == 0.0));
        let expect = squash(&vec_t(&[1, 2, 2], &[2.0, 0.0, 0.0, -1.0]));
        for (a, b) in v.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn margin_loss_hand_cases() {
        let cfg = MarginLossConfig::default();
        let t = vec_t(&[1, 3], &[1.0, 0.0, 0.0]);
        let l = margin_loss(&vec_t(&[1, 3], &[0.9, 0.1, 0.1]), &t, &cfg).unwrap();
        assert!(l.abs() < 1e-12);
        let l = margin_loss(&vec_t(&[1, 2], &[0.0, 0.0]), &vec_t(&[1, 2], &[1.0, 0.0]), &cfg).unwrap();
        assert!((l - 0.81).abs() < 1e-12);
        let l = margin_loss(&vec_t(&[1, 2], &[0.5, 0.5]), &vec_t(&[1, 2], &[1.0, 0.0]), &cfg).unwrap();
        assert!((l - 0.24).abs() < 1e-12);
    }

    #[test]
    fn margin_loss_rejects_non_one_hot() {
        let cfg = MarginLossConfig::default();
        let n = vec_t(&[1, 2], &[0.5, 0.5]);
        assert!(matches!(margin_loss(&n, &vec_t(&[1, 2], &[1.0, 1.0]), &cfg), Err(Error::Contract(_))));
        assert!(matches!(margin_loss(&n, &vec_t(&[1, 2], &[0.5, 0.5]), &cfg), Err(Error::Contract(_))));
    }

    #[test]
    fn margin_config_validation() {
        assert!(MarginLossConfig::default().validate().is_ok());
        let bad = MarginLossConfig { m_plus: 0.1, m_minus: 0.9, lambda_down: 0.5 };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        let s = Tensor::<f32>::zeros(&[2, 4]);
        assert_eq!(argmax_rows(&s), vec![0, 0]);
        let s = Tensor::<f32>::new(&[1, 3], vec![0.1, 0.7, 0.7]).unwrap();
        assert_eq!(argmax_rows(&s), vec![1]);
    }

    #[test]
    fn one_nonzero_class_is_predicted() {
        let mut v = Tensor::<f32>::zeros(&[1, 3, 2]);
        v.data_mut()[5] = 0.3;
        assert_eq!(argmax_rows(&capsule_logits(&v).unwrap()), vec![2]);
    }
}
