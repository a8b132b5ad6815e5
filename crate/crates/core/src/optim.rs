use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments per parameter plus the step counter.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub step: u32,
    pub m: IndexMap<String, Vec<f32>>,
    pub v: IndexMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.iter().map(|(n, t)| (n.to_string(), vec![0.0; t.len()])).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update of every parameter in `params`.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &IndexMap<String, Vec<f32>>,
    state: &mut AdamState,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    for (name, t) in params.iter() {
        match grads.get(name) {
            None => return Err(Error::contract(format!("no gradient for trainable parameter {name}"))),
            Some(g) if g.len() != t.len() => {
                return Err(Error::contract(format!(
                    "gradient for {name} has {} entries, parameter has {}",
                    g.len(),
                    t.len()
                )))
            }
            _ => {}
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let mhat = *mi as f64 / bc1;
            let vhat = *vi as f64 / bc2;
            *x -= (lr * mhat / (vhat.sqrt() + cfg.eps)) as f32;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tensor;

    fn single(x: f32) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("x", Tensor::new(&[1], vec![x]).unwrap()).unwrap();
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = single(0.5);
        let mut s = AdamState::new(&p);
        let g: IndexMap<_, _> = [("x".to_string(), vec![1.0])].into_iter().collect();
        adam_step(&mut p, &g, &mut s, 0.001, &AdamConfig::default()).unwrap();
        assert!((p.get("x").unwrap().data()[0] - 0.499).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = single(0.5);
        let mut s = AdamState::new(&p);
        let g: IndexMap<_, _> = [("x".to_string(), vec![0.0])].into_iter().collect();
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut s, 0.001, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.get("x").unwrap().data()[0], 0.5);
        assert_eq!(s.step, 3);
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut p = single(0.5);
        let mut s = AdamState::new(&p);
        s.m["x"][0] = 0.2;
        s.v["x"][0] = 0.5;
        let g: IndexMap<_, _> = [("x".to_string(), vec![0.0])].into_iter().collect();
        adam_step(&mut p, &g, &mut s, 0.001, &AdamConfig::default()).unwrap();
        assert!((s.m["x"][0] - 0.18).abs() < 1e-7);
        assert!((s.v["x"][0] - 0.4995).abs() < 1e-7);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = single(0.5);
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &IndexMap::new(), &mut s, 0.001, &AdamConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert_eq!(s.step, 0);
    }
}
