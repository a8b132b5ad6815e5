//! Central finite-difference check of tape gradients.

use crate::autograd::{Fault, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A scalar function of parameter tensors, evaluable at either precision.
pub trait ScalarFn {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, params: &[Var]) -> Result<Var>;
}

impl<F> ScalarFn for F
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, params: &[Var]) -> Result<Var> {
        // Plain closures are only defined over f64; other precisions must
        // implement the trait directly.
        let any: &mut dyn std::any::Any = g;
        match any.downcast_mut::<Graph<f64>>() {
            Some(g64) => self(g64, params),
            None => Err(Error::contract("closure scalar functions only evaluate at 64-bit")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub h: f64,
    pub precision: Precision,
    /// Check at most this many evenly spaced elements per parameter.
    pub max_per_param: Option<usize>,
    /// Broken backward rule to inject (negative controls only).
    pub fault: Fault,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-4,
            precision: Precision::F64,
            max_per_param: None,
            fault: Fault::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(param index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max relative error between tape gradients and central differences of `f`
/// over every (or every sampled) parameter element.
pub fn finite_diff_check<F: ScalarFn>(f: &F, params: &[Tensor<f64>], cfg: &GradCheck) -> Result<GradCheckReport> {
    if cfg.h <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    match cfg.precision {
        Precision::F32 => run::<f32, F>(f, params, cfg),
        Precision::F64 => run::<f64, F>(f, params, cfg),
    }
}

fn evaluate<T: Scalar, F: ScalarFn>(
    f: &F,
    params: &[Tensor<T>],
    grad: bool,
    fault: Fault,
) -> Result<(f64, Graph<T>, Vec<Var>)> {
    let mut g = Graph::with_fault(fault);
    let vars: Vec<Var> = params
        .iter()
        .map(|p| if grad { g.param(p.clone()) } else { g.constant(p.clone()) })
        .collect();
    let root = f.eval(&mut g, &vars)?;
    let value = g.value(root);
    if value.len() != 1 {
        return Err(Error::contract(format!("checked function returned shape {:?}", value.shape())));
    }
    let y = value.data()[0].f64();
    if !y.is_finite() {
        return Err(Error::contract("checked function is not finite"));
    }
    if grad {
        g.backward(root)?;
    }
    Ok((y, g, vars))
}

fn run<T: Scalar, F: ScalarFn>(f: &F, params: &[Tensor<f64>], cfg: &GradCheck) -> Result<GradCheckReport> {
    let mut work: Vec<Tensor<T>> = params.iter().map(|p| p.cast()).collect();
    let (_, g, vars) = evaluate(f, &work, true, cfg.fault)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(&work)
        .map(|(&v, p)| match g.grad(v) {
            Some(gr) => gr.iter().map(|x| x.f64()).collect(),
            None => vec![0.0; p.len()],
        })
        .collect();
    drop(g);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let h = T::of(cfg.h);
    for pi in 0..work.len() {
        let n = work[pi].len();
        let step = cfg.max_per_param.map_or(1, |m| n.div_ceil(m.max(1)).max(1));
        for e in (0..n).step_by(step) {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + h;
            let plus = evaluate(f, &work, false, cfg.fault)?.0;
            work[pi].data_mut()[e] = orig - h;
            let minus = evaluate(f, &work, false, cfg.fault)?.0;
            work[pi].data_mut()[e] = orig;
            // Divide by the step actually taken after rounding to T.
            let taken = (orig + h).f64() - (orig - h).f64();
            let numeric = (plus - minus) / taken;
            let a = analytic[pi][e];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (pi, e);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
