//! Finite-difference suites over every tape operation and a small
//! end-to-end network.

use crate::autograd::{Graph, Var};
use crate::capsule::{self, MarginLossConfig, NORM_EPS};
use crate::conv::Padding;
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheck, GradCheckReport, ScalarFn};
use crate::model::{InputShape, Masking, ModelSpec};
use crate::params::Bound;
use crate::rng;
use crate::tensor::{Scalar, Tensor};

pub const OPS_TOLERANCE: f64 = 1e-3;
pub const MODEL_TOLERANCE: f64 = 1e-2;

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

type OpFn = fn(&mut Graph<f64>, &[Var]) -> Result<Var>;

/// `sum(op(params) * W)` for a fixed random `W`, so every output element
/// contributes with a distinct weight.
struct Weighted {
    name: &'static str,
    op: OpFn,
}

impl ScalarFn for Weighted {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, params: &[Var]) -> Result<Var> {
        let any: &mut dyn std::any::Any = g;
        let g = any
            .downcast_mut::<Graph<f64>>()
            .ok_or_else(|| crate::Error::contract("op suite runs at 64-bit"))?;
        let out = (self.op)(g, params)?;
        let shape = g.shape(out).to_vec();
        let w = rng::normal(&mut rng::stream(7, self.name), &shape, 1.0);
        let y = g.mul_const(out, &w)?;
        Ok(g.sum(y))
    }
}

fn randn(name: &str, shape: &[usize]) -> Tensor<f64> {
    rng::normal(&mut rng::stream(11, name), shape, 1.0)
}

/// Random values kept at least `gap` away from zero.
fn away_from_zero(name: &str, shape: &[usize], gap: f64) -> Tensor<f64> {
    randn(name, shape).map(|x| if x >= 0.0 { x + gap } else { x - gap })
}

fn one_hot(rows: &[usize], k: usize) -> Tensor<f64> {
    let mut t = Tensor::zeros(&[rows.len(), k]);
    for (i, &r) in rows.iter().enumerate() {
        t.data_mut()[i * k + r] = 1.0;
    }
    t
}

fn cases() -> Vec<(&'static str, Vec<Tensor<f64>>, OpFn)> {
    let r = randn;
    vec![
        ("add", vec![r("add.a", &[2, 3]), r("add.b", &[2, 3])], |g, v| g.add(v[0], v[1])),
        ("add_row", vec![r("ar.x", &[3, 4]), r("ar.b", &[4])], |g, v| g.add_row(v[0], v[1])),
        ("mul", vec![r("mul.a", &[2, 3]), r("mul.b", &[2, 3])], |g, v| g.mul(v[0], v[1])),
        ("mul_const", vec![r("mc.x", &[2, 3])], |g, v| {
            let m = Tensor::from_fn(&[2, 3], |i| (i % 2) as f64);
            g.mul_const(v[0], &m)
        }),
        ("scale", vec![r("sc.x", &[5])], |g, v| Ok(g.scale(v[0], -1.7))),
        ("relu", vec![away_from_zero("relu.x", &[4, 5], 0.05)], |g, v| Ok(g.relu(v[0]))),
        ("sigmoid", vec![r("sig.x", &[4, 5])], |g, v| Ok(g.sigmoid(v[0]))),
        ("reshape", vec![r("rs.x", &[2, 6])], |g, v| g.reshape(v[0], &[3, 4])),
        ("permute", vec![r("pm.x", &[2, 3, 4])], |g, v| g.permute(v[0], &[2, 0, 1])),
        ("matmul", vec![r("mm.a", &[3, 4]), r("mm.b", &[4, 2])], |g, v| g.matmul(v[0], v[1])),
        ("linear", vec![r("ln.x", &[3, 4]), r("ln.w", &[4, 5]), r("ln.b", &[5])], |g, v| {
            g.linear(v[0], v[1], v[2])
        }),
        ("conv2d_valid", vec![r("cv.x", &[2, 2, 5, 5]), r("cv.k", &[3, 2, 3, 3]), r("cv.b", &[3])], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 1, Padding::Valid)
        }),
        ("conv2d_same_stride2", vec![r("cs.x", &[2, 2, 6, 5]), r("cs.k", &[3, 2, 3, 3]), r("cs.b", &[3])], |g, v| {
            g.conv2d(v[0], v[1], Some(v[2]), 2, Padding::Same)
        }),
        ("concat", vec![r("cc.a", &[2, 1, 3]), r("cc.b", &[2, 2, 3])], |g, v| g.concat(&[v[0], v[1]], 1)),
        ("softmax", vec![r("sm.x", &[3, 4])], |g, v| g.softmax(v[0], 1)),
        ("l2_norm", vec![r("l2.x", &[3, 4])], |g, v| g.l2_norm(v[0], 1, NORM_EPS)),
        ("sum", vec![r("sum.x", &[3, 4])], |g, v| Ok(g.sum(v[0]))),
        ("mse", vec![r("mse.a", &[3, 4]), r("mse.b", &[3, 4])], |g, v| g.mse(v[0], v[1])),
        ("sum_sq_diff", vec![r("ssd.a", &[3, 4]), r("ssd.b", &[3, 4])], |g, v| g.sum_sq_diff(v[0], v[1])),
        ("squash", vec![r("sq.x", &[3, 5])], |g, v| Ok(g.squash(v[0], NORM_EPS))),
        ("predict", vec![r("pr.u", &[2, 3, 4]), r("pr.w", &[3, 2, 4, 5])], |g, v| g.predict(v[0], v[1])),
        ("route_sum", vec![r("rsum.u", &[2, 3, 2, 4])], |g, v| {
            let c = rng::uniform(&mut rng::stream(3, "c"), &[2, 3, 2], 0.0, 1.0);
            g.route_sum(v[0], &c)
        }),
        ("coupling_sum", vec![r("cps.c", &[2, 3, 2]), r("cps.u", &[2, 3, 2, 4])], |g, v| {
            g.coupling_sum(v[0], v[1])
        }),
        ("agreement", vec![r("agr.u", &[2, 3, 2, 4]), r("agr.v", &[2, 2, 4])], |g, v| g.agreement(v[0], v[1])),
        ("routing_3_iters", vec![r("rt.u", &[2, 5, 3, 4]).map(|x| 0.5 * x)], |g, v| {
            Ok(capsule::route_on(g, v[0], 3)?.0)
        }),
        ("margin_loss", vec![Tensor::new(&[2, 3], vec![0.95, 0.5, 0.05, 0.3, 0.7, 0.2]).expect("shape")], |g, v| {
            g.margin_loss(v[0], &one_hot(&[1, 0], 3), &MarginLossConfig::default())
        }),
    ]
}

/// Checks every tape operation at 64-bit.
pub fn ops_suite(base: &GradCheck) -> Result<Vec<CaseResult>> {
    cases()
        .into_iter()
        .map(|(name, params, op)| {
            let report = finite_diff_check(&Weighted { name, op }, &params, base)?;
            Ok(CaseResult {
                name: name.to_string(),
                report,
                tolerance: OPS_TOLERANCE,
            })
        })
        .collect()
}

/// Total loss of a model on a fixed batch as a function of its parameters.
pub struct ModelObjective {
    pub spec: ModelSpec,
    pub names: Vec<String>,
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
    pub recon_multiplier: f64,
}

impl ScalarFn for ModelObjective {
    fn eval<T: Scalar>(&self, g: &mut Graph<T>, params: &[Var]) -> Result<Var> {
        let bound = Bound::from_pairs(self.names.iter().cloned().zip(params.iter().copied()));
        let images: Tensor<T> = self.images.cast();
        let x = g.constant(images.clone());
        let out = self.spec.forward(g, &bound, x, Masking::Labels(&self.labels))?;
        let target = self.spec.recon_target(&images).map(|t| g.constant(t));
        Ok(self.spec.losses(g, &out, &self.labels, target, self.recon_multiplier)?.total)
    }
}

/// The small DCNet used for end-to-end checks: 8x8 input, two dense layers
/// of three maps, four 4-D primary capsule types, two classes.
pub fn tiny_spec() -> ModelSpec {
    ModelSpec::tiny_dcnet(InputShape::new(1, 8, 8), 2, 2, 3, 4)
}

/// Parameters at which the end-to-end check is evaluated: the seeded init
/// with trunk and capsule weights scaled by `weight_scale` and small random
/// biases, so activations are O(1) instead of sitting next to ReLU kinks.
pub fn check_point(spec: &ModelSpec, seed: u64, weight_scale: f64) -> Result<(Vec<String>, Vec<Tensor<f64>>)> {
    let store = spec.init_params(seed)?;
    let mut names = Vec::new();
    let mut params = Vec::new();
    for (name, t) in store.iter() {
        let t: Tensor<f64> = t.cast();
        let t = if name.ends_with(".bias") {
            rng::normal(&mut rng::stream(seed, &format!("check.{name}")), t.shape(), 0.1)
        } else if name.starts_with("decoder") {
            t
        } else {
            t.map(|x| x * weight_scale)
        };
        names.push(name.to_string());
        params.push(t);
    }
    Ok((names, params))
}

/// End-to-end check of margin + reconstruction loss against every parameter.
pub fn model_check(spec: &ModelSpec, seed: u64, base: &GradCheck) -> Result<CaseResult> {
    let (names, params) = check_point(spec, seed, 6.0)?;
    let [c, h, w] = [spec.input.channels, spec.input.height, spec.input.width];
    let images = rng::uniform(&mut rng::stream(seed, "gradcheck.images"), &[2, c, h, w], 0.0, 1.0);
    let labels: Vec<usize> = (0..2).map(|i| i % spec.num_classes).collect();
    let objective = ModelObjective {
        spec: spec.clone(),
        names,
        images,
        labels,
        recon_multiplier: 0.05,
    };
    let report = finite_diff_check(&objective, &params, base)?;
    Ok(CaseResult {
        name: format!("model:{}", spec.kind.name()),
        report,
        tolerance: MODEL_TOLERANCE,
    })
}
