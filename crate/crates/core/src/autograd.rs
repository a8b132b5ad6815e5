//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is the tape: every operation appends one node holding its
//! output value, the ids of its inputs, the rule used to differentiate it and
//! whatever it saved for that rule. Nodes are appended in evaluation order, so
//! the node list is already a topological order and [`Graph::backward`] only
//! has to walk it once in reverse.

use crate::conv::{self, ConvGeometry, Padding};
use crate::error::{Error, Result};
use crate::tensor::{gemm, numel, strides, Scalar, Tensor, Trans};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T: Scalar> {
    Leaf,
    Add,
    AddRow,
    Mul,
    MulConst(Vec<T>),
    Scale(T),
    Relu,
    Sigmoid,
    Reshape,
    Permute(Vec<usize>),
    MatMul,
    Conv2d(ConvGeometry),
    Concat { axis: usize, sizes: Vec<usize> },
    Softmax { axis: usize },
    L2Norm { axis: usize },
    Sum,
    Mse,
    SumSqDiff,
    Squash { eps: T },
    Predict,
    RouteSum(Vec<T>),
    CouplingSum,
    Agreement,
    MarginLoss { targets: Vec<T>, m_plus: T, m_minus: T, lambda: T },
    Detach,
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::AddRow => "add_row",
            Op::Mul => "mul",
            Op::MulConst(_) => "mul_const",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Reshape => "reshape",
            Op::Permute(_) => "permute",
            Op::MatMul => "matmul",
            Op::Conv2d(_) => "conv2d",
            Op::Concat { .. } => "concat",
            Op::Softmax { .. } => "softmax",
            Op::L2Norm { .. } => "l2_norm",
            Op::Sum => "sum",
            Op::Mse => "mse",
            Op::SumSqDiff => "sum_sq_diff",
            Op::Squash { .. } => "squash",
            Op::Predict => "predict",
            Op::RouteSum(_) => "route_sum",
            Op::CouplingSum => "coupling_sum",
            Op::Agreement => "agreement",
            Op::MarginLoss { .. } => "margin_loss",
            Op::Detach => "detach",
        }
    }
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    op: Op<T>,
    requires_grad: bool,
}

/// Test hook: perturbs one backward rule so gradient checks can be shown to
/// catch a broken derivative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// ReLU passes gradient everywhere, as if it were the identity.
    LeakyRelu,
}

#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    fault: Fault,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            fault: Fault::None,
        }
    }

    pub fn with_fault(fault: Fault) -> Self {
        Graph {
            nodes: Vec::new(),
            fault,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient accumulated into a leaf by the last [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn input_ids(&self, v: Var) -> Vec<usize> {
        self.nodes[v.0].inputs.iter().map(|x| x.0).collect()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// First node (in creation order) whose value has a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<Var> {
        self.nodes.iter().position(|n| !n.value.all_finite()).map(Var)
    }

    /// Adds a leaf. `tensor.requires_grad` decides whether gradients reach it.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad;
        self.push(tensor, vec![], Op::Leaf, rg)
    }

    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad())
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.requires_grad = false;
        self.leaf(tensor)
    }

    fn push(&mut self, mut value: Tensor<T>, inputs: Vec<Var>, op: Op<T>, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        value.grad = None;
        self.nodes.push(Node {
            value,
            inputs,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor<T>, inputs: Vec<Var>, op: Op<T>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, inputs, op, rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn check_axis(&self, x: Var, axis: usize, what: &str) -> Result<()> {
        let rank = self.shape(x).len();
        if axis >= rank {
            return Err(Error::dim(format!(
                "{what}: axis {axis} out of range for rank {rank}"
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push_op(out, vec![a, b], Op::Add))
    }

    /// `x[..., n] + bias[n]`, broadcasting the bias over leading axes.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [n] {
            return Err(Error::dim(format!(
                "add_row: bias {:?} does not match last axis of {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let vb = self.value(bias).data().to_vec();
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + vb[i % n])
            .collect();
        let out = Tensor::new(vx.shape(), data)?;
        Ok(self.push_op(out, vec![x, bias], Op::AddRow))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        Ok(self.push_op(out, vec![a, b], Op::Mul))
    }

    /// Elementwise product with a constant (e.g. a capsule mask).
    pub fn mul_const(&mut self, x: Var, mask: &Tensor<T>) -> Result<Var> {
        if self.shape(x) != mask.shape() {
            return Err(Error::dim(format!(
                "mul_const: shapes {:?} and {:?} differ",
                self.shape(x),
                mask.shape()
            )));
        }
        let vx = self.value(x);
        let data = vx.data().iter().zip(mask.data()).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(vx.shape(), data)?;
        Ok(self.push_op(out, vec![x], Op::MulConst(mask.data().to_vec())))
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let out = self.value(x).map(|v| v * k);
        self.push_op(out, vec![x], Op::Scale(k))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push_op(out, vec![x], Op::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.push_op(out, vec![x], Op::Sigmoid)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push_op(out, vec![x], Op::Reshape))
    }

    /// Reorders axes: output axis `k` is input axis `axes[k]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(format!(
                "permute: {axes:?} is not a permutation of rank {rank}"
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let data = permute_data(self.value(x).data(), &in_shape, axes);
        let out = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(out, vec![x], Op::Permute(axes.to_vec())))
    }

    /// `[m,k]·[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul: {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.value(a).data(), Trans::No, self.value(b).data(), Trans::No, T::zero(), &mut out);
        let out = Tensor::new(&[m, n], out)?;
        Ok(self.push_op(out, vec![a, b], Op::MatMul))
    }

    /// Fully connected layer `x·w + b` for `x: [B,in]`, `w: [in,out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    /// Cross-correlation of `input [N,C,H,W]` with `kernel [K,C,kh,kw]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
        padding: Padding,
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(input), self.shape(kernel), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::dim(format!(
                    "conv2d: bias {:?} but kernel has {} output channels",
                    self.shape(b),
                    geom.out_channels
                )));
            }
        }
        let out = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(&geom.output_shape(), out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push_op(out, inputs, Op::Conv2d(geom)))
    }

    /// Concatenates along `axis`; every other extent must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        self.check_axis(first, axis, "concat")?;
        let base = self.shape(first).to_vec();
        for &p in &parts[1..] {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(Error::dim(format!(
                    "concat along axis {axis}: {s:?} does not match {base:?} on the other axes"
                )));
            }
        }
        let sizes: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        let total: usize = sizes.iter().sum();
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &sz) in parts.iter().zip(&sizes) {
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * sz * inner..(o + 1) * sz * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(&shape, data)?;
        Ok(self.push_op(out, parts.to_vec(), Op::Concat { axis, sizes }))
    }

    /// Channel concatenation of `[N,C_i,H,W]` feature maps.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            if self.shape(p).len() != 4 {
                return Err(Error::dim(format!(
                    "concat_channels expects [N,C,H,W], got {:?}",
                    self.shape(p)
                )));
            }
        }
        self.concat(parts, 1)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis(x, axis, "softmax")?;
        let shape = self.shape(x).to_vec();
        let out = softmax_data(self.value(x).data(), &shape, axis);
        let out = Tensor::new(&shape, out)?;
        Ok(self.push_op(out, vec![x], Op::Softmax { axis }))
    }

    /// `sqrt(sum(x^2) + eps)` along `axis`, which is removed from the shape.
    pub fn l2_norm(&mut self, x: Var, axis: usize, eps: T) -> Result<Var> {
        self.check_axis(x, axis, "l2_norm")?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = T::zero();
                for k in 0..n {
                    let v = src[(o * n + k) * inner + i];
                    acc = acc + v * v;
                }
                out[o * inner + i] = (acc + eps).sqrt();
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push_op(out, vec![x], Op::L2Norm { axis }))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push_op(Tensor::scalar(s), vec![x], Op::Sum)
    }

    /// Mean squared error between equally shaped tensors.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = T::of(self.value(a).len() as f64);
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.push_op(Tensor::scalar(s / n), vec![a, b], Op::Mse))
    }

    /// Sum of squared differences.
    pub fn sum_sq_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sum_sq_diff")?;
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        Ok(self.push_op(Tensor::scalar(s), vec![a, b], Op::SumSqDiff))
    }

    /// Capsule squash over the last axis: `|s|^2/(1+|s|^2) * s/sqrt(|s|^2+eps)`.
    pub fn squash(&mut self, s: Var, eps: T) -> Var {
        let out = crate::capsule::squash_with_eps(self.value(s), eps);
        self.push_op(out, vec![s], Op::Squash { eps })
    }

    /// Capsule predictions `u_hat[b,i,j,:] = u[b,i,:] · w[i,j,:,:]`.
    pub fn predict(&mut self, u: Var, w: Var) -> Result<Var> {
        let out = crate::capsule::predict(self.value(u), self.value(w))?;
        Ok(self.push_op(out, vec![u, w], Op::Predict))
    }

    /// `s[b,j,:] = sum_i c[b,i,j] * u_hat[b,i,j,:]` with fixed couplings `c`.
    pub fn route_sum(&mut self, u_hat: Var, couplings: &Tensor<T>) -> Result<Var> {
        let out = crate::capsule::weighted_sum(self.value(u_hat), couplings)?;
        Ok(self.push_op(out, vec![u_hat], Op::RouteSum(couplings.data().to_vec())))
    }

    /// `s[b,j,:] = sum_i c[b,i,j] * u_hat[b,i,j,:]`, differentiable in both.
    pub fn coupling_sum(&mut self, c: Var, u_hat: Var) -> Result<Var> {
        let out = crate::capsule::weighted_sum(self.value(u_hat), self.value(c))?;
        Ok(self.push_op(out, vec![c, u_hat], Op::CouplingSum))
    }

    /// `a[b,i,j] = u_hat[b,i,j,:] . v[b,j,:]`.
    pub fn agreement(&mut self, u_hat: Var, v: Var) -> Result<Var> {
        let out = crate::capsule::agreement(self.value(u_hat), self.value(v))?;
        Ok(self.push_op(out, vec![u_hat, v], Op::Agreement))
    }

    /// Batch mean of the summed per-class margin loss. `targets` is one-hot `[B,K]`.
    pub fn margin_loss(
        &mut self,
        norms: Var,
        targets: &Tensor<T>,
        cfg: &crate::capsule::MarginLossConfig,
    ) -> Result<Var> {
        let value = crate::capsule::margin_loss(self.value(norms), targets, cfg)?;
        let op = Op::MarginLoss {
            targets: targets.data().to_vec(),
            m_plus: T::of(cfg.m_plus),
            m_minus: T::of(cfg.m_minus),
            lambda: T::of(cfg.lambda_down),
        };
        Ok(self.push_op(Tensor::scalar(value), vec![norms], op))
    }

    /// Copy of `x` that gradients do not pass through.
    pub fn detach(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(out, vec![x], Op::Detach, false)
    }

    /// Clears gradients left by a previous backward pass.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    /// Back-propagates from a scalar `root`, accumulating into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if matches!(self.nodes[id].op, Op::Leaf) {
                self.nodes[id].value.accumulate_grad(&gout)?;
                continue;
            }
            let input_grads = self.local_backward(id, &gout);
            let inputs = self.nodes[id].inputs.clone();
            for (inp, g) in inputs.into_iter().zip(input_grads) {
                let Some(g) = g else { continue };
                if !self.nodes[inp.0].requires_grad {
                    continue;
                }
                match &mut grads[inp.0] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Gradients with respect to each input of node `id`, given its output gradient.
    fn local_backward(&self, id: usize, gout: &[T]) -> Vec<Option<Vec<T>>> {
        let node = &self.nodes[id];
        let inp = |k: usize| &self.nodes[node.inputs[k].0].value;
        let wants = |k: usize| self.nodes[node.inputs[k].0].requires_grad;
        let out = &node.value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add => vec![Some(gout.to_vec()), Some(gout.to_vec())],
            Op::AddRow => {
                let n = inp(1).len();
                let mut gb = vec![T::zero(); n];
                for (i, &g) in gout.iter().enumerate() {
                    gb[i % n] = gb[i % n] + g;
                }
                vec![Some(gout.to_vec()), Some(gb)]
            }
            Op::Mul => {
                let (a, b) = (inp(0).data(), inp(1).data());
                vec![
                    Some(gout.iter().zip(b).map(|(&g, &y)| g * y).collect()),
                    Some(gout.iter().zip(a).map(|(&g, &x)| g * x).collect()),
                ]
            }
            Op::MulConst(mask) => vec![Some(gout.iter().zip(mask).map(|(&g, &m)| g * m).collect())],
            Op::Scale(k) => vec![Some(gout.iter().map(|&g| g * *k).collect())],
            Op::Relu => {
                let x = inp(0).data();
                let leak = self.fault == Fault::LeakyRelu;
                vec![Some(
                    gout.iter()
                        .zip(x)
                        .map(|(&g, &v)| if v > T::zero() || leak { g } else { T::zero() })
                        .collect(),
                )]
            }
            Op::Sigmoid => vec![Some(
                gout.iter()
                    .zip(out.data())
                    .map(|(&g, &y)| g * y * (T::one() - y))
                    .collect(),
            )],
            Op::Reshape | Op::Detach => vec![Some(gout.to_vec())],
            Op::Permute(axes) => {
                let mut inverse = vec![0; axes.len()];
                for (k, &a) in axes.iter().enumerate() {
                    inverse[a] = k;
                }
                vec![Some(permute_data(gout, out.shape(), &inverse))]
            }
            Op::MatMul => {
                let (a, b) = (inp(0), inp(1));
                let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
                let ga = wants(0).then(|| {
                    let mut ga = vec![T::zero(); m * k];
                    gemm(m, n, k, gout, Trans::No, b.data(), Trans::Yes, T::zero(), &mut ga);
                    ga
                });
                let gb = wants(1).then(|| {
                    let mut gb = vec![T::zero(); k * n];
                    gemm(k, m, n, a.data(), Trans::Yes, gout, Trans::No, T::zero(), &mut gb);
                    gb
                });
                vec![ga, gb]
            }
            Op::Conv2d(geom) => {
                let grads = conv::backward(
                    geom,
                    inp(0).data(),
                    inp(1).data(),
                    gout,
                    wants(0),
                    wants(1),
                );
                let mut v = vec![grads.input, grads.kernel];
                if node.inputs.len() == 3 {
                    v.push(Some(grads.bias));
                }
                v
            }
            Op::Concat { axis, sizes } => {
                let shape = out.shape();
                let total: usize = sizes.iter().sum();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let mut parts: Vec<Vec<T>> =
                    sizes.iter().map(|&s| Vec::with_capacity(outer * s * inner)).collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (p, &s) in parts.iter_mut().zip(sizes) {
                        p.extend_from_slice(&gout[off..off + s * inner]);
                        off += s * inner;
                    }
                }
                parts.into_iter().map(Some).collect()
            }
            Op::Softmax { axis } => {
                let (outer, n, inner) = split_axis(out.shape(), *axis);
                let y = out.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |k: usize| (o * n + k) * inner + i;
                        let dot: T = (0..n).map(|k| gout[idx(k)] * y[idx(k)]).sum();
                        for k in 0..n {
                            gx[idx(k)] = y[idx(k)] * (gout[idx(k)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::L2Norm { axis } => {
                let x = inp(0);
                let (outer, n, inner) = split_axis(x.shape(), *axis);
                let norms = out.data();
                let mut gx = vec![T::zero(); x.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let g = gout[o * inner + i] / norms[o * inner + i];
                        for k in 0..n {
                            let idx = (o * n + k) * inner + i;
                            gx[idx] = g * x.data()[idx];
                        }
                    }
                }
                vec![Some(gx)]
            }
            Op::Sum => vec![Some(vec![gout[0]; inp(0).len()])],
            Op::Mse => {
                let (a, b) = (inp(0).data(), inp(1).data());
                let k = T::of(2.0) * gout[0] / T::of(a.len() as f64);
                let ga: Vec<T> = a.iter().zip(b).map(|(&x, &y)| k * (x - y)).collect();
                let gb = ga.iter().map(|&g| -g).collect();
                vec![Some(ga), Some(gb)]
            }
            Op::SumSqDiff => {
                let (a, b) = (inp(0).data(), inp(1).data());
                let k = T::of(2.0) * gout[0];
                let ga: Vec<T> = a.iter().zip(b).map(|(&x, &y)| k * (x - y)).collect();
                let gb = ga.iter().map(|&g| -g).collect();
                vec![Some(ga), Some(gb)]
            }
            Op::Squash { eps } => vec![Some(crate::capsule::squash_backward(inp(0), gout, *eps))],
            Op::Predict => {
                let (gu, gw) = crate::capsule::predict_backward(inp(0), inp(1), gout, wants(0), wants(1));
                vec![gu, gw]
            }
            Op::RouteSum(c) => vec![Some(crate::capsule::weighted_sum_backward(inp(0).shape(), c, gout))],
            Op::CouplingSum => {
                let (c, u_hat) = (inp(0), inp(1));
                let gs = Tensor::new(out.shape(), gout.to_vec()).expect("gradient shape");
                let gc = wants(0).then(|| {
                    crate::capsule::agreement(u_hat, &gs)
                        .expect("coupling shapes")
                        .into_data()
                });
                let gu = wants(1).then(|| crate::capsule::weighted_sum_backward(u_hat.shape(), c.data(), gout));
                vec![gc, gu]
            }
            Op::Agreement => {
                let (u_hat, v) = (inp(0), inp(1));
                let ga = Tensor::new(out.shape(), gout.to_vec()).expect("gradient shape");
                let gu = wants(0).then(|| crate::capsule::weighted_sum_backward(u_hat.shape(), gout, v.data()));
                let gv = wants(1).then(|| {
                    crate::capsule::weighted_sum(u_hat, &ga)
                        .expect("agreement shapes")
                        .into_data()
                });
                vec![gu, gv]
            }
            Op::MarginLoss {
                targets,
                m_plus,
                m_minus,
                lambda,
            } => {
                let x = inp(0);
                let batch = T::of(x.shape()[0] as f64);
                let two = T::of(2.0);
                let g = x
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&n, &t)| {
                        let present = (*m_plus - n).max(T::zero());
                        let absent = (n - *m_minus).max(T::zero());
                        (-two * t * present + *lambda * (T::one() - t) * two * absent) * gout[0] / batch
                    })
                    .collect();
                vec![Some(g)]
            }
        }
    }
}

/// `(outer, extent, inner)` factorisation of `shape` around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

pub(crate) fn softmax_data<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * n + k) * inner + i;
            let max = (0..n).map(|k| x[idx(k)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for k in 0..n {
                let e = (x[idx(k)] - max).exp();
                out[idx(k)] = e;
                z = z + e;
            }
            for k in 0..n {
                out[idx(k)] = out[idx(k)] / z;
            }
        }
    }
    out
}

fn permute_data<T: Scalar>(src: &[T], in_shape: &[usize], axes: &[usize]) -> Vec<T> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let n = numel(&out_shape);
    let mut out = Vec::with_capacity(n);
    let mut index = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(src[offset]);
        for d in (0..index.len()).rev() {
            index[d] += 1;
            offset += step[d];
            if index[d] < out_shape[d] {
                break;
            }
            offset -= step[d] * out_shape[d];
            index[d] = 0;
        }
    }
    out
}
