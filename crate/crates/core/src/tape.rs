//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Operations are recorded as nodes in topological order; [`Tape::backward`]
//! replays them in reverse, accumulating adjoints with a fixed summation
//! order so gradients are bit-reproducible. Spike nonlinearities record a
//! custom rectangular-window backward rule; [`Primitive::StopGradient`]
//! creates a value-identical node with no parents, so no gradient crosses it.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Precision, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Test hooks for fault injection: deliberately corrupt a backward rule so
/// self-verification can prove it would catch a broken gradient.
#[doc(hidden)]
pub mod test_hooks {
    use super::AtomicBool;

    /// When set, the surrogate spike backward is scaled by 2 (wrong on purpose).
    pub static CORRUPT_SURROGATE_BACKWARD: AtomicBool = AtomicBool::new(false);
}

/// Batch-norm mode carried by the primitive: training normalizes with the
/// call's own batch statistics, eval with frozen running statistics.
#[derive(Clone, Debug)]
pub enum BnMode {
    Train,
    Eval { mean: Tensor, var: Tensor },
}

#[derive(Clone, Debug)]
pub enum Primitive {
    /// Input, constant, or named trainable parameter.
    Leaf { name: Option<String> },
    MatMul { transpose_a: bool, transpose_b: bool },
    Conv2d { stride: usize, pad: usize },
    Add,
    Sub,
    Mul,
    Div,
    /// y = scale * x + shift
    ScalarScale { scale: f64, shift: f64 },
    Sum { axis: Option<usize> },
    Mean { axis: Option<usize> },
    Square,
    Sqrt,
    Clip { lo: f64, hi: f64 },
    /// y = clip((x - threshold)/width + 1/2, 0, 1); analytic backward.
    ReluClip { threshold: f64, width: f64 },
    /// Forward step function (1 at threshold); backward is the rectangular
    /// window of height 1/width centered at the threshold.
    HeavisideSurrogate { threshold: f64, width: f64 },
    BatchNorm { eps: f64, mode: BnMode },
    Reshape { shape: Vec<usize> },
    /// Concatenate along axis 0.
    Concat,
    /// Rows start..start+len along axis 0.
    Slice { start: usize, len: usize },
    AvgPoolGlobal,
    StopGradient,
    CrossEntropy { labels: Vec<usize> },
}

impl Primitive {
    fn name(&self) -> &'static str {
        match self {
            Primitive::Leaf { .. } => "leaf",
            Primitive::MatMul { .. } => "matmul",
            Primitive::Conv2d { .. } => "conv2d",
            Primitive::Add => "add",
            Primitive::Sub => "subtract",
            Primitive::Mul => "elementwise-multiply",
            Primitive::Div => "divide",
            Primitive::ScalarScale { .. } => "scalar-scale",
            Primitive::Sum { .. } => "sum",
            Primitive::Mean { .. } => "mean",
            Primitive::Square => "square",
            Primitive::Sqrt => "sqrt",
            Primitive::Clip { .. } => "clip",
            Primitive::ReluClip { .. } => "relu_clip",
            Primitive::HeavisideSurrogate { .. } => "heaviside_surrogate",
            Primitive::BatchNorm { .. } => "batchnorm",
            Primitive::Reshape { .. } => "reshape",
            Primitive::Concat => "concat",
            Primitive::Slice { .. } => "slice",
            Primitive::AvgPoolGlobal => "avgpool-global",
            Primitive::StopGradient => "stop_gradient",
            Primitive::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

struct Node {
    prim: Primitive,
    parents: Vec<usize>,
    value: Tensor,
    /// Batch statistics saved by training-mode batch norm.
    saved: Option<(Tensor, Tensor)>,
}

pub struct Tape {
    id: u64,
    precision: Precision,
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new(precision: Precision) -> Tape {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            precision,
            nodes: Vec::new(),
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Tape("variable does not belong to this tape".into()));
        }
        Ok(v.index)
    }

    fn push(&mut self, prim: Primitive, parents: Vec<usize>, value: Tensor, saved: Option<(Tensor, Tensor)>) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node { prim, parents, value, saved });
        Var { tape: self.id, index }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.index].value
    }

    /// Record a constant (no gradient tracked beyond it).
    pub fn constant(&mut self, value: Tensor) -> Var {
        let value = value.rounded(self.precision);
        self.push(Primitive::Leaf { name: None }, vec![], value, None)
    }

    /// Record a named trainable parameter; names must be unique per tape.
    pub fn parameter(&mut self, name: &str, value: Tensor) -> Result<Var> {
        for node in &self.nodes {
            if let Primitive::Leaf { name: Some(n) } = &node.prim {
                if n == name {
                    return Err(Error::Tape(format!("parameter `{name}` registered twice")));
                }
            }
        }
        let value = value.rounded(self.precision);
        Ok(self.push(Primitive::Leaf { name: Some(name.to_string()) }, vec![], value, None))
    }

    /// Apply a primitive to recorded inputs, recording the result.
    pub fn apply(&mut self, prim: Primitive, inputs: &[Var]) -> Result<Var> {
        let mut idxs = Vec::with_capacity(inputs.len());
        for v in inputs {
            idxs.push(self.check(*v)?);
        }
        let vals: Vec<&Tensor> = idxs.iter().map(|&i| &self.nodes[i].value).collect();
        let (value, saved) = eval_primitive(&prim, &vals)?;
        let value = value.rounded(self.precision);
        if value.has_non_finite() {
            return Err(Error::NonFinite { node_id: self.nodes.len(), op: prim.name().into() });
        }
        // a stop-gradient node keeps the value but drops its ancestry
        let parents = if matches!(prim, Primitive::StopGradient) { vec![] } else { idxs };
        Ok(self.push(prim, parents, value, saved))
    }

    /// Batch statistics saved by a training-mode batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&Tensor, &Tensor)> {
        self.nodes[v.index].saved.as_ref().map(|(m, s)| (m, s))
    }

    /// Smallest distance from any recorded clip/window input to one of its
    /// nonsmooth points (clip bounds, window edges, spike/gate thresholds).
    /// Finite-difference checks demand a margin of several step sizes.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            let kinks: Vec<f64> = match &node.prim {
                Primitive::Clip { lo, hi } => vec![*lo, *hi],
                Primitive::ReluClip { threshold, width } => {
                    // the center is included: the path-B reset gate flips there
                    vec![threshold - width / 2.0, *threshold, threshold + width / 2.0]
                }
                Primitive::HeavisideSurrogate { threshold, width } => {
                    vec![threshold - width / 2.0, *threshold, threshold + width / 2.0]
                }
                _ => continue,
            };
            let input = &self.nodes[node.parents[0]].value;
            for &x in input.data() {
                for &k in &kinks {
                    margin = margin.min((x - k).abs());
                }
            }
        }
        margin
    }

    // ---------------------------------------------------- op conveniences

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::MatMul { transpose_a: false, transpose_b: false }, &[a, b])
    }

    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.apply(Primitive::MatMul { transpose_a: ta, transpose_b: tb }, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        self.apply(Primitive::Conv2d { stride, pad }, &[x, w])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Primitive::Div, &[a, b])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.apply(Primitive::ScalarScale { scale, shift: 0.0 }, &[x])
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.apply(Primitive::ScalarScale { scale, shift }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sum { axis: None }, &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Primitive::Sum { axis: Some(axis) }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Mean { axis: None }, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Square, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::Sqrt, &[x])
    }

    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.apply(Primitive::Clip { lo, hi }, &[x])
    }

    pub fn relu_clip(&mut self, x: Var, threshold: f64, width: f64) -> Result<Var> {
        self.apply(Primitive::ReluClip { threshold, width }, &[x])
    }

    pub fn heaviside_surrogate(&mut self, x: Var, threshold: f64, width: f64) -> Result<Var> {
        self.apply(Primitive::HeavisideSurrogate { threshold, width }, &[x])
    }

    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        self.apply(Primitive::BatchNorm { eps, mode: BnMode::Train }, &[x, gamma, beta])
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Tensor,
        var: Tensor,
        eps: f64,
    ) -> Result<Var> {
        self.apply(Primitive::BatchNorm { eps, mode: BnMode::Eval { mean, var } }, &[x, gamma, beta])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::Reshape { shape }, &[x])
    }

    /// Flatten all trailing dims: (N, ...) -> (N, prod).
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if shape.is_empty() {
            return Err(Error::Shape("flatten on 0-d tensor".into()));
        }
        let rest: usize = shape[1..].iter().product();
        self.reshape(x, vec![shape[0], rest])
    }

    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Primitive::Concat, xs)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.apply(Primitive::Slice { start, len }, &[x])
    }

    pub fn avgpool_global(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::AvgPoolGlobal, &[x])
    }

    pub fn stop_gradient(&mut self, x: Var) -> Result<Var> {
        self.apply(Primitive::StopGradient, &[x])
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        self.apply(Primitive::CrossEntropy { labels }, &[logits])
    }

    // --------------------------------------------------------- backward

    /// Reverse accumulation from a scalar root; returns the gradient of the
    /// root with respect to every named parameter registered on the tape
    /// (zeros for parameters the root does not reach).
    pub fn backward(&self, root: Var) -> Result<GradientMap> {
        let ridx = self.check(root)?;
        if self.nodes[ridx].value.len() != 1 {
            return Err(Error::Tape(format!(
                "backward root must be scalar-shaped, got {:?}",
                self.nodes[ridx].value.shape()
            )));
        }
        let mut adjoint: Vec<Option<Tensor>> = Vec::with_capacity(ridx + 1);
        adjoint.resize_with(ridx + 1, || None);
        adjoint[ridx] = Some(Tensor::scalar(1.0));
        let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();

        for idx in (0..=ridx).rev() {
            let Some(g) = adjoint[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.prim {
                Primitive::Leaf { name: Some(n) } => {
                    grads.insert(n.clone(), g.rounded(self.precision));
                }
                Primitive::Leaf { name: None } | Primitive::StopGradient => {}
                _ => {
                    let parent_grads = self.vjp(node, &g)?;
                    for (p, pg) in node.parents.iter().zip(parent_grads) {
                        match &mut adjoint[*p] {
                            Some(acc) => *acc = ops::add(acc, &pg)?,
                            slot @ None => *slot = Some(pg),
                        }
                    }
                }
            }
        }

        // every registered parameter gets an entry, reached or not
        for node in &self.nodes {
            if let Primitive::Leaf { name: Some(n) } = &node.prim {
                grads
                    .entry(n.clone())
                    .or_insert_with(|| Tensor::zeros(node.value.shape()));
            }
        }
        Ok(GradientMap { grads })
    }

    /// Vector-Jacobian product: gradient contribution to each parent.
    fn vjp(&self, node: &Node, g: &Tensor) -> Result<Vec<Tensor>> {
        let pv = |i: usize| &self.nodes[node.parents[i]].value;
        match &node.prim {
            Primitive::Leaf { .. } | Primitive::StopGradient => Ok(vec![]),
            Primitive::MatMul { transpose_a: ta, transpose_b: tb } => {
                let (a, b) = (pv(0), pv(1));
                let da = match (ta, tb) {
                    (false, false) => ops::matmul(g, b, false, true)?,
                    (false, true) => ops::matmul(g, b, false, false)?,
                    (true, false) => ops::matmul(b, g, false, true)?,
                    (true, true) => ops::matmul(b, g, true, true)?,
                };
                let db = match (ta, tb) {
                    (false, false) => ops::matmul(a, g, true, false)?,
                    (true, false) => ops::matmul(a, g, false, false)?,
                    (false, true) => ops::matmul(g, a, true, false)?,
                    (true, true) => ops::matmul(g, a, true, true)?,
                };
                Ok(vec![da, db])
            }
            Primitive::Conv2d { stride, pad } => {
                let (x, w) = (pv(0), pv(1));
                let dx = ops::conv2d_grad_input(x.shape(), w, g, *stride, *pad)?;
                let dw = ops::conv2d_grad_weight(x, w.shape(), g, *stride, *pad)?;
                Ok(vec![dx, dw])
            }
            Primitive::Add => Ok(vec![g.clone(), ops::reduce_to(g, pv(1).shape())?]),
            Primitive::Sub => {
                let db = ops::reduce_to(g, pv(1).shape())?.map(|x| -x);
                Ok(vec![g.clone(), db])
            }
            Primitive::Mul => Ok(vec![ops::mul(g, pv(1))?, ops::mul(g, pv(0))?]),
            Primitive::Div => {
                let (a, b) = (pv(0), pv(1));
                let da = ops::div(g, b)?;
                let db = ops::div(&ops::mul(g, a)?, &ops::mul(b, b)?)?.map(|x| -x);
                Ok(vec![da, db])
            }
            Primitive::ScalarScale { scale, .. } => Ok(vec![g.map(|x| x * scale)]),
            Primitive::Sum { axis } => Ok(vec![ops::expand_axis(g, pv(0).shape(), *axis)?]),
            Primitive::Mean { axis } => {
                let n = ops::reduced_count(pv(0).shape(), *axis) as f64;
                let expanded = ops::expand_axis(g, pv(0).shape(), *axis)?;
                Ok(vec![expanded.map(|x| x / n)])
            }
            Primitive::Square => {
                let x = pv(0);
                let out: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&xi, &gi)| 2.0 * xi * gi)
                    .collect();
                Ok(vec![Tensor::new(x.shape().to_vec(), out)?])
            }
            Primitive::Sqrt => {
                // subgradient 0 at x == 0 so dead columns stay silent
                let x = pv(0);
                let y = &node.value;
                let out: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(y.data().iter().zip(g.data().iter()))
                    .map(|(&xi, (&yi, &gi))| if xi == 0.0 { 0.0 } else { gi / (2.0 * yi) })
                    .collect();
                Ok(vec![Tensor::new(x.shape().to_vec(), out)?])
            }
            Primitive::Clip { lo, hi } => {
                // left derivative at both kinks: slope on (lo, hi]
                let x = pv(0);
                let out: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&xi, &gi)| if xi > *lo && xi <= *hi { gi } else { 0.0 })
                    .collect();
                Ok(vec![Tensor::new(x.shape().to_vec(), out)?])
            }
            Primitive::ReluClip { threshold, width } => {
                let (lo, hi) = (threshold - width / 2.0, threshold + width / 2.0);
                let x = pv(0);
                let out: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&xi, &gi)| if xi > lo && xi <= hi { gi / width } else { 0.0 })
                    .collect();
                Ok(vec![Tensor::new(x.shape().to_vec(), out)?])
            }
            Primitive::HeavisideSurrogate { threshold, width } => {
                let half = width / 2.0;
                let mut unit = 1.0 / width;
                if test_hooks::CORRUPT_SURROGATE_BACKWARD.load(Ordering::Relaxed) {
                    unit *= 2.0;
                }
                let x = pv(0);
                let out: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(g.data().iter())
                    .map(|(&xi, &gi)| if (xi - threshold).abs() <= half { gi * unit } else { 0.0 })
                    .collect();
                Ok(vec![Tensor::new(x.shape().to_vec(), out)?])
            }
            Primitive::BatchNorm { eps, mode } => {
                let (x, gamma) = (pv(0), pv(1));
                let grads = match mode {
                    BnMode::Train => {
                        let (mean, var) = node
                            .saved
                            .as_ref()
                            .ok_or_else(|| Error::Tape("batchnorm node missing saved stats".into()))?;
                        ops::batchnorm_train_backward(x, gamma, mean, var, *eps, g)?
                    }
                    BnMode::Eval { mean, var } => {
                        ops::batchnorm_eval_backward(x, gamma, mean, var, *eps, g)?
                    }
                };
                Ok(vec![grads.dx, grads.dgamma, grads.dbeta])
            }
            Primitive::Reshape { .. } => Ok(vec![g.reshaped(pv(0).shape().to_vec())?]),
            Primitive::Concat => {
                let mut out = Vec::with_capacity(node.parents.len());
                let mut row = 0;
                for p in &node.parents {
                    let shape = self.nodes[*p].value.shape();
                    let rows = shape[0];
                    let inner: usize = shape[1..].iter().product();
                    let part = g.data()[row * inner..(row + rows) * inner].to_vec();
                    out.push(Tensor::new(shape.to_vec(), part)?);
                    row += rows;
                }
                Ok(out)
            }
            Primitive::Slice { start, .. } => {
                let x = pv(0);
                let inner: usize = x.shape()[1..].iter().product();
                let mut dx = vec![0.0f64; x.len()];
                let gd = g.data();
                dx[start * inner..start * inner + gd.len()].copy_from_slice(gd);
                Ok(vec![Tensor::new(x.shape().to_vec(), dx)?])
            }
            Primitive::AvgPoolGlobal => Ok(vec![ops::avgpool_global_backward(pv(0).shape(), g)?]),
            Primitive::CrossEntropy { labels } => {
                Ok(vec![ops::cross_entropy_backward(pv(0), labels, g.item())?])
            }
        }
    }
}

fn eval_primitive(prim: &Primitive, vals: &[&Tensor]) -> Result<(Tensor, Option<(Tensor, Tensor)>)> {
    let arity_err = |want: usize| {
        Err(Error::Invalid(format!("{} expects {} inputs, got {}", prim.name(), want, vals.len())))
    };
    let value = match prim {
        Primitive::Leaf { .. } => return Err(Error::Invalid("leaf cannot be applied".into())),
        Primitive::MatMul { transpose_a, transpose_b } => {
            if vals.len() != 2 {
                return arity_err(2);
            }
            ops::matmul(vals[0], vals[1], *transpose_a, *transpose_b)?
        }
        Primitive::Conv2d { stride, pad } => {
            if vals.len() != 2 {
                return arity_err(2);
            }
            ops::conv2d(vals[0], vals[1], *stride, *pad)?
        }
        Primitive::Add => {
            if vals.len() != 2 {
                return arity_err(2);
            }
            ops::add(vals[0], vals[1])?
        }
        Primitive::Sub => {
            if vals.len() != 2 {
                return arity_err(2);
            }
            ops::sub(vals[0], vals[1])?
        }
        Primitive::Mul => {
            if vals.len() != 2 {
                return arity_err(2);
            }
            ops::mul(vals[0], vals[1])?
        }
        Primitive::Div => {
            if vals.len() != 2 {
                return arity_err(2);
            }
            ops::div(vals[0], vals[1])?
        }
        Primitive::ScalarScale { scale, shift } => {
            if vals.len() != 1 {
                return arity_err(1);
            }
            vals[0].map(|x| scale * x + shift)
        }
        Primitive::Sum { axis } => {
            if vals.len() != 1 {
                return arity_err(1);
            }
            ops::sum_axis(vals[0], *axis)?
        }
        Primitive::Mean { axis } => {
            if vals.len() != 1 {
                return arity_err(1);
            }
            let n = ops::reduced_count(vals[0].shape(), *axis) as f64;
            ops::sum_axis(vals[0], *axis)?.map(|x| x / n)
        }
        Primitive::Square => {
            if vals.len() != 1 {
                return arity_err(1);
            }
            vals[0].map(|x| x * x)
        }
        Primitive::Sqrt => {
            if vals.len() != 1 {
                return arity_err(1);
            }
            vals[0].map(f64::sqrt)
        }
        Primitive::Clip { lo, hi } => {
            if vals.len() != 1 {
                return arity_err(1);
            }
            let (lo, hi) = (*lo, *hi);
            vals[0].map(|x| x.clamp(lo, hi))
        }
        Primitive::ReluClip { threshold, width } => {
            if vals.len() != 1 {
                return arity_err(1);
            }
            let (t, w) = (*threshold, *width);
            vals[0].map(|x| ((x - t) / w + 0.5).clamp(0.0, 1.0))
        }
        Primitive::HeavisideSurrogate { threshold, .. } => {
            if vals.len() != 1 {
                return arity_err(1);
            }
            let t = *threshold;
            vals[0].map(|x| if x >= t { 1.0 } else { 0.0 })
        }
        Primitive::BatchNorm { eps, mode } => {
            if vals.len() != 3 {
                return arity_err(3);
            }
            match mode {
                BnMode::Train => {
                    let fw = ops::batchnorm_train(vals[0], vals[1], vals[2], *eps)?;
                    return Ok((fw.output, Some((fw.mean, fw.var))));
                }
                BnMode::Eval { mean, var } => {
                    ops::batchnorm_eval(vals[0], vals[1], vals[2], mean, var, *eps)?
                }
            }
        }
        Primitive::Reshape { shape } => {
            if vals.len() != 1 {
                return arity_err(1);
            }
            vals[0].reshaped(shape.clone())?
        }
        Primitive::Concat => {
            if vals.is_empty() {
                return Err(Error::Invalid("concat needs at least one input".into()));
            }
            let tail = &vals[0].shape()[1..];
            let mut rows = 0;
            for v in vals {
                if &v.shape()[1..] != tail {
                    return Err(Error::Shape(format!(
                        "concat: trailing dims differ, {:?} vs {:?}",
                        vals[0].shape(),
                        v.shape()
                    )));
                }
                rows += v.shape()[0];
            }
            let mut data = Vec::with_capacity(rows * tail.iter().product::<usize>());
            for v in vals {
                data.extend_from_slice(v.data());
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(tail);
            Tensor::new(shape, data)?
        }
        Primitive::Slice { start, len } => {
            if vals.len() != 1 {
                return arity_err(1);
            }
            let x = vals[0];
            if start + len > x.shape()[0] {
                return Err(Error::Shape(format!(
                    "slice {}..{} out of range for {:?}",
                    start,
                    start + len,
                    x.shape()
                )));
            }
            let inner: usize = x.shape()[1..].iter().product();
            let data = x.data()[start * inner..(start + len) * inner].to_vec();
            let mut shape = vec![*len];
            shape.extend_from_slice(&x.shape()[1..]);
            Tensor::new(shape, data)?
        }
        Primitive::AvgPoolGlobal => {
            if vals.len() != 1 {
                return arity_err(1);
            }
            ops::avgpool_global(vals[0])?
        }
        Primitive::StopGradient => {
            if vals.len() != 1 {
                return arity_err(1);
            }
            vals[0].clone()
        }
        Primitive::CrossEntropy { labels } => {
            if vals.len() != 1 {
                return arity_err(1);
            }
            ops::cross_entropy(vals[0], labels)?
        }
    };
    Ok((value, None))
}

// ------------------------------------------------------------- gradients

/// Named parameter tensors, keyed for deterministic iteration.
pub type ParamMap = BTreeMap<String, Tensor>;

/// Gradient for each named parameter, same keys and shapes as the
/// parameters it was computed against.
#[derive(Clone, Debug)]
pub struct GradientMap {
    grads: BTreeMap<String, Tensor>,
}

impl GradientMap {
    pub fn from_map(grads: BTreeMap<String, Tensor>) -> GradientMap {
        GradientMap { grads }
    }

    pub fn zeros_like(params: &ParamMap) -> GradientMap {
        let grads = params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape()))).collect();
        GradientMap { grads }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn keys(&self) -> impl Iterator<Item = &String> {
        self.grads.keys()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn check_same_keys(&self, other: &GradientMap, what: &str) -> Result<()> {
        if self.grads.len() != other.grads.len()
            || !self.grads.keys().eq(other.grads.keys())
        {
            return Err(Error::Invalid(format!("{what}: gradient keysets differ")));
        }
        Ok(())
    }

    pub fn add(&self, other: &GradientMap) -> Result<GradientMap> {
        self.check_same_keys(other, "gradient add")?;
        let mut grads = BTreeMap::new();
        for (k, a) in &self.grads {
            grads.insert(k.clone(), ops::add(a, &other.grads[k])?);
        }
        Ok(GradientMap { grads })
    }

    pub fn scale(&self, s: f64) -> GradientMap {
        let grads = self.grads.iter().map(|(k, v)| (k.clone(), v.map(|x| x * s))).collect();
        GradientMap { grads }
    }

    /// All gradient entries in key order as one flat vector.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in self.grads.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn inf_norm(&self) -> f64 {
        self.grads.values().map(|t| t.inf_norm()).fold(0.0, f64::max)
    }

    pub fn l2_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// `max_i |a_i - b_i| / (max_i |b_i| + 1e-12)`.
    pub fn max_rel_diff(&self, reference: &GradientMap) -> Result<f64> {
        self.check_same_keys(reference, "gradient compare")?;
        let mut num = 0.0f64;
        for (k, a) in &self.grads {
            num = num.max(a.max_abs_diff(&reference.grads[k]));
        }
        Ok(num / (reference.inf_norm() + 1e-12))
    }
}

/// Central-difference gradient of a scalar-valued function of parameters.
///
/// This is the independent oracle the recorded backward pass is checked
/// against; it never touches the tape.
pub fn finite_difference_gradient<F>(mut f: F, params: &ParamMap, step: f64) -> Result<GradientMap>
where
    F: FnMut(&ParamMap) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut grads = BTreeMap::new();
    for (name, tensor) in params {
        let mut g = vec![0.0f64; tensor.len()];
        for i in 0..tensor.len() {
            let mut evaluate = |delta: f64| -> Result<f64> {
                let mut data = tensor.data().to_vec();
                data[i] += delta;
                let mut perturbed = params.clone();
                perturbed.insert(name.clone(), Tensor::new(tensor.shape().to_vec(), data)?);
                let y = f(&perturbed)?;
                if !y.is_finite() {
                    return Err(Error::Invalid(format!(
                        "non-finite function value while probing `{name}`[{i}]"
                    )));
                }
                Ok(y)
            };
            g[i] = (evaluate(step)? - evaluate(-step)?) / (2.0 * step);
        }
        grads.insert(name.clone(), Tensor::new(tensor.shape().to_vec(), g)?);
    }
    Ok(GradientMap { grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn f64_tape() -> Tape {
        Tape::new(Precision::F64)
    }

    #[test]
    fn sum_backward_is_ones() {
        let mut tape = f64_tape();
        let x = tape.parameter("x", Tensor::new(vec![2, 3], vec![1., -2., 3., 0.5, 0., 7.]).unwrap()).unwrap();
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn stop_gradient_blocks_all_flow() {
        let mut tape = f64_tape();
        let x = tape.parameter("x", Tensor::new(vec![3], vec![1., 2., 3.]).unwrap()).unwrap();
        let w = tape.constant(Tensor::new(vec![3], vec![4., 5., 6.]).unwrap());
        let sx = tape.stop_gradient(x).unwrap();
        let prod = tape.mul(sx, w).unwrap();
        let root = tape.sum(prod).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get("x").unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn surrogate_window_membership() {
        // threshold 1, width 1: only h = 1.0 is inside the window
        let mut tape = f64_tape();
        let h = tape.parameter("h", Tensor::new(vec![3], vec![0.2, 1.0, 1.8]).unwrap()).unwrap();
        let c = tape.constant(Tensor::ones(&[3]));
        let s = tape.heaviside_surrogate(h, 1.0, 1.0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.0, 1.0, 1.0]);
        let prod = tape.mul(s, c).unwrap();
        let root = tape.sum(prod).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get("h").unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn surrogate_window_boundaries_inclusive() {
        let mut tape = f64_tape();
        let h = tape
            .parameter("h", Tensor::new(vec![4], vec![0.5, 1.5, 0.4999, 1.5001]).unwrap())
            .unwrap();
        let s = tape.heaviside_surrogate(h, 1.0, 1.0).unwrap();
        let root = tape.sum(s).unwrap();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get("h").unwrap().data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_identity_passthrough() {
        let mut tape = f64_tape();
        let mut rng = Rng::new(3);
        let m = Tensor::random_normal(&[3, 3], 1.0, &mut rng);
        let eye = tape.constant(Tensor::eye(3));
        let mv = tape.constant(m.clone());
        let out = tape.matmul(eye, mv).unwrap();
        assert_eq!(tape.value(out), &m);
    }

    /// Finite differences against the recorded backward for a smooth
    /// two-layer network, away from the clip kinks.
    #[test]
    fn two_layer_network_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let mut params = ParamMap::new();
        params.insert("w1".into(), Tensor::random_normal(&[4, 5], 0.4, &mut rng));
        params.insert("w2".into(), Tensor::random_normal(&[5, 3], 0.4, &mut rng));
        let x = Tensor::random_normal(&[2, 4], 0.5, &mut rng);

        let run = |p: &ParamMap, tape: &mut Tape| -> Result<Var> {
            let w1 = tape.parameter("w1", p["w1"].clone())?;
            let w2 = tape.parameter("w2", p["w2"].clone())?;
            let xv = tape.constant(x.clone());
            let h = tape.matmul(xv, w1)?;
            // wide window keeps every preactivation strictly inside
            let a = tape.relu_clip(h, 0.0, 20.0)?;
            let o = tape.matmul(a, w2)?;
            let sq = tape.square(o)?;
            tape.sum(sq)
        };

        let mut tape = f64_tape();
        let root = run(&params, &mut tape).unwrap();
        let analytic = tape.backward(root).unwrap();

        let numeric = finite_difference_gradient(
            |p| {
                let mut t = f64_tape();
                let root = run(p, &mut t)?;
                Ok(t.value(root).item())
            },
            &params,
            1e-5,
        )
        .unwrap();

        let rel = analytic.max_rel_diff(&numeric).unwrap();
        assert!(rel < 1e-6, "relative error {rel}");
    }

    #[test]
    fn finite_difference_on_quadratic() {
        let mut params = ParamMap::new();
        params.insert("theta".into(), Tensor::new(vec![2], vec![3.0, -2.0]).unwrap());
        let g = finite_difference_gradient(
            |p| Ok(0.5 * p["theta"].data().iter().map(|x| x * x).sum::<f64>()),
            &params,
            1e-5,
        )
        .unwrap();
        let got = g.get("theta").unwrap().data();
        assert!((got[0] - 3.0).abs() < 1e-8);
        assert!((got[1] + 2.0).abs() < 1e-8);
    }

    #[test]
    fn finite_difference_on_constant_is_zero() {
        let mut params = ParamMap::new();
        params.insert("theta".into(), Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap());
        let g = finite_difference_gradient(|_| Ok(4.25), &params, 1e-5).unwrap();
        assert!(g.inf_norm() < 1e-10);
    }

    #[test]
    fn backward_is_linear_in_the_root() {
        let mut rng = Rng::new(21);
        let xval = Tensor::random_normal(&[4], 1.0, &mut rng);
        let yval = Tensor::random_normal(&[4], 1.0, &mut rng);

        let mut tape = f64_tape();
        let x = tape.parameter("x", xval).unwrap();
        let yc = tape.constant(yval);
        let f = {
            let p = tape.mul(x, yc).unwrap();
            tape.sum(p).unwrap()
        };
        let g = {
            let sq = tape.square(x).unwrap();
            tape.sum(sq).unwrap()
        };
        let (a, b) = (2.5, -1.25);
        let af = tape.scale(f, a).unwrap();
        let bg = tape.scale(g, b).unwrap();
        let combo = tape.add(af, bg).unwrap();

        let gf = tape.backward(f).unwrap();
        let gg = tape.backward(g).unwrap();
        let gc = tape.backward(combo).unwrap();
        let expect = gf.scale(a).add(&gg.scale(b)).unwrap();
        assert!(gc.max_rel_diff(&expect).unwrap() < 1e-14);
    }

    #[test]
    fn backward_deterministic_bitwise() {
        let mut rng = Rng::new(33);
        let w = Tensor::random_normal(&[6, 6], 0.7, &mut rng);
        let x = Tensor::random_normal(&[3, 6], 0.7, &mut rng);
        let run = || -> Vec<f64> {
            let mut tape = f64_tape();
            let wv = tape.parameter("w", w.clone()).unwrap();
            let xv = tape.constant(x.clone());
            let h = tape.matmul(xv, wv).unwrap();
            let a = tape.relu_clip(h, 1.0, 2.0).unwrap();
            let s = tape.sum(a).unwrap();
            tape.backward(s).unwrap().flatten()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
    }

    #[test]
    fn precision_modes_round_differently() {
        let v = 0.1f64;
        let run = |prec: Precision| -> f64 {
            let mut tape = Tape::new(prec);
            let x = tape.parameter("x", Tensor::scalar(v)).unwrap();
            let y = tape.square(x).unwrap();
            let z = tape.square(y).unwrap();
            tape.value(z).item()
        };
        let f32_val = run(Precision::F32);
        let f64_val = run(Precision::F64);
        assert_ne!(f32_val, f64_val);
        assert_eq!(f32_val, ((((0.1f64 as f32 as f64).powi(2)) as f32 as f64).powi(2)) as f32 as f64);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut tape = f64_tape();
        let x = tape.parameter("x", Tensor::ones(&[3])).unwrap();
        assert!(matches!(tape.backward(x), Err(Error::Tape(_))));
    }

    #[test]
    fn foreign_var_rejected() {
        let mut t1 = f64_tape();
        let mut t2 = f64_tape();
        let x = t1.constant(Tensor::scalar(1.0));
        assert!(t2.sum(x).is_err());
    }

    #[test]
    fn non_finite_output_reports_node() {
        let mut tape = f64_tape();
        let x = tape.constant(Tensor::scalar(-1.0));
        match tape.sqrt(x) {
            Err(Error::NonFinite { op, .. }) => assert_eq!(op, "sqrt"),
            other => panic!("expected non-finite error, got {other:?}"),
        }
    }

    #[test]
    fn unreached_parameter_gets_zero_gradient() {
        let mut tape = f64_tape();
        let x = tape.parameter("x", Tensor::scalar(2.0)).unwrap();
        let _unused = tape.parameter("unused", Tensor::ones(&[4])).unwrap();
        let y = tape.square(x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get("unused").unwrap().data(), &[0.0; 4]);
        assert_eq!(g.get("x").unwrap().item(), 4.0);
    }

    /// Every differentiable primitive against central differences (f64).
    #[test]
    fn primitive_gradients_match_finite_differences() {
        let mut rng = Rng::new(77);
        type Builder = Box<dyn Fn(&ParamMap, &mut Tape) -> Result<Var>>;

        let x44 = Tensor::random_normal(&[4, 4], 0.8, &mut rng);
        let cases: Vec<(&str, ParamMap, Builder)> = vec![
            (
                "matmul+div+sqrt",
                {
                    let mut p = ParamMap::new();
                    p.insert("a".into(), Tensor::random_normal(&[3, 4], 0.8, &mut rng));
                    p.insert("b".into(), Tensor::random_normal(&[4, 2], 0.8, &mut rng));
                    p
                },
                Box::new(|p, t| {
                    let a = t.parameter("a", p["a"].clone())?;
                    let b = t.parameter("b", p["b"].clone())?;
                    let m = t.matmul(a, b)?;
                    let sq = t.square(m)?;
                    let one = t.constant(Tensor::full(&[3, 2], 2.0));
                    let d = t.div(sq, one)?;
                    let sh = t.affine(d, 1.0, 1.0)?;
                    let r = t.sqrt(sh)?;
                    t.sum(r)
                }),
            ),
            (
                "conv+pool",
                {
                    let mut p = ParamMap::new();
                    p.insert("k".into(), Tensor::random_normal(&[2, 1, 3, 3], 0.5, &mut rng));
                    p.insert("x".into(), Tensor::random_normal(&[1, 1, 6, 6], 0.8, &mut rng));
                    p
                },
                Box::new(|p, t| {
                    let k = t.parameter("k", p["k"].clone())?;
                    let x = t.parameter("x", p["x"].clone())?;
                    let c = t.conv2d(x, k, 2, 1)?;
                    let pooled = t.avgpool_global(c)?;
                    let sq = t.square(pooled)?;
                    t.sum(sq)
                }),
            ),
            (
                "bn-train",
                {
                    let mut p = ParamMap::new();
                    p.insert("x".into(), Tensor::random_normal(&[5, 3], 1.0, &mut rng));
                    p.insert("gamma".into(), Tensor::random_uniform(&[3], 0.5, 1.5, &mut rng));
                    p.insert("beta".into(), Tensor::random_normal(&[3], 0.3, &mut rng));
                    p
                },
                Box::new(|p, t| {
                    let x = t.parameter("x", p["x"].clone())?;
                    let g = t.parameter("gamma", p["gamma"].clone())?;
                    let b = t.parameter("beta", p["beta"].clone())?;
                    let y = t.batchnorm_train(x, g, b, 1e-5)?;
                    let sq = t.square(y)?;
                    let z = t.sum(sq)?;
                    let m = t.mean(y)?;
                    t.add(z, m)
                }),
            ),
            (
                "bn-eval+bias",
                {
                    let mut p = ParamMap::new();
                    p.insert("x".into(), Tensor::random_normal(&[2, 3, 2, 2], 1.0, &mut rng));
                    p.insert("gamma".into(), Tensor::random_uniform(&[3], 0.5, 1.5, &mut rng));
                    p.insert("beta".into(), Tensor::random_normal(&[3], 0.3, &mut rng));
                    p.insert("bias".into(), Tensor::random_normal(&[3], 0.3, &mut rng));
                    p
                },
                Box::new(|p, t| {
                    let x = t.parameter("x", p["x"].clone())?;
                    let g = t.parameter("gamma", p["gamma"].clone())?;
                    let b = t.parameter("beta", p["beta"].clone())?;
                    let bias = t.parameter("bias", p["bias"].clone())?;
                    let xb = t.add(x, bias)?;
                    let y = t.batchnorm_eval(
                        xb,
                        g,
                        b,
                        Tensor::new(vec![3], vec![0.1, -0.2, 0.3]).unwrap(),
                        Tensor::new(vec![3], vec![1.1, 0.9, 1.3]).unwrap(),
                        1e-5,
                    )?;
                    let sq = t.square(y)?;
                    t.sum(sq)
                }),
            ),
            (
                "concat+slice+reshape+axis-ops",
                {
                    let mut p = ParamMap::new();
                    p.insert("x".into(), x44.clone());
                    p
                },
                Box::new(|p, t| {
                    let x = t.parameter("x", p["x"].clone())?;
                    let top = t.slice_rows(x, 0, 2)?;
                    let bottom = t.slice_rows(x, 2, 2)?;
                    let diff = t.sub(top, bottom)?;
                    let clipped = t.clip(diff, -50.0, 50.0)?; // far from both kinks
                    let cat = t.concat(&[clipped, top])?;
                    let col = t.sum_axis(cat, 0)?;
                    let r = t.reshape(col, vec![2, 2])?;
                    let m = t.apply(Primitive::Mean { axis: Some(1) }, &[r])?;
                    let sq = t.square(m)?;
                    t.sum(sq)
                }),
            ),
            (
                "cross-entropy",
                {
                    let mut p = ParamMap::new();
                    p.insert("logits".into(), Tensor::random_normal(&[3, 4], 1.0, &mut rng));
                    p
                },
                Box::new(|p, t| {
                    let l = t.parameter("logits", p["logits"].clone())?;
                    t.cross_entropy(l, vec![0, 2, 3])
                }),
            ),
        ];

        for (name, params, build) in &cases {
            let mut tape = f64_tape();
            let root = build(params, &mut tape).unwrap();
            let analytic = tape.backward(root).unwrap();
            let numeric = finite_difference_gradient(
                |p| {
                    let mut t = f64_tape();
                    let root = build(p, &mut t)?;
                    Ok(t.value(root).item())
                },
                params,
                1e-5,
            )
            .unwrap();
            let rel = analytic.max_rel_diff(&numeric).unwrap();
            assert!(rel < 1e-6, "{name}: relative error {rel}");
        }
    }
}
