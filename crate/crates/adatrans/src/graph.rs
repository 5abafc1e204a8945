//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a tape of [`Tensor`] nodes built dynamically per forward
//! pass. Every primitive has an exact analytic backward rule. Nodes are
//! appended in construction order, so parents always precede children and a
//! reverse index walk is a reverse topological order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::nn::{matvec, Array};
use crate::rng::Rng;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

/// Primitive that produced a tensor.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Leaf { trainable: bool },
    MatMul,
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Sum,
    Mean,
    L2Norm,
    UnitNormalize,
    Concat,
    Slice { start: usize, end: usize },
    SquaredL2Distance,
    LogSumExp,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "elementwise-mul",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::L2Norm => "l2-norm",
            Op::UnitNormalize => "unit-normalize",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::SquaredL2Distance => "squared-l2-distance",
            Op::LogSumExp => "log-sum-exp",
        }
    }
}

/// Node of the computation graph.
#[derive(Clone, Debug)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub op: Op,
    pub parents: Vec<TensorId>,
}

/// Guard against division by zero when normalizing; the zero vector maps to
/// itself scaled by 1/EPS_NORM.
pub const EPS_NORM: f64 = 1e-12;

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn l2(xs: &[f64]) -> f64 {
    libm::sqrt(xs.iter().map(|x| x * x).sum())
}

/// Dynamically built computation graph.
#[derive(Default, Debug)]
pub struct Graph {
    nodes: Vec<Tensor>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn op(&self, id: TensorId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn scalar_value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, parents: Vec<TensorId>) -> TensorId {
        let n = value.len();
        self.nodes.push(Tensor { shape, value, grad: vec![0.0; n], op, parents });
        TensorId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, shape: Vec<usize>, value: Vec<f64>, trainable: bool) -> Result<TensorId> {
        let n: usize = shape.iter().product();
        if n != value.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                detail: format!("shape {shape:?} does not fit {} values", value.len()),
            });
        }
        Ok(self.push(shape, value, Op::Leaf { trainable }, vec![]))
    }

    pub fn param(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, value, true)
    }

    pub fn constant(&mut self, shape: Vec<usize>, value: Vec<f64>) -> Result<TensorId> {
        self.leaf(shape, value, false)
    }

    pub fn scalar_const(&mut self, x: f64) -> TensorId {
        self.leaf(vec![1], vec![x], false).expect("scalar leaf")
    }

    pub fn vector_const(&mut self, xs: Vec<f64>) -> Result<TensorId> {
        self.leaf(vec![xs.len()], xs, false)
    }

    pub fn array_const(&mut self, a: &Array) -> Result<TensorId> {
        self.leaf(a.shape.clone(), a.data.clone(), false)
    }

    fn rank1(&self, op: &'static str, id: TensorId) -> Result<usize> {
        let shape = self.shape(id);
        if shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expected a vector, got shape {shape:?}"),
            });
        }
        Ok(shape[0])
    }

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    /// Matrix-vector product: [m, n] x [n] -> [m].
    pub fn matmul(&mut self, a: TensorId, x: TensorId) -> Result<TensorId> {
        let a_shape = self.shape(a);
        if a_shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("lhs must be a matrix, got shape {a_shape:?}"),
            });
        }
        let (m, n) = (a_shape[0], a_shape[1]);
        let xn = self.rank1("matmul", x)?;
        if xn != n {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("lhs [{m}, {n}] incompatible with rhs [{xn}]"),
            });
        }
        let y = matvec(&self.nodes[a.0].value, &self.nodes[x.0].value, m, n);
        Ok(self.push(vec![m], y, Op::MatMul, vec![a, x]))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Add, vec![a, b]))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Sub, vec![a, b]))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("elementwise-mul", a, b)?;
        let v: Vec<f64> = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::Mul, vec![a, b]))
    }

    fn unary(&mut self, op: Op, a: TensorId, f: impl Fn(f64) -> f64) -> TensorId {
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        self.push(self.nodes[a.0].shape.clone(), v, op, vec![a])
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        Ok(self.unary(Op::Sigmoid, a, sigmoid))
    }

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        Ok(self.unary(Op::Tanh, a, libm::tanh))
    }

    pub fn relu(&mut self, a: TensorId) -> Result<TensorId> {
        Ok(self.unary(Op::Relu, a, |x| if x > 0.0 { x } else { 0.0 }))
    }

    pub fn exp(&mut self, a: TensorId) -> Result<TensorId> {
        Ok(self.unary(Op::Exp, a, libm::exp))
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        Ok(self.unary(Op::Log, a, libm::log))
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        Ok(self.push(vec![1], vec![s], Op::Sum, vec![a]))
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.nodes[a.0].value.len();
        let s: f64 = self.nodes[a.0].value.iter().sum();
        Ok(self.push(vec![1], vec![s / n as f64], Op::Mean, vec![a]))
    }

    pub fn l2_norm(&mut self, a: TensorId) -> Result<TensorId> {
        let r = l2(&self.nodes[a.0].value);
        Ok(self.push(vec![1], vec![r], Op::L2Norm, vec![a]))
    }

    /// x / max(||x||_2, EPS_NORM).
    pub fn unit_normalize(&mut self, a: TensorId) -> Result<TensorId> {
        self.rank1("unit-normalize", a)?;
        let r = l2(&self.nodes[a.0].value).max(EPS_NORM);
        let v: Vec<f64> = self.nodes[a.0].value.iter().map(|x| x / r).collect();
        Ok(self.push(self.nodes[a.0].shape.clone(), v, Op::UnitNormalize, vec![a]))
    }

    pub fn concat(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let na = self.rank1("concat", a)?;
        let nb = self.rank1("concat", b)?;
        let mut v = Vec::with_capacity(na + nb);
        v.extend_from_slice(&self.nodes[a.0].value);
        v.extend_from_slice(&self.nodes[b.0].value);
        Ok(self.push(vec![na + nb], v, Op::Concat, vec![a, b]))
    }

    pub fn slice(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let n = self.rank1("slice", a)?;
        if start >= end || end > n {
            return Err(Error::ShapeMismatch {
                op: "slice",
                detail: format!("range {start}..{end} out of bounds for [{n}]"),
            });
        }
        let v = self.nodes[a.0].value[start..end].to_vec();
        Ok(self.push(vec![end - start], v, Op::Slice { start, end }, vec![a]))
    }

    pub fn squared_l2_distance(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("squared-l2-distance", a, b)?;
        let d: f64 = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(self.push(vec![1], vec![d], Op::SquaredL2Distance, vec![a, b]))
    }

    pub fn log_sum_exp(&mut self, a: TensorId) -> Result<TensorId> {
        self.rank1("log-sum-exp", a)?;
        let xs = &self.nodes[a.0].value;
        let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = xs.iter().map(|&x| libm::exp(x - m)).sum();
        Ok(self.push(vec![1], vec![m + libm::log(s)], Op::LogSumExp, vec![a]))
    }

    /// Replicate a scalar to a length-n vector via matmul with a constant
    /// ones column, keeping within the matrix-vector shape rules.
    pub fn broadcast_scalar(&mut self, s: TensorId, n: usize) -> Result<TensorId> {
        let len = self.nodes[s.0].value.len();
        if len != 1 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("broadcast source must be a scalar, got {len} elements"),
            });
        }
        let ones = self.leaf(vec![n, 1], vec![1.0; n], false)?;
        self.matmul(ones, s)
    }

    /// Reverse pass from a scalar output. Visits each node once in reverse
    /// topological order, accumulating adjoints in scratch buffers, then adds
    /// them into the persistent `grad` fields. Calling twice therefore doubles
    /// every gradient. Non-trainable leaves keep their grad at zero: they are
    /// outside the trainable set.
    pub fn backward(&mut self, out: TensorId) -> Result<()> {
        if self.nodes[out.0].value.len() != 1 {
            return Err(Error::NonScalarOutput { len: self.nodes[out.0].value.len() });
        }
        let mut adj: Vec<Vec<f64>> = self.nodes.iter().map(|n| vec![0.0; n.value.len()]).collect();
        adj[out.0][0] = 1.0;

        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf { .. }) {
                continue;
            }
            // Parents were created before node i, so they live strictly below
            // index i and we can split the adjoint buffer.
            let (lo, hi) = adj.split_at_mut(i);
            let g = &hi[0];
            match node.op {
                Op::Leaf { .. } => unreachable!(),
                Op::MatMul => {
                    let (a, x) = (node.parents[0].0, node.parents[1].0);
                    let (m, n) = (self.nodes[a].shape[0], self.nodes[a].shape[1]);
                    let a_val = &self.nodes[a].value;
                    let x_val = &self.nodes[x].value;
                    // adj_A[i][j] += g[i] * x[j]; adj_x[j] += sum_i A[i][j] g[i]
                    {
                        let ga = &mut lo[a];
                        for i in 0..m {
                            let gi = g[i];
                            if gi != 0.0 {
                                for j in 0..n {
                                    ga[i * n + j] += gi * x_val[j];
                                }
                            }
                        }
                    }
                    {
                        let gx = &mut lo[x];
                        for i in 0..m {
                            let gi = g[i];
                            if gi != 0.0 {
                                for j in 0..n {
                                    gx[j] += a_val[i * n + j] * gi;
                                }
                            }
                        }
                    }
                }
                Op::Add => {
                    let (a, b) = (node.parents[0].0, node.parents[1].0);
                    if a == b {
                        for (ga, gi) in lo[a].iter_mut().zip(g) {
                            *ga += 2.0 * gi;
                        }
                    } else {
                        for (ga, gi) in lo[a].iter_mut().zip(g) {
                            *ga += gi;
                        }
                        for (gb, gi) in lo[b].iter_mut().zip(g) {
                            *gb += gi;
                        }
                    }
                }
                Op::Sub => {
                    let (a, b) = (node.parents[0].0, node.parents[1].0);
                    if a == b {
                        // x - x: gradients cancel.
                    } else {
                        for (ga, gi) in lo[a].iter_mut().zip(g) {
                            *ga += gi;
                        }
                        for (gb, gi) in lo[b].iter_mut().zip(g) {
                            *gb -= gi;
                        }
                    }
                }
                Op::Mul => {
                    let (a, b) = (node.parents[0].0, node.parents[1].0);
                    if a == b {
                        let a_val = &self.nodes[a].value;
                        for ((ga, gi), x) in lo[a].iter_mut().zip(g).zip(a_val) {
                            *ga += 2.0 * gi * x;
                        }
                    } else {
                        let a_val = &self.nodes[a].value;
                        let b_val = &self.nodes[b].value;
                        for ((ga, gi), y) in lo[a].iter_mut().zip(g).zip(b_val) {
                            *ga += gi * y;
                        }
                        for ((gb, gi), x) in lo[b].iter_mut().zip(g).zip(a_val) {
                            *gb += gi * x;
                        }
                    }
                }
                Op::Sigmoid => {
                    let a = node.parents[0].0;
                    for ((ga, gi), y) in lo[a].iter_mut().zip(g).zip(&node.value) {
                        *ga += gi * y * (1.0 - y);
                    }
                }
                Op::Tanh => {
                    let a = node.parents[0].0;
                    for ((ga, gi), y) in lo[a].iter_mut().zip(g).zip(&node.value) {
                        *ga += gi * (1.0 - y * y);
                    }
                }
                Op::Relu => {
                    let a = node.parents[0].0;
                    let a_val = &self.nodes[a].value;
                    for ((ga, gi), x) in lo[a].iter_mut().zip(g).zip(a_val) {
                        if *x > 0.0 {
                            *ga += gi;
                        }
                    }
                }
                Op::Exp => {
                    let a = node.parents[0].0;
                    for ((ga, gi), y) in lo[a].iter_mut().zip(g).zip(&node.value) {
                        *ga += gi * y;
                    }
                }
                Op::Log => {
                    let a = node.parents[0].0;
                    let a_val = &self.nodes[a].value;
                    for ((ga, gi), x) in lo[a].iter_mut().zip(g).zip(a_val) {
                        *ga += gi / x;
                    }
                }
                Op::Sum => {
                    let a = node.parents[0].0;
                    let g0 = g[0];
                    for ga in lo[a].iter_mut() {
                        *ga += g0;
                    }
                }
                Op::Mean => {
                    let a = node.parents[0].0;
                    let n = self.nodes[a].value.len() as f64;
                    let g0 = g[0] / n;
                    for ga in lo[a].iter_mut() {
                        *ga += g0;
                    }
                }
                Op::L2Norm => {
                    let a = node.parents[0].0;
                    let r = node.value[0].max(EPS_NORM);
                    let g0 = g[0];
                    let a_val = &self.nodes[a].value;
                    for (ga, x) in lo[a].iter_mut().zip(a_val) {
                        *ga += g0 * x / r;
                    }
                }
                Op::UnitNormalize => {
                    let a = node.parents[0].0;
                    let a_val = &self.nodes[a].value;
                    let r = l2(a_val);
                    if r > EPS_NORM {
                        let y = &node.value;
                        let dot: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum();
                        for ((ga, gi), yi) in lo[a].iter_mut().zip(g).zip(y) {
                            *ga += (gi - yi * dot) / r;
                        }
                    } else {
                        // Below the guard the map is x / EPS_NORM, which is linear.
                        for (ga, gi) in lo[a].iter_mut().zip(g) {
                            *ga += gi / EPS_NORM;
                        }
                    }
                }
                Op::Concat => {
                    let (a, b) = (node.parents[0].0, node.parents[1].0);
                    let na = self.nodes[a].value.len();
                    if a == b {
                        for (ga, gi) in lo[a].iter_mut().zip(&g[..na]) {
                            *ga += gi;
                        }
                        for (ga, gi) in lo[a].iter_mut().zip(&g[na..]) {
                            *ga += gi;
                        }
                    } else {
                        for (ga, gi) in lo[a].iter_mut().zip(&g[..na]) {
                            *ga += gi;
                        }
                        for (gb, gi) in lo[b].iter_mut().zip(&g[na..]) {
                            *gb += gi;
                        }
                    }
                }
                Op::Slice { start, .. } => {
                    let a = node.parents[0].0;
                    for (ga, gi) in lo[a][start..].iter_mut().zip(g) {
                        *ga += gi;
                    }
                }
                Op::SquaredL2Distance => {
                    let (a, b) = (node.parents[0].0, node.parents[1].0);
                    let g0 = g[0];
                    if a == b {
                        // d(x, x) = 0 identically.
                    } else {
                        let diffs: Vec<f64> = self.nodes[a]
                            .value
                            .iter()
                            .zip(&self.nodes[b].value)
                            .map(|(x, y)| x - y)
                            .collect();
                        for (ga, d) in lo[a].iter_mut().zip(&diffs) {
                            *ga += 2.0 * g0 * d;
                        }
                        for (gb, d) in lo[b].iter_mut().zip(&diffs) {
                            *gb -= 2.0 * g0 * d;
                        }
                    }
                }
                Op::LogSumExp => {
                    let a = node.parents[0].0;
                    let y = node.value[0];
                    let g0 = g[0];
                    let a_val = &self.nodes[a].value;
                    for (ga, x) in lo[a].iter_mut().zip(a_val) {
                        *ga += g0 * libm::exp(x - y);
                    }
                }
            }
        }

        for (node, a) in self.nodes.iter_mut().zip(adj) {
            if matches!(node.op, Op::Leaf { trainable: false }) {
                continue;
            }
            for (g, ai) in node.grad.iter_mut().zip(a) {
                *g += ai;
            }
        }
        Ok(())
    }
}

/// Maximum relative error between analytic gradients and central finite
/// differences, over every coordinate of every input.
///
/// `program` must build a scalar from the given leaves. It is re-run for each
/// perturbed point, so it must be a pure function of the leaf values.
pub fn grad_check<F>(inputs: &[Array], epsilon: f64, mut program: F) -> Result<f64>
where
    F: FnMut(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    grad_check_impl(inputs, epsilon, None, &mut program)
}

/// Like [`grad_check`] but probing at most `max_coords` randomly chosen
/// coordinates per input, for programs with large parameter counts.
pub fn grad_check_sampled<F>(
    inputs: &[Array],
    epsilon: f64,
    max_coords: usize,
    rng: &mut Rng,
    mut program: F,
) -> Result<f64>
where
    F: FnMut(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    grad_check_impl(inputs, epsilon, Some((max_coords, rng)), &mut program)
}

fn grad_check_impl<F>(
    inputs: &[Array],
    epsilon: f64,
    sample: Option<(usize, &mut Rng)>,
    program: &mut F,
) -> Result<f64>
where
    F: FnMut(&mut Graph, &[TensorId]) -> Result<TensorId>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-3) {
        return Err(Error::InvalidArgument {
            context: format!("epsilon must be in (0, 1e-3], got {epsilon}"),
        });
    }

    let eval = |points: &[Array], program: &mut F| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<TensorId> = points
            .iter()
            .map(|a| g.param(a.shape.clone(), a.data.clone()))
            .collect::<Result<_>>()?;
        let out = program(&mut g, &ids)?;
        if g.value(out).len() != 1 {
            return Err(Error::NonScalarOutput { len: g.value(out).len() });
        }
        Ok(g.scalar_value(out))
    };

    // Analytic gradients at the base point.
    let mut g = Graph::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|a| g.param(a.shape.clone(), a.data.clone()))
        .collect::<Result<_>>()?;
    let out = program(&mut g, &ids)?;
    if g.value(out).len() != 1 {
        return Err(Error::NonScalarOutput { len: g.value(out).len() });
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| g.grad(id).to_vec()).collect();
    drop(g);

    // Choose which coordinates to probe.
    let mut coords: Vec<(usize, usize)> = Vec::new();
    match sample {
        None => {
            for (k, a) in inputs.iter().enumerate() {
                for j in 0..a.len() {
                    coords.push((k, j));
                }
            }
        }
        Some((max_coords, rng)) => {
            for (k, a) in inputs.iter().enumerate() {
                if a.len() <= max_coords {
                    for j in 0..a.len() {
                        coords.push((k, j));
                    }
                } else {
                    let mut seen = Vec::with_capacity(max_coords);
                    while seen.len() < max_coords {
                        let j = rng.below(a.len());
                        if !seen.contains(&j) {
                            seen.push(j);
                        }
                    }
                    for j in seen {
                        coords.push((k, j));
                    }
                }
            }
        }
    }

    let mut max_rel = 0.0f64;
    let mut points = inputs.to_vec();
    for (k, j) in coords {
        let orig = points[k].data[j];
        points[k].data[j] = orig + epsilon;
        let fp = eval(&points, program)?;
        points[k].data[j] = orig - epsilon;
        let fm = eval(&points, program)?;
        points[k].data[j] = orig;
        let fd = (fp - fm) / (2.0 * epsilon);
        let a = analytic[k][j];
        let rel = libm::fabs(a - fd) / libm::fabs(a).max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vector(g: &mut Graph, xs: &[f64], trainable: bool) -> TensorId {
        g.leaf(vec![xs.len()], xs.to_vec(), trainable).unwrap()
    }

    #[test]
    fn matmul_identity_case() {
        let mut g = Graph::new();
        let eye = g
            .leaf(vec![3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], false)
            .unwrap();
        let v = vector(&mut g, &[1.0, 2.0, 3.0], false);
        let y = g.matmul(eye, v).unwrap();
        assert_eq!(g.value(y), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = vector(&mut g, &[0.0], false);
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.value(y), &[0.5]);
    }

    #[test]
    fn unit_normalize_three_four_five() {
        let mut g = Graph::new();
        let x = vector(&mut g, &[3.0, 4.0], false);
        let y = g.unit_normalize(x).unwrap();
        assert!((g.value(y)[0] - 0.6).abs() < 1e-15);
        assert!((g.value(y)[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn square_gradient() {
        // f(x) = sum(x * x) at [1, 2] has gradient [2, 4].
        let mut g = Graph::new();
        let x = vector(&mut g, &[1.0, 2.0], true);
        let sq = g.mul(x, x).unwrap();
        let out = g.sum(sq).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.grad(x), &[2.0, 4.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = vector(&mut g, &[0.0], true);
        let s = g.sigmoid(x).unwrap();
        let out = g.sum(s).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.grad(x), &[0.25]);
    }

    #[test]
    fn backward_twice_doubles_grads() {
        let mut g = Graph::new();
        let x = vector(&mut g, &[1.5, -0.5], true);
        let t = g.tanh(x).unwrap();
        let out = g.sum(t).unwrap();
        g.backward(out).unwrap();
        let once = g.grad(x).to_vec();
        g.backward(out).unwrap();
        let twice = g.grad(x).to_vec();
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(2.0 * a, *b);
        }
        // And the intermediate node too.
        assert_eq!(g.grad(t), &[2.0, 2.0]);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut g = Graph::new();
        let x = vector(&mut g, &[2.0], true);
        let c = vector(&mut g, &[3.0], false);
        let y = g.mul(x, c).unwrap();
        let out = g.sum(y).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.grad(x), &[3.0]);
        assert_eq!(g.grad(c), &[0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f(x) = sum(x*x + x*x): grad = 4x.
        let mut g = Graph::new();
        let x = vector(&mut g, &[3.0], true);
        let a = g.mul(x, x).unwrap();
        let b = g.mul(x, x).unwrap();
        let s = g.add(a, b).unwrap();
        let out = g.sum(s).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.grad(x), &[12.0]);
    }

    #[test]
    fn non_scalar_backward_rejected() {
        let mut g = Graph::new();
        let x = vector(&mut g, &[1.0, 2.0], true);
        assert!(matches!(g.backward(x), Err(Error::NonScalarOutput { len: 2 })));
    }

    #[test]
    fn shape_errors_name_the_primitive() {
        let mut g = Graph::new();
        let a = g.leaf(vec![2, 3], vec![0.0; 6], false).unwrap();
        let x = vector(&mut g, &[1.0, 2.0], false);
        match g.matmul(a, x) {
            Err(Error::ShapeMismatch { op, detail }) => {
                assert_eq!(op, "matmul");
                assert!(detail.contains("[2, 3]"), "{detail}");
            }
            other => panic!("expected shape mismatch, got {other:?}"),
        }
        let b = vector(&mut g, &[1.0, 2.0, 3.0], false);
        assert!(matches!(g.add(x, b), Err(Error::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn forward_deterministic_bitwise() {
        let run = || {
            let mut g = Graph::new();
            let x = vector(&mut g, &[0.3, -1.7, 2.9], false);
            let e = g.exp(x).unwrap();
            let t = g.tanh(e).unwrap();
            let out = g.log_sum_exp(t).unwrap();
            g.scalar_value(out).to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn slice_and_concat_round_trip_grads() {
        let mut g = Graph::new();
        let x = vector(&mut g, &[1.0, 2.0, 3.0, 4.0], true);
        let a = g.slice(x, 0, 2).unwrap();
        let b = g.slice(x, 2, 4).unwrap();
        let c = g.concat(b, a).unwrap();
        assert_eq!(g.value(c), &[3.0, 4.0, 1.0, 2.0]);
        let s = g.sum(c).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn broadcast_scalar_replicates_and_propagates() {
        let mut g = Graph::new();
        let s = g.leaf(vec![1], vec![2.5], true).unwrap();
        let v = g.broadcast_scalar(s, 4).unwrap();
        assert_eq!(g.value(v), &[2.5; 4]);
        let out = g.sum(v).unwrap();
        g.backward(out).unwrap();
        assert_eq!(g.grad(s), &[4.0]);
    }

    #[test]
    fn grad_check_linear_is_exact() {
        let a = Array::new(vec![4], vec![0.7, -0.2, 1.1, 0.4]).unwrap();
        let err = grad_check(&[a], 1e-4, |g, ids| {
            let w = g.vector_const(vec![2.0, -1.0, 0.5, 3.0])?;
            let p = g.mul(ids[0], w)?;
            g.sum(p)
        })
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }

    #[test]
    fn grad_check_sigmoid_matmul() {
        let x = Array::new(vec![3], vec![0.3, -0.8, 0.5]).unwrap();
        let err = grad_check(&[x], 1e-5, |g, ids| {
            let w = g.leaf(vec![2, 3], vec![0.4, -0.7, 0.2, 1.1, 0.05, -0.3], false)?;
            let y = g.matmul(w, ids[0])?;
            let s = g.sigmoid(y)?;
            g.sum(s)
        })
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn grad_check_unit_normalize_three_four() {
        let x = Array::new(vec![2], vec![3.0, 4.0]).unwrap();
        let err = grad_check(&[x], 1e-5, |g, ids| {
            let u = g.unit_normalize(ids[0])?;
            let w = g.vector_const(vec![1.0, -2.0])?;
            let p = g.mul(u, w)?;
            g.sum(p)
        })
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn grad_check_epsilon_validated() {
        let x = Array::new(vec![1], vec![1.0]).unwrap();
        assert!(grad_check(&[x.clone()], 0.0, |g, ids| g.sum(ids[0])).is_err());
        assert!(grad_check(&[x], 1e-2, |g, ids| g.sum(ids[0])).is_err());
    }

    /// Each primitive, probed at 10 seeded random points: linear ones exact
    /// to 1e-8, the rest within 1e-4 of central differences.
    #[test]
    fn every_primitive_passes_grad_check() {
        let mut rng = Rng::new(42, 0);
        // (name, linear, builder) where builder maps one vector input to a scalar.
        type Builder = fn(&mut Graph, TensorId) -> Result<TensorId>;
        let probe = |g: &mut Graph, y: TensorId, ws: &[f64]| -> Result<TensorId> {
            let w = g.vector_const(ws.to_vec())?;
            let p = g.mul(y, w)?;
            g.sum(p)
        };
        let cases: &[(&str, bool, Builder)] = &[
            ("matmul", true, |g, x| {
                let w = g.leaf(
                    vec![3, 4],
                    vec![0.5, -1.2, 0.3, 0.9, 0.1, 0.7, -0.4, 0.2, -0.6, 1.5, 0.8, -0.9],
                    false,
                )?;
                let y = g.matmul(w, x)?;
                g.sum(y)
            }),
            ("add", true, |g, x| {
                let c = g.vector_const(vec![0.3, -0.4, 0.7, 1.2])?;
                let y = g.add(x, c)?;
                g.sum(y)
            }),
            ("sub", true, |g, x| {
                let c = g.vector_const(vec![0.3, -0.4, 0.7, 1.2])?;
                let y = g.sub(c, x)?;
                g.sum(y)
            }),
            ("elementwise-mul", false, |g, x| {
                let y = g.mul(x, x)?;
                g.sum(y)
            }),
            ("sigmoid", false, |g, x| {
                let y = g.sigmoid(x)?;
                g.sum(y)
            }),
            ("tanh", false, |g, x| {
                let y = g.tanh(x)?;
                g.sum(y)
            }),
            ("relu", false, |g, x| {
                let y = g.relu(x)?;
                g.sum(y)
            }),
            ("exp", false, |g, x| {
                let y = g.exp(x)?;
                g.sum(y)
            }),
            ("log", false, |g, x| {
                // Inputs are shifted positive below.
                let y = g.log(x)?;
                g.sum(y)
            }),
            ("sum", true, |g, x| g.sum(x)),
            ("mean", true, |g, x| g.mean(x)),
            ("l2-norm", false, |g, x| g.l2_norm(x)),
            ("unit-normalize", false, |g, x| {
                let y = g.unit_normalize(x)?;
                let w = g.vector_const(vec![1.0, -0.5, 2.0, 0.25])?;
                let p = g.mul(y, w)?;
                g.sum(p)
            }),
            ("concat", true, |g, x| {
                let c = g.vector_const(vec![1.0, 2.0])?;
                let y = g.concat(x, c)?;
                g.sum(y)
            }),
            ("slice", true, |g, x| {
                let y = g.slice(x, 1, 3)?;
                g.sum(y)
            }),
            ("squared-l2-distance", false, |g, x| {
                let c = g.vector_const(vec![0.1, 0.2, -0.3, 0.4])?;
                g.squared_l2_distance(x, c)
            }),
            ("log-sum-exp", false, |g, x| g.log_sum_exp(x)),
        ];
        let _ = probe; // silences unused warning when the closure list changes
        for (name, linear, builder) in cases {
            for trial in 0..10 {
                // Stay away from relu kinks and log's domain edge.
                let data: Vec<f64> = (0..4)
                    .map(|_| {
                        let mag = 0.2 + rng.uniform() * 1.3;
                        if *name == "log" {
                            mag + 0.1
                        } else if rng.coin() {
                            mag
                        } else {
                            -mag
                        }
                    })
                    .collect();
                let x = Array::new(vec![4], data).unwrap();
                let err = grad_check(&[x], 1e-5, |g, ids| builder(g, ids[0])).unwrap();
                let bound = if *linear { 1e-8 } else { 1e-4 };
                assert!(err < bound, "{name} trial {trial}: err {err} >= {bound}");
            }
        }
    }
}
