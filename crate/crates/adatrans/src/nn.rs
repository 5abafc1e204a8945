//! Parameter containers and small network building blocks.
//!
//! Models in this crate keep their weights in a [`ParamSet`] (named, ordered,
//! flat `f64` arrays). Each forward pass binds the set into a fresh [`Graph`]
//! as leaf tensors, either trainable or frozen. The same `matvec` kernel
//! backs both the graph `matmul` primitive and the plain value paths, so the
//! two routes agree bit for bit.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::rng::Rng;

/// Dense row-major array with an explicit shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return Err(Error::InvalidArgument {
                context: format!("array shape {shape:?} does not fit {} values", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: alloc::vec![0.0; n] }
    }

    pub fn scalar(x: f64) -> Self {
        Self { shape: alloc::vec![1], data: alloc::vec![x] }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self { shape: alloc::vec![data.len()], data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// y = A x for a row-major m-by-n matrix. The one matrix kernel in the crate.
pub fn matvec(a: &[f64], x: &[f64], m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(x.len(), n);
    let mut y = Vec::with_capacity(m);
    for row in a.chunks_exact(n) {
        y.push(row.iter().zip(x).map(|(aij, xj)| aij * xj).sum());
    }
    y
}

/// Index of a parameter within its [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter arrays.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Array)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, array: Array) -> ParamId {
        debug_assert!(
            self.entries.iter().all(|(n, _)| n != name),
            "duplicate parameter name {name}"
        );
        self.entries.push((String::from(name), array));
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), a))
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Replace every array with same-named, same-shaped data from `other`.
    /// Used when reconstructing a model from a checkpoint.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::InvalidArgument {
                context: format!(
                    "parameter count mismatch: expected {}, got {}",
                    self.len(),
                    other.len()
                ),
            });
        }
        for (name, array) in &mut self.entries {
            let found = other
                .entries
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::InvalidArgument {
                    context: format!("missing parameter {name}"),
                })?;
            if found.1.shape != array.shape {
                return Err(Error::InvalidArgument {
                    context: format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        found.1.shape, array.shape
                    ),
                });
            }
            array.data = found.1.data.clone();
        }
        Ok(())
    }
}

/// Graph leaves for one bound [`ParamSet`], aligned by parameter index.
#[derive(Clone, Debug)]
pub struct BoundParams {
    ids: Vec<TensorId>,
    pub trainable: bool,
}

impl BoundParams {
    /// Wrap existing leaves (e.g. the probe leaves of a gradient check) as a
    /// parameter binding. The ids must be aligned with the parameter order
    /// of the set they stand in for.
    pub fn from_ids(ids: Vec<TensorId>, trainable: bool) -> Self {
        Self { ids, trainable }
    }

    pub fn id(&self, param: ParamId) -> TensorId {
        self.ids[param.0]
    }

    /// Gradients per parameter, in parameter order.
    pub fn grads(&self, graph: &Graph) -> Vec<Vec<f64>> {
        self.ids.iter().map(|&id| graph.grad(id).to_vec()).collect()
    }
}

/// Insert every parameter of `params` into `graph` as a leaf.
pub fn bind(graph: &mut Graph, params: &ParamSet, trainable: bool) -> BoundParams {
    let ids = params
        .iter()
        .map(|(_, a)| graph.leaf(a.shape.clone(), a.data.clone(), trainable).expect("param arrays are well formed"))
        .collect();
    BoundParams { ids, trainable }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

/// Affine map with weights in a [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Weights ~ N(0, 1/in_dim), zero bias.
    pub fn init(ps: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / libm::sqrt(in_dim as f64);
        let data: Vec<f64> = (0..in_dim * out_dim).map(|_| rng.normal() * scale).collect();
        let w = ps.push(&format!("{name}.w"), Array { shape: alloc::vec![out_dim, in_dim], data });
        let b = ps.push(&format!("{name}.b"), Array::zeros(alloc::vec![out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    /// All-zero weights and bias.
    pub fn init_zero(ps: &mut ParamSet, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let w = ps.push(&format!("{name}.w"), Array::zeros(alloc::vec![out_dim, in_dim]));
        let b = ps.push(&format!("{name}.b"), Array::zeros(alloc::vec![out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    pub fn apply(&self, g: &mut Graph, bound: &BoundParams, x: TensorId) -> Result<TensorId> {
        let wx = g.matmul(bound.id(self.w), x)?;
        g.add(wx, bound.id(self.b))
    }

    pub fn apply_values(&self, ps: &ParamSet, x: &[f64]) -> Vec<f64> {
        let w = ps.get(self.w);
        let b = ps.get(self.b);
        let mut y = matvec(&w.data, x, self.out_dim, self.in_dim);
        for (yi, bi) in y.iter_mut().zip(&b.data) {
            *yi += bi;
        }
        y
    }
}

/// Two-layer perceptron: `out = L2(act(L1(x)))`.
#[derive(Clone, Debug)]
pub struct Mlp2 {
    pub l1: Linear,
    pub l2: Linear,
    pub act: Activation,
}

impl Mlp2 {
    pub fn init(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        act: Activation,
        rng: &mut Rng,
    ) -> Self {
        let l1 = Linear::init(ps, &format!("{name}.l1"), in_dim, hidden, rng);
        let l2 = Linear::init(ps, &format!("{name}.l2"), hidden, out_dim, rng);
        Self { l1, l2, act }
    }

    /// Random first layer, zero second layer; the net starts as the zero map.
    pub fn init_zero_out(
        ps: &mut ParamSet,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        act: Activation,
        rng: &mut Rng,
    ) -> Self {
        let l1 = Linear::init(ps, &format!("{name}.l1"), in_dim, hidden, rng);
        let l2 = Linear::init_zero(ps, &format!("{name}.l2"), hidden, out_dim);
        Self { l1, l2, act }
    }

    pub fn apply(&self, g: &mut Graph, bound: &BoundParams, x: TensorId) -> Result<TensorId> {
        let pre = self.l1.apply(g, bound, x)?;
        let h = match self.act {
            Activation::Tanh => g.tanh(pre)?,
            Activation::Relu => g.relu(pre)?,
        };
        self.l2.apply(g, bound, h)
    }

    pub fn apply_values(&self, ps: &ParamSet, x: &[f64]) -> Vec<f64> {
        let mut h = self.l1.apply_values(ps, x);
        for v in &mut h {
            *v = match self.act {
                Activation::Tanh => libm::tanh(*v),
                Activation::Relu => {
                    if *v > 0.0 {
                        *v
                    } else {
                        0.0
                    }
                }
            };
        }
        self.l2.apply_values(ps, &h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_identity() {
        let eye = alloc::vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(matvec(&eye, &[1.0, 2.0, 3.0], 3, 3), alloc::vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn graph_and_value_paths_agree_bitwise() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(11, 0);
        let mlp = Mlp2::init(&mut ps, "m", 4, 8, 3, Activation::Tanh, &mut rng);
        let x: Vec<f64> = rng.normal_vec(4);

        let by_value = mlp.apply_values(&ps, &x);

        let mut g = Graph::new();
        let bound = bind(&mut g, &ps, false);
        let xid = g.constant(alloc::vec![4], x.clone()).unwrap();
        let out = mlp.apply(&mut g, &bound, xid).unwrap();
        assert_eq!(g.value(out), by_value.as_slice());
    }

    #[test]
    fn load_from_checks_names_and_shapes() {
        let mut ps = ParamSet::new();
        let mut rng = Rng::new(1, 0);
        Linear::init(&mut ps, "lin", 2, 3, &mut rng);
        let mut other = ParamSet::new();
        other.push("lin.w", Array::zeros(alloc::vec![3, 2]));
        other.push("lin.b", Array::zeros(alloc::vec![3]));
        ps.load_from(&other).unwrap();
        assert_eq!(ps.get(ParamId(0)).data, alloc::vec![0.0; 6]);

        let mut bad = ParamSet::new();
        bad.push("lin.w", Array::zeros(alloc::vec![2, 3]));
        bad.push("lin.b", Array::zeros(alloc::vec![3]));
        assert!(ps.load_from(&bad).is_err());
    }
}
