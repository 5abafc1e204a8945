//! The adaptive nonlinear transformer: per-step editing direction and size
//! conditioned on attributes, and the multi-step rollout.
//!
//! One step runs `input_proj -> LSTM cell -> AdaIN blocks -> heads`. The
//! direction head is unit-normalized, the step head sigmoid-activated, so
//! every step moves along a unit vector by a size in (0, 1). The condition
//! vector is `concat(a_target, a_orig)`: providing both lets the network see
//! which attributes must change and which must stay.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::nn::{bind, Activation, BoundParams, Linear, Mlp2, ParamSet};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerConfig {
    /// Latent dimension d.
    pub latent_dim: usize,
    /// Attribute count N; the condition vector has 2N entries.
    pub attr_count: usize,
    /// Feature width of the LSTM and the AdaIN blocks.
    pub hidden: usize,
    /// Number of stacked AdaIN blocks.
    pub blocks: usize,
    /// Trajectory length M used during training; also the default at
    /// inference.
    pub steps: usize,
    /// Upper bound on inference steps.
    pub max_steps: usize,
    /// When set, the step size is frozen at this constant and only the
    /// direction is learned (the fixed-step ablation baseline; 0.5 is
    /// sigmoid(0)).
    pub fixed_step: Option<f64>,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            attr_count: 3,
            hidden: 64,
            blocks: 4,
            steps: 5,
            max_steps: 16,
            fixed_step: None,
        }
    }
}

impl TransformerConfig {
    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.attr_count == 0 || self.hidden == 0 || self.blocks == 0 {
            return Err(Error::InvalidArgument {
                context: format!("zero-sized transformer dimensions in {self:?}"),
            });
        }
        if self.steps < 1 || self.steps > self.max_steps {
            return Err(Error::InvalidArgument {
                context: format!("steps {} outside 1..={}", self.steps, self.max_steps),
            });
        }
        if let Some(s) = self.fixed_step {
            if !(s > 0.0 && s < 1.0) {
                return Err(Error::InvalidArgument {
                    context: format!("fixed step must lie in (0, 1), got {s}"),
                });
            }
        }
        Ok(())
    }

    pub fn cond_dim(&self) -> usize {
        2 * self.attr_count
    }
}

/// Feature modulation block: `y_s(cond) * MLP(h) + y_b(cond)`.
#[derive(Clone, Debug)]
pub struct AdaInBlock {
    mlp: Mlp2,
    scale_head: Linear,
    bias_head: Linear,
}

impl AdaInBlock {
    fn init(ps: &mut ParamSet, name: &str, hidden: usize, cond_dim: usize, rng: &mut Rng) -> Self {
        let mlp = Mlp2::init(ps, &format!("{name}.mlp"), hidden, hidden, hidden, Activation::Relu, rng);
        let scale_head = Linear::init(ps, &format!("{name}.scale_head"), cond_dim, hidden, rng);
        let bias_head = Linear::init(ps, &format!("{name}.bias_head"), cond_dim, hidden, rng);
        // Bias the scale head toward 1 so blocks start near identity
        // modulation.
        let b = ps.get_mut(scale_head.b);
        b.data.iter_mut().for_each(|v| *v = 1.0);
        Self { mlp, scale_head, bias_head }
    }

    /// Apply the block; differentiable in the feature, the condition, and
    /// all block parameters.
    pub fn apply(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        h: TensorId,
        cond: TensorId,
    ) -> Result<TensorId> {
        let feat = self.mlp.apply(g, bound, h)?;
        let scale = self.scale_head.apply(g, bound, cond)?;
        let bias = self.bias_head.apply(g, bound, cond)?;
        let modulated = g.mul(scale, feat)?;
        g.add(modulated, bias)
    }

    pub fn scale_head(&self) -> &Linear {
        &self.scale_head
    }

    pub fn bias_head(&self) -> &Linear {
        &self.bias_head
    }
}

/// Single LSTM cell; gates packed as [input, forget, cell, output] in one
/// weight matrix over concat(x, h).
#[derive(Clone, Debug)]
struct LstmCell {
    w: crate::nn::ParamId,
    b: crate::nn::ParamId,
    hidden: usize,
}

impl LstmCell {
    fn init(ps: &mut ParamSet, name: &str, hidden: usize, rng: &mut Rng) -> Self {
        let fan_in = 2 * hidden;
        let scale = 1.0 / libm::sqrt(fan_in as f64);
        let data: Vec<f64> = (0..4 * hidden * fan_in).map(|_| rng.normal() * scale).collect();
        let w = ps.push(
            &format!("{name}.w"),
            crate::nn::Array { shape: vec![4 * hidden, fan_in], data },
        );
        let b = ps.push(&format!("{name}.b"), crate::nn::Array::zeros(vec![4 * hidden]));
        Self { w, b, hidden }
    }

    fn apply(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        x: TensorId,
        state: &LstmState,
    ) -> Result<LstmState> {
        let h = self.hidden;
        let xh = g.concat(x, state.h)?;
        let z0 = g.matmul(bound.id(self.w), xh)?;
        let z = g.add(z0, bound.id(self.b))?;
        let zi = g.slice(z, 0, h)?;
        let zf = g.slice(z, h, 2 * h)?;
        let zg = g.slice(z, 2 * h, 3 * h)?;
        let zo = g.slice(z, 3 * h, 4 * h)?;
        let i = g.sigmoid(zi)?;
        let f = g.sigmoid(zf)?;
        let cell = g.tanh(zg)?;
        let o = g.sigmoid(zo)?;
        let keep = g.mul(f, state.c)?;
        let write = g.mul(i, cell)?;
        let c = g.add(keep, write)?;
        let ct = g.tanh(c)?;
        let h_new = g.mul(o, ct)?;
        Ok(LstmState { h: h_new, c })
    }
}

/// LSTM state as graph nodes; fresh (zero) at the start of every rollout.
#[derive(Clone, Copy, Debug)]
pub struct LstmState {
    pub h: TensorId,
    pub c: TensorId,
}

/// One recorded step of a rollout, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct StepIds {
    pub direction: TensorId,
    pub size: TensorId,
    pub latent: TensorId,
}

/// A rollout inside a live graph.
#[derive(Clone, Debug)]
pub struct TrajectoryIds {
    pub origin: TensorId,
    pub steps: Vec<StepIds>,
}

impl TrajectoryIds {
    pub fn endpoint(&self) -> TensorId {
        self.steps.last().map(|s| s.latent).unwrap_or(self.origin)
    }
}

/// One recorded step of a rollout, by value.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryStep {
    pub direction: Vec<f64>,
    pub size: f64,
    pub latent: Vec<f64>,
}

/// Ordered list of steps realizing the step-wise update rule.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub origin: Vec<f64>,
    pub steps: Vec<TrajectoryStep>,
}

impl Trajectory {
    pub fn endpoint(&self) -> &[f64] {
        self.steps.last().map(|s| s.latent.as_slice()).unwrap_or(&self.origin)
    }
}

/// The adaptive transformer network.
#[derive(Clone, Debug)]
pub struct TransformerModel {
    pub cfg: TransformerConfig,
    params: ParamSet,
    input_proj: Linear,
    lstm: LstmCell,
    blocks: Vec<AdaInBlock>,
    direction_head: Linear,
    step_head: Linear,
}

impl TransformerModel {
    pub fn new(cfg: TransformerConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let input_proj = Linear::init(&mut params, "input_proj", cfg.latent_dim, cfg.hidden, rng);
        let lstm = LstmCell::init(&mut params, "lstm", cfg.hidden, rng);
        let blocks = (0..cfg.blocks)
            .map(|i| AdaInBlock::init(&mut params, &format!("block{i}"), cfg.hidden, cfg.cond_dim(), rng))
            .collect();
        let direction_head = Linear::init(&mut params, "direction_head", cfg.hidden, cfg.latent_dim, rng);
        let step_head = Linear::init(&mut params, "step_head", cfg.hidden, 1, rng);
        Ok(Self { cfg, params, input_proj, lstm, blocks, direction_head, step_head })
    }

    pub fn with_params(cfg: TransformerConfig, saved: &ParamSet) -> Result<Self> {
        let mut model = Self::new(cfg, &mut Rng::new(0, 0))?;
        model.params.load_from(saved)?;
        Ok(model)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn block(&self, idx: usize) -> &AdaInBlock {
        &self.blocks[idx]
    }

    pub fn direction_head(&self) -> &Linear {
        &self.direction_head
    }

    pub fn step_head(&self) -> &Linear {
        &self.step_head
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        bind(g, &self.params, trainable)
    }

    /// Zero LSTM state.
    pub fn fresh_state(&self, g: &mut Graph) -> Result<LstmState> {
        let h = g.constant(vec![self.cfg.hidden], vec![0.0; self.cfg.hidden])?;
        let c = g.constant(vec![self.cfg.hidden], vec![0.0; self.cfg.hidden])?;
        Ok(LstmState { h, c })
    }

    /// Build the condition constant `concat(a_target, a_orig)`.
    pub fn cond_const(&self, g: &mut Graph, a_target: &[u8], a_orig: &[u8]) -> Result<TensorId> {
        let n = self.cfg.attr_count;
        if a_target.len() != n || a_orig.len() != n {
            return Err(Error::ShapeMismatch {
                op: "concat",
                detail: format!(
                    "attribute vectors must have {n} entries, got {} and {}",
                    a_target.len(),
                    a_orig.len()
                ),
            });
        }
        for &a in a_target.iter().chain(a_orig) {
            if a > 1 {
                return Err(Error::InvalidArgument {
                    context: format!("attribute entries must be 0/1, got {a}"),
                });
            }
        }
        let mut cond: Vec<f64> = Vec::with_capacity(2 * n);
        cond.extend(a_target.iter().map(|&a| a as f64));
        cond.extend(a_orig.iter().map(|&a| a as f64));
        g.vector_const(cond)
    }

    /// One transformer step: returns (direction, size, new state).
    pub fn step(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        state: &LstmState,
        w_t: TensorId,
        cond: TensorId,
    ) -> Result<(TensorId, TensorId, LstmState)> {
        if g.shape(w_t) != [self.cfg.latent_dim] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!(
                    "latent must have shape [{}], got {:?}",
                    self.cfg.latent_dim,
                    g.shape(w_t)
                ),
            });
        }
        let x = self.input_proj.apply(g, bound, w_t)?;
        let state = self.lstm.apply(g, bound, x, state)?;
        let mut feat = state.h;
        for block in &self.blocks {
            feat = block.apply(g, bound, feat, cond)?;
        }
        let raw_dir = self.direction_head.apply(g, bound, feat)?;
        let n = g.unit_normalize(raw_dir)?;
        let s = match self.cfg.fixed_step {
            Some(fixed) => g.scalar_const(fixed),
            None => {
                let raw_s = self.step_head.apply(g, bound, feat)?;
                g.sigmoid(raw_s)?
            }
        };
        Ok((n, s, state))
    }

    /// Unrolled multi-step edit inside a live graph. The LSTM state starts
    /// at zero and is carried across the steps of this rollout only.
    pub fn rollout_graph(
        &self,
        g: &mut Graph,
        bound: &BoundParams,
        w: TensorId,
        a_target: &[u8],
        a_orig: &[u8],
        steps: usize,
    ) -> Result<TrajectoryIds> {
        if steps < 1 || steps > self.cfg.max_steps {
            return Err(Error::InvalidArgument {
                context: format!("steps {steps} outside 1..={}", self.cfg.max_steps),
            });
        }
        let cond = self.cond_const(g, a_target, a_orig)?;
        let mut state = self.fresh_state(g)?;
        let mut cur = w;
        let mut recorded = Vec::with_capacity(steps);
        for _ in 0..steps {
            let (n, s, new_state) = self.step(g, bound, &state, cur, cond)?;
            state = new_state;
            let s_vec = g.broadcast_scalar(s, self.cfg.latent_dim)?;
            let delta = g.mul(s_vec, n)?;
            cur = g.add(cur, delta)?;
            recorded.push(StepIds { direction: n, size: s, latent: cur });
        }
        Ok(TrajectoryIds { origin: w, steps: recorded })
    }

    /// Multi-step edit by value: builds an internal graph with frozen
    /// parameters and extracts the recorded steps. Exactly the code path
    /// used during training.
    pub fn rollout(
        &self,
        w: &[f64],
        a_target: &[u8],
        a_orig: &[u8],
        steps: usize,
    ) -> Result<Trajectory> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let wid = g.constant(vec![self.cfg.latent_dim], w.to_vec()).map_err(|_| {
            Error::ShapeMismatch {
                op: "leaf",
                detail: format!("latent must have {} entries, got {}", self.cfg.latent_dim, w.len()),
            }
        })?;
        let traj = self.rollout_graph(&mut g, &bound, wid, a_target, a_orig, steps)?;
        Ok(Trajectory {
            origin: w.to_vec(),
            steps: traj
                .steps
                .iter()
                .map(|s| TrajectoryStep {
                    direction: g.value(s.direction).to_vec(),
                    size: g.scalar_value(s.size),
                    latent: g.value(s.latent).to_vec(),
                })
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> TransformerConfig {
        TransformerConfig {
            latent_dim: 6,
            attr_count: 2,
            hidden: 8,
            blocks: 2,
            steps: 3,
            max_steps: 8,
            fixed_step: None,
        }
    }

    fn model(seed: u64) -> TransformerModel {
        TransformerModel::new(small_cfg(), &mut Rng::new(seed, 0)).unwrap()
    }

    fn zero_param(m: &mut TransformerModel, id: crate::nn::ParamId) {
        m.params_mut().get_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
    }

    fn set_param(m: &mut TransformerModel, id: crate::nn::ParamId, data: &[f64]) {
        let arr = m.params_mut().get_mut(id);
        assert_eq!(arr.data.len(), data.len());
        arr.data.copy_from_slice(data);
    }

    #[test]
    fn adain_identity_modulation() {
        // scale head fixed to 1, bias head to 0: block output equals MLP(h).
        let mut m = model(1);
        let (sw, sb) = (m.block(0).scale_head().w, m.block(0).scale_head().b);
        let (bw, bb) = (m.block(0).bias_head().w, m.block(0).bias_head().b);
        zero_param(&mut m, sw);
        m.params_mut().get_mut(sb).data.iter_mut().for_each(|v| *v = 1.0);
        zero_param(&mut m, bw);
        zero_param(&mut m, bb);

        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let h = g.vector_const((0..8).map(|i| 0.1 * i as f64 - 0.3).collect()).unwrap();
        let cond = g.vector_const(vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = m.block(0).apply(&mut g, &bound, h, cond).unwrap();

        // Reference: the bare MLP on the same feature.
        let mut g2 = Graph::new();
        let bound2 = m.bind(&mut g2, false);
        let h2 = g2.vector_const((0..8).map(|i| 0.1 * i as f64 - 0.3).collect()).unwrap();
        let mlp_only = {
            // Reuse the block MLP by modulating with exact 1.0/0.0 from the
            // zeroed heads; the values above already are that, so compare to
            // a manual forward through apply with the same graph values.
            let scale = g2.vector_const(vec![1.0; 8]).unwrap();
            let feat = m.block(0).mlp.apply(&mut g2, &bound2, h2).unwrap();
            g2.mul(scale, feat).unwrap()
        };
        assert_eq!(g.value(out), g2.value(mlp_only));
    }

    #[test]
    fn adain_zero_scale_yields_bias_only() {
        let mut m = model(2);
        let (sw, sb) = (m.block(0).scale_head().w, m.block(0).scale_head().b);
        zero_param(&mut m, sw);
        zero_param(&mut m, sb);

        let mut g = Graph::new();
        let bound = m.bind(&mut g, false);
        let cond = g.vector_const(vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let h1 = g.vector_const(vec![0.5; 8]).unwrap();
        let h2 = g.vector_const(vec![-2.0; 8]).unwrap();
        let out1 = m.block(0).apply(&mut g, &bound, h1, cond).unwrap();
        let out2 = m.block(0).apply(&mut g, &bound, h2, cond).unwrap();
        assert_eq!(g.value(out1), g.value(out2));
    }

    #[test]
    fn adain_condition_gradient_passes_check() {
        let m = model(3);
        let mut rng = Rng::new(4, 0);
        let h: Vec<f64> = rng.normal_vec(8);
        let cond = crate::nn::Array::vector(rng.normal_vec(4));
        let err = crate::graph::grad_check(&[cond], 1e-5, |g, ids| {
            let bound = m.bind(g, false);
            let hid = g.vector_const(h.clone())?;
            let out = m.block(0).apply(g, &bound, hid, ids[0])?;
            let w = g.vector_const((0..8).map(|i| 0.2 * i as f64 - 0.7).collect())?;
            let p = g.mul(out, w)?;
            g.sum(p)
        })
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }

    #[test]
    fn step_head_zero_gives_half() {
        let mut m = model(5);
        let (w, b) = (m.step_head().w, m.step_head().b);
        zero_param(&mut m, w);
        zero_param(&mut m, b);
        let traj = m.rollout(&[0.0; 6], &[1, 0], &[0, 0], 1).unwrap();
        assert_eq!(traj.steps[0].size, 0.5);
    }

    #[test]
    fn direction_head_three_four_normalizes() {
        let mut m = model(6);
        let (w, b) = (m.direction_head().w, m.direction_head().b);
        zero_param(&mut m, w);
        set_param(&mut m, b, &[3.0, 4.0, 0.0, 0.0, 0.0, 0.0]);
        let traj = m.rollout(&[0.0; 6], &[1, 0], &[0, 0], 1).unwrap();
        let d = &traj.steps[0].direction;
        assert!((d[0] - 0.6).abs() < 1e-12 && (d[1] - 0.8).abs() < 1e-12);
        assert!(d[2..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn step_is_deterministic_bitwise() {
        let m = model(7);
        let w = [0.3, -0.5, 0.8, 0.0, 1.0, -1.0];
        let run = || m.rollout(&w, &[1, 1], &[0, 1], 3).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a, b);
    }

    #[test]
    fn rollout_rejects_bad_step_counts() {
        let m = model(8);
        assert!(m.rollout(&[0.0; 6], &[1, 0], &[0, 0], 0).is_err());
        assert!(m.rollout(&[0.0; 6], &[1, 0], &[0, 0], 9).is_err());
        assert!(m.rollout(&[0.0; 6], &[1, 0], &[0, 0], 8).is_ok());
    }

    #[test]
    fn rollout_rejects_bad_attributes() {
        let m = model(9);
        assert!(m.rollout(&[0.0; 6], &[2, 0], &[0, 0], 1).is_err());
        assert!(m.rollout(&[0.0; 6], &[1], &[0, 0], 1).is_err());
    }

    #[test]
    fn forced_tiny_steps_keep_endpoint_near_origin() {
        // A large negative step-head bias drives every step size toward 0.
        let mut m = model(10);
        let (w, b) = (m.step_head().w, m.step_head().b);
        zero_param(&mut m, w);
        set_param(&mut m, b, &[-16.0]);
        let origin = [0.4, -0.2, 0.9, 0.0, -0.7, 0.3];
        let traj = m.rollout(&origin, &[1, 1], &[0, 0], 5).unwrap();
        for (a, b) in origin.iter().zip(traj.endpoint()) {
            assert!((a - b).abs() < 1e-3, "drift {}", (a - b).abs());
        }
    }

    #[test]
    fn endpoint_matches_sum_of_steps() {
        let m = model(11);
        let mut rng = Rng::new(12, 0);
        let w = rng.normal_vec(6);
        let traj = m.rollout(&w, &[1, 0], &[0, 1], 5).unwrap();
        let mut expected = w.clone();
        let mut moved = vec![0.0; 6];
        for step in &traj.steps {
            for j in 0..6 {
                moved[j] += step.size * step.direction[j];
            }
        }
        for j in 0..6 {
            expected[j] += moved[j];
        }
        for (a, b) in expected.iter().zip(traj.endpoint()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn rollout_prefix_consistent() {
        let m = model(13);
        let w = [0.1, 0.2, -0.3, 0.4, -0.5, 0.6];
        let long = m.rollout(&w, &[0, 1], &[1, 1], 5).unwrap();
        for j in 1..=5 {
            let short = m.rollout(&w, &[0, 1], &[1, 1], j).unwrap();
            assert_eq!(&long.steps[..j], &short.steps[..]);
        }
    }

    #[test]
    fn fixed_step_mode_pins_sizes() {
        let cfg = TransformerConfig { fixed_step: Some(0.5), ..small_cfg() };
        let m = TransformerModel::new(cfg, &mut Rng::new(14, 0)).unwrap();
        let traj = m.rollout(&[0.0; 6], &[1, 0], &[0, 0], 4).unwrap();
        assert!(traj.steps.iter().all(|s| s.size == 0.5));
    }

    #[test]
    fn endpoint_gradient_reaches_all_parameters() {
        // Gradient of a scalar loss at the endpoint w.r.t. every model
        // parameter, through the full unrolled graph including the LSTM.
        let m = model(15);
        let inputs: Vec<crate::nn::Array> =
            m.params().iter().map(|(_, a)| a.clone()).collect();
        let w = [0.25, -0.4, 0.6, -0.1, 0.0, 0.8];
        let mut rng = Rng::new(16, 0);
        let err = crate::graph::grad_check_sampled(&inputs, 1e-5, 6, &mut rng, |g, ids| {
            // Rebuild the model graph with the perturbed parameter leaves.
            let bound = BoundParams::from_ids(ids.to_vec(), true);
            let wid = g.vector_const(w.to_vec())?;
            let traj = m.rollout_graph(g, &bound, wid, &[1, 0], &[0, 1], 3)?;
            let probe = g.vector_const(vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.2])?;
            let p = g.mul(traj.endpoint(), probe)?;
            g.sum(p)
        })
        .unwrap();
        assert!(err < 1e-4, "err {err}");
    }
}
