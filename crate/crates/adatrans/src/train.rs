//! Loss composition, target sampling, Adam, and the editing-network
//! training loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::graph::{Graph, TensorId};
use crate::nn::{BoundParams, ParamSet};
use crate::rng::{Rng, Stream};
use crate::transformer::{Trajectory, TransformerModel};
use crate::world::{Classifier, WorldSpec};

/// Probabilities are clipped to [PROB_CLIP, 1 - PROB_CLIP] before any log.
pub const PROB_CLIP: f64 = 1e-7;

/// Clamp a probability vector to [PROB_CLIP, 1 - PROB_CLIP] inside the
/// graph, expressed with exact relu arithmetic:
/// `clip(x) = lo + relu(x - lo) - relu(x - hi)`.
pub fn clip_probs_graph(g: &mut Graph, probs: TensorId) -> Result<TensorId> {
    let n = g.value(probs).len();
    let lo = g.vector_const(vec![PROB_CLIP; n])?;
    let hi = g.vector_const(vec![1.0 - PROB_CLIP; n])?;
    let above_lo = g.sub(probs, lo)?;
    let r_lo = g.relu(above_lo)?;
    let above_hi = g.sub(probs, hi)?;
    let r_hi = g.relu(above_hi)?;
    let raised = g.add(lo, r_lo)?;
    g.sub(raised, r_hi)
}

/// Binary cross-entropy of a probability vector against 0/1 targets,
/// summed over entries: `-sum_i [a_i log q_i + (1 - a_i) log(1 - q_i)]`,
/// with both logs taken on clipped probabilities.
pub fn binary_cross_entropy_graph(
    g: &mut Graph,
    probs: TensorId,
    target: &[u8],
) -> Result<TensorId> {
    let n = target.len();
    if g.shape(probs) != [n] {
        return Err(Error::ShapeMismatch {
            op: "elementwise-mul",
            detail: format!("probabilities {:?} vs {n} targets", g.shape(probs)),
        });
    }
    debug_assert!(target.iter().all(|&a| a <= 1));
    let ones = g.vector_const(vec![1.0; n])?;
    let qc = clip_probs_graph(g, probs)?;
    let q_neg = g.sub(ones, probs)?;
    let qnc = clip_probs_graph(g, q_neg)?;
    let a = g.vector_const(target.iter().map(|&t| t as f64).collect())?;
    let a_neg = g.vector_const(target.iter().map(|&t| 1.0 - t as f64).collect())?;
    let log_q = g.log(qc)?;
    let log_qn = g.log(qnc)?;
    let pos = g.mul(a, log_q)?;
    let neg = g.mul(a_neg, log_qn)?;
    let total = g.add(pos, neg)?;
    let s = g.sum(total)?;
    let minus_one = g.scalar_const(-1.0);
    g.mul(s, minus_one)
}

/// Hyperparameters of the editing-network training run.
///
/// The reference protocol trains for 10k iterations; the desk-scale default
/// is 2000, which is enough for the synthetic world.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub lambda_dist: f64,
    pub lambda_reg: f64,
    pub lambda_mi: f64,
    /// Trajectory steps M used during training.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_dist: 1.0,
            lambda_reg: 1.0,
            lambda_mi: 1.0,
            steps: 5,
            batch_size: 16,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            iterations: 2000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_dist < 0.0 || self.lambda_reg < 0.0 || self.lambda_mi < 0.0 {
            return Err(Error::InvalidArgument { context: format!("negative loss weight in {self:?}") });
        }
        // lr = 0 is admitted as a no-op diagnostic configuration.
        if self.lr < 0.0 {
            return Err(Error::InvalidArgument { context: format!("lr must be >= 0, got {}", self.lr) });
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArgument { context: format!("{name} must be in [0, 1), got {b}") });
            }
        }
        if self.steps < 1 {
            return Err(Error::InvalidArgument { context: "steps must be >= 1".into() });
        }
        if self.batch_size < 1 || self.iterations < 1 {
            return Err(Error::InvalidArgument {
                context: "batch_size and iterations must be >= 1".into(),
            });
        }
        Ok(())
    }
}

/// First/second moment buffers mirroring a [`ParamSet`], plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

/// Bias-corrected Adam with eps = 1e-8.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64, beta1: f64, beta2: f64) -> Self {
        let m = params.iter().map(|(_, a)| vec![0.0; a.len()]).collect::<Vec<_>>();
        let v = m.clone();
        Self { lr, beta1, beta2, eps: 1e-8, state: AdamState { m, v, step: 0 } }
    }

    /// One update over all parameters. `grads` is aligned with the parameter
    /// order of `params`. Non-finite gradients are rejected before any
    /// buffer is touched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Vec<f64>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::InvalidArgument {
                context: format!("expected {} gradient arrays, got {}", params.len(), grads.len()),
            });
        }
        for (idx, ((name, a), g)) in params.iter().zip(grads).enumerate() {
            if g.len() != a.len() {
                return Err(Error::InvalidArgument {
                    context: format!("gradient for {name} has {} values, expected {}", g.len(), a.len()),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { context: format!("gradient of {name}") });
            }
            debug_assert_eq!(self.state.m[idx].len(), a.len());
        }
        self.state.step += 1;
        let t = self.state.step;
        let bc1 = 1.0 - libm::pow(self.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(self.beta2, t as f64);
        for (idx, (_, array)) in params.iter_mut().enumerate() {
            let m = &mut self.state.m[idx];
            let v = &mut self.state.v[idx];
            for ((p, g), (mi, vi)) in
                array.data.iter_mut().zip(&grads[idx]).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *p -= self.lr * m_hat / (libm::sqrt(v_hat) + self.eps);
            }
        }
        Ok(())
    }
}

/// Draw a target attribute vector: each entry independently uniform over
/// {0, 1}. Entries that equal the original denote "keep", the rest "change".
pub fn sample_targets(a_orig: &[u8], rng: &mut Rng) -> Vec<u8> {
    debug_assert!(a_orig.iter().all(|&a| a <= 1), "attribute entries must be 0/1");
    a_orig.iter().map(|_| rng.coin() as u8).collect()
}

/// The three loss components and their weighted sum, by value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub dist: f64,
    pub reg: f64,
    pub mi: f64,
}

/// The same quantities as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossIds {
    pub total: TensorId,
    pub dist: TensorId,
    pub reg: TensorId,
    pub mi: TensorId,
}

/// Build the full objective on the graph from a rolled-out trajectory.
///
/// * `dist` is the Euclidean distance between endpoint and origin.
/// * `reg` is the mean negative flow log-likelihood over the step latents
///   (all intermediate states, origin excluded).
/// * `mi` is the binary cross-entropy of the classifier posterior at the
///   endpoint observation against the full target vector; kept attributes
///   supervise it too.
/// * `total = lambda_dist * dist + lambda_reg * reg + lambda_mi * mi`.
#[allow(clippy::too_many_arguments)]
pub fn compose_loss_ids(
    g: &mut Graph,
    origin: TensorId,
    step_latents: &[TensorId],
    a_target: &[u8],
    world: &WorldSpec,
    world_bound: &BoundParams,
    q: &Classifier,
    q_bound: &BoundParams,
    flow: &FlowModel,
    flow_bound: &BoundParams,
    cfg: &TrainConfig,
) -> Result<LossIds> {
    if step_latents.len() != cfg.steps {
        return Err(Error::InvalidArgument {
            context: format!(
                "trajectory has {} steps but the config trains with {}",
                step_latents.len(),
                cfg.steps
            ),
        });
    }
    let endpoint = *step_latents.last().expect("steps >= 1 by validation");

    let diff = g.sub(endpoint, origin)?;
    let dist = g.l2_norm(diff)?;

    let mut lp_acc = g.scalar_const(0.0);
    for &latent in step_latents {
        let lp = flow.log_prob_graph(g, flow_bound, latent)?;
        lp_acc = g.add(lp_acc, lp)?;
    }
    let neg_inv_m = g.scalar_const(-1.0 / cfg.steps as f64);
    let reg = g.mul(lp_acc, neg_inv_m)?;

    let obs = world.gen_graph(g, world_bound, endpoint)?;
    let logits = q.logits_graph(g, q_bound, obs)?;
    let probs = g.sigmoid(logits)?;
    let mi = binary_cross_entropy_graph(g, probs, a_target)?;

    let ld = g.scalar_const(cfg.lambda_dist);
    let lr_ = g.scalar_const(cfg.lambda_reg);
    let lm = g.scalar_const(cfg.lambda_mi);
    let wd = g.mul(dist, ld)?;
    let wr = g.mul(reg, lr_)?;
    let wm = g.mul(mi, lm)?;
    let partial = g.add(wd, wr)?;
    let total = g.add(partial, wm)?;
    Ok(LossIds { total, dist, reg, mi })
}

fn extract_terms(g: &Graph, ids: &LossIds) -> Result<LossTerms> {
    let terms = LossTerms {
        total: g.scalar_value(ids.total),
        dist: g.scalar_value(ids.dist),
        reg: g.scalar_value(ids.reg),
        mi: g.scalar_value(ids.mi),
    };
    for (name, v) in
        [("dist", terms.dist), ("reg", terms.reg), ("mi", terms.mi), ("total", terms.total)]
    {
        if !v.is_finite() {
            return Err(Error::NonFinite { context: format!("{name} loss term") });
        }
    }
    Ok(terms)
}

/// Evaluate the objective for an already-recorded trajectory. The frozen
/// models enter the graph as constants; the trajectory states enter as
/// constant leaves, so this is a pure function of its arguments.
pub fn compose_loss(
    trajectory: &Trajectory,
    a_target: &[u8],
    world: &WorldSpec,
    q: &Classifier,
    flow: &FlowModel,
    cfg: &TrainConfig,
) -> Result<LossTerms> {
    cfg.validate()?;
    let mut g = Graph::new();
    let world_bound = world.bind(&mut g);
    let q_bound = q.bind(&mut g, false);
    let flow_bound = flow.bind(&mut g, false);
    let origin = g.vector_const(trajectory.origin.clone())?;
    let step_latents: Vec<TensorId> = trajectory
        .steps
        .iter()
        .map(|s| g.vector_const(s.latent.clone()))
        .collect::<Result<_>>()?;
    let ids = compose_loss_ids(
        &mut g,
        origin,
        &step_latents,
        a_target,
        world,
        &world_bound,
        q,
        &q_bound,
        flow,
        &flow_bound,
        cfg,
    )?;
    extract_terms(&g, &ids)
}

/// One point of the training metrics stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub total: f64,
    pub dist: f64,
    pub reg: f64,
    pub mi: f64,
    /// Oracle editing accuracy on the training batch.
    pub edit_accuracy: f64,
}

/// Train the transformer against a frozen world, classifier, and flow.
///
/// Per iteration: sample a batch of latents, draw random targets, roll out
/// M steps, compose the loss, backpropagate, and take one Adam step on the
/// transformer parameters only. Emits one record per 100 iterations (plus
/// the final one).
pub fn train_adatrans(
    model: &mut TransformerModel,
    world: &WorldSpec,
    q: &Classifier,
    flow: &FlowModel,
    cfg: &TrainConfig,
) -> Result<Vec<TrainRecord>> {
    cfg.validate()?;
    let d = model.cfg.latent_dim;
    if world.cfg.latent_dim != d || flow.cfg.dim != d {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!(
                "latent dims disagree: model {d}, world {}, flow {}",
                world.cfg.latent_dim, flow.cfg.dim
            ),
        });
    }
    if world.cfg.attr_count != model.cfg.attr_count || q.attr_count != model.cfg.attr_count {
        return Err(Error::ShapeMismatch {
            op: "concat",
            detail: format!(
                "attribute counts disagree: model {}, world {}, classifier {}",
                model.cfg.attr_count, world.cfg.attr_count, q.attr_count
            ),
        });
    }
    if q.obs_dim != world.cfg.obs_dim {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            detail: format!("classifier obs dim {} vs world {}", q.obs_dim, world.cfg.obs_dim),
        });
    }

    let mut rng = Rng::from_stream(cfg.seed, Stream::AdatransTrain);
    let mut adam = Adam::new(model.params(), cfg.lr, cfg.beta1, cfg.beta2);
    let mut records = Vec::new();

    for it in 0..cfg.iterations {
        let latents = world.sample_latents(cfg.batch_size, &mut rng)?;
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let world_bound = world.bind(&mut g);
        let q_bound = q.bind(&mut g, false);
        let flow_bound = flow.bind(&mut g, false);

        let mut total_acc = g.scalar_const(0.0);
        let mut sums = LossTerms { total: 0.0, dist: 0.0, reg: 0.0, mi: 0.0 };
        let mut edits_ok = 0usize;
        for w in &latents {
            let a_orig = world.labels(w)?;
            let a_target = sample_targets(&a_orig, &mut rng);
            let wid = g.vector_const(w.clone())?;
            let traj = model.rollout_graph(&mut g, &bound, wid, &a_target, &a_orig, cfg.steps)?;
            let step_latents: Vec<TensorId> = traj.steps.iter().map(|s| s.latent).collect();
            let ids = compose_loss_ids(
                &mut g,
                traj.origin,
                &step_latents,
                &a_target,
                world,
                &world_bound,
                q,
                &q_bound,
                flow,
                &flow_bound,
                cfg,
            )?;
            let terms = extract_terms(&g, &ids)?;
            sums.total += terms.total;
            sums.dist += terms.dist;
            sums.reg += terms.reg;
            sums.mi += terms.mi;
            total_acc = g.add(total_acc, ids.total)?;

            let endpoint_labels = world.labels(g.value(traj.endpoint()))?;
            let ok = a_target
                .iter()
                .zip(&a_orig)
                .zip(&endpoint_labels)
                .filter(|((t, o), _)| t != o)
                .all(|((t, _), e)| t == e);
            if ok {
                edits_ok += 1;
            }
        }
        let inv_b = g.scalar_const(1.0 / cfg.batch_size as f64);
        let objective = g.mul(total_acc, inv_b)?;
        let value = g.scalar_value(objective);
        if !value.is_finite() {
            return Err(Error::NonFinite { context: format!("training objective at iteration {it}") });
        }
        if value > 1e6 {
            return Err(Error::Diverged {
                context: format!("training objective {value:.3e} at iteration {it}"),
            });
        }
        g.backward(objective)?;
        let grads = bound.grads(&g);
        adam.step(model.params_mut(), &grads)?;

        let b = cfg.batch_size as f64;
        if (it + 1) % 100 == 0 || it + 1 == cfg.iterations {
            records.push(TrainRecord {
                iteration: it + 1,
                total: sums.total / b,
                dist: sums.dist / b,
                reg: sums.reg / b,
                mi: sums.mi / b,
                edit_accuracy: edits_ok as f64 / b,
            });
        }
    }
    Ok(records)
}
