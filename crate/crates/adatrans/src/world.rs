//! Deterministic synthetic world: latent prior, ground-truth attribute
//! oracles, a toy differentiable generator, an identity-embedding analog,
//! and the approximate attribute classifier trained on top of it.
//!
//! Everything is a fixed random two-layer tanh MLP reconstructed bit for bit
//! from the world seed. Attributes are labeled by the sign of their oracle
//! score (strictly positive maps to 1). The first-layer weights of each odd
//! attribute net are averaged with its predecessor's, which entangles the
//! pair the way naturally co-occurring attributes entangle in real data.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, TensorId};
use crate::nn::{bind, Activation, Array, BoundParams, Linear, Mlp2, ParamSet};
use crate::rng::{Rng, Stream};
use crate::train::{binary_cross_entropy_graph, Adam, PROB_CLIP};

/// Number of prior samples used for the label-balance check.
const BALANCE_SAMPLES: usize = 10_000;
/// Re-draw budget per attribute net before construction fails.
const MAX_REDRAWS: u32 = 100;
const BALANCE_LO: f64 = 0.3;
const BALANCE_HI: f64 = 0.7;
/// Mixing coefficient for first-layer weight sharing between paired
/// attribute nets.
const ENTANGLE_MIX: f64 = 0.5;

/// Seed plus structural overrides for the synthetic world.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldConfig {
    pub seed: u64,
    pub latent_dim: usize,
    pub attr_count: usize,
    /// Hidden width of all world MLPs.
    pub hidden: usize,
    pub obs_dim: usize,
    pub id_dim: usize,
    /// Diagnostic override: skip the prior MLP so latents are raw standard
    /// normals.
    pub identity_prior: bool,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_dim: 16,
            attr_count: 3,
            hidden: 32,
            obs_dim: 64,
            id_dim: 8,
            identity_prior: false,
        }
    }
}

impl WorldConfig {
    fn validate(&self) -> Result<()> {
        if self.attr_count == 0 {
            return Err(Error::InvalidArgument { context: "attr_count must be >= 1".into() });
        }
        if self.latent_dim == 0 || self.hidden == 0 || self.obs_dim == 0 || self.id_dim == 0 {
            return Err(Error::InvalidArgument {
                context: format!("zero-sized world dimensions in {self:?}"),
            });
        }
        Ok(())
    }
}

/// Record produced by observing a latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub attrs: Vec<u8>,
    pub obs: Vec<f64>,
    pub id_emb: Vec<f64>,
}

/// Frozen synthetic world.
#[derive(Clone, Debug)]
pub struct WorldSpec {
    pub cfg: WorldConfig,
    params: ParamSet,
    prior_map: Mlp2,
    attr_nets: Vec<Mlp2>,
    gen_net: Mlp2,
    id_net: Mlp2,
    /// How many re-draws each attribute net needed to satisfy the balance
    /// invariant.
    pub attr_redraws: Vec<u32>,
}

fn adopt_mlp2(dst: &mut ParamSet, prefix: &str, src_ps: &ParamSet, src: &Mlp2) -> Mlp2 {
    let mut adopt_linear = |lin: &Linear, name: &str| -> Linear {
        let w = dst.push(&format!("{prefix}.{name}.w"), src_ps.get(lin.w).clone());
        let b = dst.push(&format!("{prefix}.{name}.b"), src_ps.get(lin.b).clone());
        Linear { w, b, in_dim: lin.in_dim, out_dim: lin.out_dim }
    };
    let l1 = adopt_linear(&src.l1, "l1");
    let l2 = adopt_linear(&src.l2, "l2");
    Mlp2 { l1, l2, act: src.act }
}

/// Construct the world deterministically from its config.
pub fn make_world(cfg: WorldConfig) -> Result<WorldSpec> {
    cfg.validate()?;
    let d = cfg.latent_dim;
    let mut params = ParamSet::new();
    let prior_map = Mlp2::init(
        &mut params,
        "prior_map",
        d,
        cfg.hidden,
        d,
        Activation::Tanh,
        &mut Rng::from_stream(cfg.seed, Stream::WorldPrior),
    );
    let gen_net = Mlp2::init(
        &mut params,
        "gen_net",
        d,
        cfg.hidden,
        cfg.obs_dim,
        Activation::Tanh,
        &mut Rng::from_stream(cfg.seed, Stream::WorldGen),
    );
    let id_net = Mlp2::init(
        &mut params,
        "id_net",
        d,
        cfg.hidden,
        cfg.id_dim,
        Activation::Tanh,
        &mut Rng::from_stream(cfg.seed, Stream::WorldId),
    );

    // Fixed balance set, independent of the attribute re-draws.
    let mut balance_rng = Rng::from_stream(cfg.seed, Stream::WorldBalance);
    let balance: Vec<Vec<f64>> = (0..BALANCE_SAMPLES)
        .map(|_| {
            let z = balance_rng.normal_vec(d);
            if cfg.identity_prior {
                z
            } else {
                prior_map.apply_values(&params, &z)
            }
        })
        .collect();

    let mut accepted: Vec<(ParamSet, Mlp2)> = Vec::with_capacity(cfg.attr_count);
    let mut attr_redraws = Vec::with_capacity(cfg.attr_count);
    for i in 0..cfg.attr_count {
        let mut rng = Rng::new(cfg.seed, Stream::WorldAttrBase as u64 + i as u64);
        let mut redraws = 0u32;
        loop {
            let mut scratch = ParamSet::new();
            let cand = Mlp2::init(&mut scratch, "cand", d, cfg.hidden, 1, Activation::Tanh, &mut rng);
            if i % 2 == 1 {
                // Average first-layer weights with the previous attribute
                // net to entangle the pair.
                let (prev_ps, prev) = &accepted[i - 1];
                let prev_w = prev_ps.get(prev.l1.w).data.clone();
                let w = scratch.get_mut(cand.l1.w);
                for (v, p) in w.data.iter_mut().zip(&prev_w) {
                    *v = ENTANGLE_MIX * *v + (1.0 - ENTANGLE_MIX) * p;
                }
            }
            let positives = balance
                .iter()
                .filter(|w| cand.apply_values(&scratch, w)[0] > 0.0)
                .count();
            let rate = positives as f64 / balance.len() as f64;
            if (BALANCE_LO..=BALANCE_HI).contains(&rate) {
                accepted.push((scratch, cand));
                attr_redraws.push(redraws);
                break;
            }
            redraws += 1;
            if redraws > MAX_REDRAWS {
                return Err(Error::InvalidArgument {
                    context: format!(
                        "attribute {i} balance unattainable after {MAX_REDRAWS} re-draws \
                         (rate {rate:.3}); the overrides are degenerate"
                    ),
                });
            }
        }
    }
    let attr_nets = accepted
        .iter()
        .enumerate()
        .map(|(i, (scratch, cand))| adopt_mlp2(&mut params, &format!("attr{i}"), scratch, cand))
        .collect();

    Ok(WorldSpec { cfg, params, prior_map, attr_nets, gen_net, id_net, attr_redraws })
}

impl WorldSpec {
    pub fn new(cfg: WorldConfig) -> Result<Self> {
        make_world(cfg)
    }

    /// Rebuild a world from checkpointed parameters. The balance re-draw
    /// record is reconstructed from the config (construction is a pure
    /// function of it).
    pub fn with_params(cfg: WorldConfig, saved: &ParamSet) -> Result<Self> {
        let mut world = make_world(cfg)?;
        world.params.load_from(saved)?;
        Ok(world)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    /// Overwrite one attribute net (tests craft degenerate oracles).
    pub fn replace_attr_net(&mut self, idx: usize, l1w: Array, l1b: Array, l2w: Array, l2b: Array) -> Result<()> {
        let net = &self.attr_nets[idx];
        let targets = [(net.l1.w, l1w), (net.l1.b, l1b), (net.l2.w, l2w), (net.l2.b, l2b)];
        for (id, src) in targets {
            let dst = self.params.get_mut(id);
            if dst.shape != src.shape {
                return Err(Error::InvalidArgument {
                    context: format!("shape {:?} vs {:?}", src.shape, dst.shape),
                });
            }
            dst.data = src.data;
        }
        Ok(())
    }

    fn check_dim(&self, w: &[f64]) -> Result<()> {
        if w.len() != self.cfg.latent_dim {
            return Err(Error::ShapeMismatch {
                op: "world",
                detail: format!("expected dim {}, got {}", self.cfg.latent_dim, w.len()),
            });
        }
        Ok(())
    }

    fn prior_values(&self, z: &[f64]) -> Vec<f64> {
        if self.cfg.identity_prior {
            z.to_vec()
        } else {
            self.prior_map.apply_values(&self.params, z)
        }
    }

    /// Draw n latent codes from the prior. n must be >= 1.
    pub fn sample_latents(&self, n: usize, rng: &mut Rng) -> Result<Vec<Vec<f64>>> {
        if n == 0 {
            return Err(Error::InvalidArgument { context: "sample_latents needs n >= 1".into() });
        }
        Ok((0..n)
            .map(|_| {
                let z = rng.normal_vec(self.cfg.latent_dim);
                self.prior_values(&z)
            })
            .collect())
    }

    /// Raw oracle score of attribute i at w; the label is `score > 0`.
    pub fn attr_score(&self, i: usize, w: &[f64]) -> Result<f64> {
        self.check_dim(w)?;
        Ok(self.attr_nets[i].apply_values(&self.params, w)[0])
    }

    /// Ground-truth labels only (cheaper than a full observation).
    pub fn labels(&self, w: &[f64]) -> Result<Vec<u8>> {
        self.check_dim(w)?;
        Ok(self
            .attr_nets
            .iter()
            .map(|net| (net.apply_values(&self.params, w)[0] > 0.0) as u8)
            .collect())
    }

    /// Labels, observation G(w), and identity embedding for a latent code.
    pub fn label_and_observe(&self, w: &[f64]) -> Result<Example> {
        self.check_dim(w)?;
        Ok(Example {
            attrs: self.labels(w)?,
            obs: self.gen_net.apply_values(&self.params, w),
            id_emb: self.id_net.apply_values(&self.params, w),
        })
    }

    pub fn id_embedding(&self, w: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(w)?;
        Ok(self.id_net.apply_values(&self.params, w))
    }

    /// World nets are frozen; they always bind as constants.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        bind(g, &self.params, false)
    }

    /// G(w) inside a live graph (the differentiable route used by the
    /// mutual-information loss).
    pub fn gen_graph(&self, g: &mut Graph, bound: &BoundParams, w: TensorId) -> Result<TensorId> {
        self.gen_net.apply(g, bound, w)
    }

    /// Positive label rates on the exact balance set used at construction.
    pub fn attribute_balance_rates(&self) -> Vec<f64> {
        let d = self.cfg.latent_dim;
        let mut rng = Rng::from_stream(self.cfg.seed, Stream::WorldBalance);
        let mut counts = vec![0usize; self.cfg.attr_count];
        for _ in 0..BALANCE_SAMPLES {
            let z = rng.normal_vec(d);
            let w = self.prior_values(&z);
            for (i, net) in self.attr_nets.iter().enumerate() {
                if net.apply_values(&self.params, &w)[0] > 0.0 {
                    counts[i] += 1;
                }
            }
        }
        counts.iter().map(|&c| c as f64 / BALANCE_SAMPLES as f64).collect()
    }
}

/// Approximate attribute classifier Q over observations.
#[derive(Clone, Debug)]
pub struct Classifier {
    params: ParamSet,
    net: Mlp2,
    pub obs_dim: usize,
    pub attr_count: usize,
    pub hidden: usize,
}

impl Classifier {
    pub fn new(obs_dim: usize, attr_count: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if obs_dim == 0 || attr_count == 0 || hidden == 0 {
            return Err(Error::InvalidArgument { context: "zero-sized classifier".into() });
        }
        let mut params = ParamSet::new();
        // Zero output layer: the untrained classifier answers exactly 0.5
        // everywhere instead of leaking a random direction of obs space.
        let net =
            Mlp2::init_zero_out(&mut params, "q", obs_dim, hidden, attr_count, Activation::Relu, rng);
        Ok(Self { params, net, obs_dim, attr_count, hidden })
    }

    pub fn with_params(obs_dim: usize, attr_count: usize, hidden: usize, saved: &ParamSet) -> Result<Self> {
        let mut q = Self::new(obs_dim, attr_count, hidden, &mut Rng::new(0, 0))?;
        q.params.load_from(saved)?;
        Ok(q)
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        bind(g, &self.params, trainable)
    }

    pub fn logits_graph(&self, g: &mut Graph, bound: &BoundParams, obs: TensorId) -> Result<TensorId> {
        self.net.apply(g, bound, obs)
    }

    /// Per-attribute probabilities, clipped into (0, 1) away from the
    /// saturation endpoints.
    pub fn probabilities(&self, obs: &[f64]) -> Result<Vec<f64>> {
        if obs.len() != self.obs_dim {
            return Err(Error::ShapeMismatch {
                op: "classifier",
                detail: format!("expected obs dim {}, got {}", self.obs_dim, obs.len()),
            });
        }
        Ok(self
            .net
            .apply_values(&self.params, obs)
            .into_iter()
            .map(|z| {
                let q = if z >= 0.0 {
                    1.0 / (1.0 + libm::exp(-z))
                } else {
                    let e = libm::exp(z);
                    e / (1.0 + e)
                };
                q.clamp(PROB_CLIP, 1.0 - PROB_CLIP)
            })
            .collect())
    }

    /// Hard predictions at the 0.5 threshold.
    pub fn predictions(&self, obs: &[f64]) -> Result<Vec<u8>> {
        Ok(self.probabilities(obs)?.into_iter().map(|q| (q > 0.5) as u8).collect())
    }
}

/// Settings for classifier pre-training.
#[derive(Clone, Debug)]
pub struct ClassifierTrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub hidden: usize,
    /// Held-out evaluation set size.
    pub holdout: usize,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 32,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            hidden: 32,
            holdout: 2048,
            seed: 0,
        }
    }
}

/// Pre-train Q by binary cross-entropy on `n_labeled_per_attr` fully
/// annotated samples. Returns the frozen classifier and its held-out
/// accuracy per attribute.
pub fn train_classifier(
    world: &WorldSpec,
    n_labeled_per_attr: usize,
    cfg: &ClassifierTrainConfig,
) -> Result<(Classifier, Vec<f64>)> {
    if n_labeled_per_attr == 0 {
        return Err(Error::InvalidArgument { context: "need at least one labeled sample".into() });
    }
    let mut data_rng = Rng::from_stream(cfg.seed, Stream::ClassifierData);
    let latents = world.sample_latents(n_labeled_per_attr, &mut data_rng)?;
    let train_set: Vec<(Vec<f64>, Vec<u8>)> = latents
        .iter()
        .map(|w| {
            let ex = world.label_and_observe(w)?;
            Ok((ex.obs, ex.attrs))
        })
        .collect::<Result<_>>()?;
    // The holdout continues the same stream, so it never overlaps the
    // training draw.
    let holdout_latents = world.sample_latents(cfg.holdout, &mut data_rng)?;

    let mut q = Classifier::new(
        world.cfg.obs_dim,
        world.cfg.attr_count,
        cfg.hidden,
        &mut Rng::from_stream(cfg.seed, Stream::ClassifierInit),
    )?;
    let mut adam = Adam::new(&q.params, cfg.lr, cfg.beta1, cfg.beta2);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let batch = cfg.batch_size.min(train_set.len()).max(1);
    let mut shuffle_rng = Rng::from_stream(cfg.seed, Stream::ClassifierTrain);

    let mut it = 0;
    'training: while it < cfg.iterations {
        shuffle_rng.shuffle(&mut order);
        for chunk in order.chunks_exact(batch) {
            if it == cfg.iterations {
                break 'training;
            }
            let mut g = Graph::new();
            let bound = q.bind(&mut g, true);
            let mut acc = g.scalar_const(0.0);
            for &idx in chunk {
                let (obs, attrs) = &train_set[idx];
                let o = g.vector_const(obs.clone())?;
                let logits = q.logits_graph(&mut g, &bound, o)?;
                let probs = g.sigmoid(logits)?;
                let bce = binary_cross_entropy_graph(&mut g, probs, attrs)?;
                acc = g.add(acc, bce)?;
            }
            let scale = g.scalar_const(1.0 / batch as f64);
            let loss = g.mul(acc, scale)?;
            let value = g.scalar_value(loss);
            if !value.is_finite() {
                return Err(Error::NonFinite { context: format!("classifier loss at iteration {it}") });
            }
            if value > 1e6 {
                return Err(Error::Diverged {
                    context: format!("classifier loss {value:.3e} at iteration {it}"),
                });
            }
            g.backward(loss)?;
            let grads = bound.grads(&g);
            adam.step(&mut q.params, &grads)?;
            it += 1;
        }
    }

    let mut correct = vec![0usize; world.cfg.attr_count];
    for w in &holdout_latents {
        let ex = world.label_and_observe(w)?;
        let pred = q.predictions(&ex.obs)?;
        for i in 0..world.cfg.attr_count {
            if pred[i] == ex.attrs[i] {
                correct[i] += 1;
            }
        }
    }
    let accuracy =
        correct.iter().map(|&c| c as f64 / holdout_latents.len() as f64).collect();
    Ok((q, accuracy))
}
