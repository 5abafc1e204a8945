//! Evaluation metrics, the linear-interpolation baseline, and the
//! accuracy-versus-preservation sweep machinery.
//!
//! All metrics are computed against the world's ground-truth oracle, so
//! method comparisons carry no evaluator noise. Editing accuracy asks
//! whether every requested attribute change landed; attribute preservation
//! counts the untouched attributes that kept their labels; identity
//! preservation is the cosine similarity of the identity embeddings before
//! and after the edit; mean log-likelihood scores the edited codes under
//! the frozen flow.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::flow::FlowModel;
use crate::nn::ParamSet;
use crate::rng::{Rng, Stream};
use crate::train::{sample_targets, Adam};
use crate::transformer::TransformerModel;
use crate::world::WorldSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Adatrans,
    Linear,
    FixedStep,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::Adatrans => "adatrans",
            Method::Linear => "linear",
            Method::FixedStep => "fixed_step",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "adatrans" => Ok(Method::Adatrans),
            "linear" => Ok(Method::Linear),
            "fixed_step" => Ok(Method::FixedStep),
            other => Err(Error::InvalidArgument { context: format!("unknown method tag {other:?}") }),
        }
    }
}

/// Aggregate metrics of one evaluated edit batch.
#[derive(Clone, Debug, PartialEq)]
pub struct EditReport {
    pub method: Method,
    /// Strength alpha for the linear baseline, inference steps otherwise.
    pub knob: f64,
    pub editing_accuracy: f64,
    pub attribute_preservation: f64,
    pub identity_preservation: f64,
    pub mean_loglik: f64,
    pub n_examples: usize,
}

/// Result of fitting one linear editing direction.
#[derive(Clone, Debug)]
pub struct LinearDirectionFit {
    /// Unit normal of the separating hyperplane.
    pub direction: Vec<f64>,
    pub train_accuracy: f64,
}

const LOGISTIC_ITERATIONS: usize = 800;
const LOGISTIC_LR: f64 = 0.05;

/// Fit a logistic-regression hyperplane separating the two label classes
/// and return its unit normal.
///
/// Inputs are standardized per coordinate before the fit, which makes the
/// recovered direction exactly invariant to a global positive rescaling of
/// the latents.
pub fn fit_linear_direction(latents: &[Vec<f64>], labels: &[u8]) -> Result<LinearDirectionFit> {
    if latents.len() != labels.len() {
        return Err(Error::InvalidArgument {
            context: format!("{} latents vs {} labels", latents.len(), labels.len()),
        });
    }
    if latents.is_empty() {
        return Err(Error::InvalidArgument { context: "empty training set".into() });
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::InvalidArgument {
            context: "both label classes must be present".into(),
        });
    }
    if labels.iter().any(|&y| y > 1) {
        return Err(Error::InvalidArgument { context: "labels must be 0/1".into() });
    }
    let d = latents[0].len();
    if latents.iter().any(|w| w.len() != d) {
        return Err(Error::InvalidArgument { context: "ragged latent list".into() });
    }
    let n = latents.len() as f64;

    let mut mean = vec![0.0; d];
    for w in latents {
        for j in 0..d {
            mean[j] += w[j];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut std = vec![0.0; d];
    for w in latents {
        for j in 0..d {
            let c = w[j] - mean[j];
            std[j] += c * c;
        }
    }
    for s in &mut std {
        *s = libm::sqrt(*s / n).max(1e-12);
    }
    let standardized: Vec<Vec<f64>> = latents
        .iter()
        .map(|w| (0..d).map(|j| (w[j] - mean[j]) / std[j]).collect())
        .collect();

    let mut ps = ParamSet::new();
    let w_id = ps.push("w", crate::nn::Array::zeros(vec![d]));
    let b_id = ps.push("b", crate::nn::Array::zeros(vec![1]));
    let mut adam = Adam::new(&ps, LOGISTIC_LR, 0.9, 0.999);
    for _ in 0..LOGISTIC_ITERATIONS {
        let w = &ps.get(w_id).data;
        let b = ps.get(b_id).data[0];
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, &y) in standardized.iter().zip(labels) {
            let z: f64 = w.iter().zip(x).map(|(wj, xj)| wj * xj).sum::<f64>() + b;
            let p = if z >= 0.0 {
                1.0 / (1.0 + libm::exp(-z))
            } else {
                let e = libm::exp(z);
                e / (1.0 + e)
            };
            let err = p - y as f64;
            for j in 0..d {
                gw[j] += err * x[j];
            }
            gb += err;
        }
        gw.iter_mut().for_each(|g| *g /= n);
        gb /= n;
        adam.step(&mut ps, &[gw, vec![gb]])?;
    }

    let w = &ps.get(w_id).data;
    let b = ps.get(b_id).data[0];
    let mut correct = 0usize;
    for (x, &y) in standardized.iter().zip(labels) {
        let z: f64 = w.iter().zip(x).map(|(wj, xj)| wj * xj).sum::<f64>() + b;
        if (z > 0.0) as u8 == y {
            correct += 1;
        }
    }
    let train_accuracy = correct as f64 / latents.len() as f64;

    // Undo the standardization and normalize.
    let mut direction: Vec<f64> = (0..d).map(|j| w[j] / std[j]).collect();
    let norm = libm::sqrt(direction.iter().map(|x| x * x).sum());
    if norm < 1e-100 {
        return Err(Error::InvalidArgument {
            context: "logistic fit produced a zero direction".into(),
        });
    }
    direction.iter_mut().for_each(|x| *x /= norm);
    Ok(LinearDirectionFit { direction, train_accuracy })
}

/// Linear latent edit: `w + alpha * n`.
pub fn linear_edit(w: &[f64], direction: &[f64], alpha: f64) -> Vec<f64> {
    debug_assert_eq!(w.len(), direction.len());
    debug_assert!(
        (direction.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 2e-6,
        "direction must be a unit vector"
    );
    w.iter().zip(direction).map(|(wi, ni)| wi + alpha * ni).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum()).max(1e-12);
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum()).max(1e-12);
    dot / (na * nb)
}

/// Score a batch of edits against the oracle. Pure function of its inputs.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_edits(
    world: &WorldSpec,
    flow: &FlowModel,
    originals: &[Vec<f64>],
    edited: &[Vec<f64>],
    targets: &[Vec<u8>],
    changed_mask: &[Vec<bool>],
    method: Method,
    knob: f64,
) -> Result<EditReport> {
    let n = originals.len();
    if n == 0 {
        return Err(Error::InvalidArgument { context: "empty evaluation set".into() });
    }
    if edited.len() != n || targets.len() != n || changed_mask.len() != n {
        return Err(Error::InvalidArgument {
            context: format!(
                "length mismatch: {n} originals, {} edited, {} targets, {} masks",
                edited.len(),
                targets.len(),
                changed_mask.len()
            ),
        });
    }
    let mut accurate = 0usize;
    let mut kept_pairs = 0usize;
    let mut total_pairs = 0usize;
    let mut cos_sum = 0.0;
    let mut lp_sum = 0.0;
    for i in 0..n {
        let orig_labels = world.labels(&originals[i])?;
        let edit_labels = world.labels(&edited[i])?;
        let mask = &changed_mask[i];
        if mask.len() != orig_labels.len() || targets[i].len() != orig_labels.len() {
            return Err(Error::InvalidArgument {
                context: format!("example {i}: attribute arity mismatch"),
            });
        }
        let mut all_changed_ok = true;
        for j in 0..mask.len() {
            if mask[j] {
                if edit_labels[j] != targets[i][j] {
                    all_changed_ok = false;
                }
            } else {
                total_pairs += 1;
                if edit_labels[j] == orig_labels[j] {
                    kept_pairs += 1;
                }
            }
        }
        if all_changed_ok {
            accurate += 1;
        }
        cos_sum += cosine(&world.id_embedding(&originals[i])?, &world.id_embedding(&edited[i])?);
        lp_sum += flow.log_prob(&edited[i])?;
    }
    Ok(EditReport {
        method,
        knob,
        editing_accuracy: accurate as f64 / n as f64,
        attribute_preservation: if total_pairs == 0 {
            1.0
        } else {
            kept_pairs as f64 / total_pairs as f64
        },
        identity_preservation: cos_sum / n as f64,
        mean_loglik: lp_sum / n as f64,
        n_examples: n,
    })
}

/// Held-out originals with their oracle labels and sampled edit targets.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub originals: Vec<Vec<f64>>,
    pub orig_labels: Vec<Vec<u8>>,
    pub targets: Vec<Vec<u8>>,
}

impl EvalSet {
    /// Deterministic held-out set: latents and targets come from dedicated
    /// streams of `seed`, disjoint from every training stream.
    pub fn build(world: &WorldSpec, n: usize, seed: u64) -> Result<Self> {
        let mut latent_rng = Rng::from_stream(seed, Stream::EvalSet);
        let mut target_rng = Rng::from_stream(seed, Stream::EvalTargets);
        let originals = world.sample_latents(n, &mut latent_rng)?;
        let orig_labels: Vec<Vec<u8>> =
            originals.iter().map(|w| world.labels(w)).collect::<Result<_>>()?;
        let targets =
            orig_labels.iter().map(|labels| sample_targets(labels, &mut target_rng)).collect();
        Ok(Self { originals, orig_labels, targets })
    }

    pub fn changed_masks(&self) -> Vec<Vec<bool>> {
        self.orig_labels
            .iter()
            .zip(&self.targets)
            .map(|(o, t)| o.iter().zip(t).map(|(a, b)| a != b).collect())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.originals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.originals.is_empty()
    }
}

/// Frozen models a sweep can draw on. Only the methods being swept need to
/// be present.
#[derive(Clone, Copy, Default)]
pub struct SweepModels<'a> {
    pub adatrans: Option<&'a TransformerModel>,
    pub fixed_step: Option<&'a TransformerModel>,
    /// One unit direction per attribute.
    pub linear_directions: Option<&'a [Vec<f64>]>,
}

fn rollout_endpoints(
    model: &TransformerModel,
    eval_set: &EvalSet,
    steps: usize,
) -> Result<Vec<Vec<f64>>> {
    eval_set
        .originals
        .iter()
        .zip(&eval_set.orig_labels)
        .zip(&eval_set.targets)
        .map(|((w, a_orig), a_target)| {
            Ok(model.rollout(w, a_target, a_orig, steps)?.endpoint().to_vec())
        })
        .collect()
}

fn knob_to_steps(knob: f64) -> Result<usize> {
    let steps = libm::round(knob);
    if (knob - steps).abs() > 1e-9 || steps < 1.0 {
        return Err(Error::InvalidArgument {
            context: format!("step knob must be a positive integer, got {knob}"),
        });
    }
    Ok(steps as usize)
}

/// Evaluate one method across a rising sequence of strengths.
///
/// The knob is the inference step count for the trajectory methods and the
/// interpolation strength alpha for the linear baseline.
pub fn sweep_curve(
    method: Method,
    knob_values: &[f64],
    world: &WorldSpec,
    flow: &FlowModel,
    eval_set: &EvalSet,
    models: &SweepModels<'_>,
) -> Result<Vec<EditReport>> {
    if knob_values.is_empty() {
        return Err(Error::InvalidArgument { context: "no knob values".into() });
    }
    if knob_values.windows(2).any(|p| p[1] <= p[0]) {
        return Err(Error::InvalidArgument {
            context: format!("knob values must be strictly increasing: {knob_values:?}"),
        });
    }
    if eval_set.is_empty() {
        return Err(Error::InvalidArgument { context: "empty evaluation set".into() });
    }
    let masks = eval_set.changed_masks();
    let mut reports = Vec::with_capacity(knob_values.len());
    for &knob in knob_values {
        let edited: Vec<Vec<f64>> = match method {
            Method::Adatrans => {
                let model = models.adatrans.ok_or_else(|| Error::InvalidArgument {
                    context: "sweep over adatrans needs a trained transformer".into(),
                })?;
                rollout_endpoints(model, eval_set, knob_to_steps(knob)?)?
            }
            Method::FixedStep => {
                let model = models.fixed_step.ok_or_else(|| Error::InvalidArgument {
                    context: "sweep over fixed_step needs the fixed-step transformer".into(),
                })?;
                rollout_endpoints(model, eval_set, knob_to_steps(knob)?)?
            }
            Method::Linear => {
                let dirs = models.linear_directions.ok_or_else(|| Error::InvalidArgument {
                    context: "sweep over linear needs fitted directions".into(),
                })?;
                if dirs.len() != world.cfg.attr_count {
                    return Err(Error::InvalidArgument {
                        context: format!(
                            "{} directions for {} attributes",
                            dirs.len(),
                            world.cfg.attr_count
                        ),
                    });
                }
                eval_set
                    .originals
                    .iter()
                    .zip(&eval_set.orig_labels)
                    .zip(&eval_set.targets)
                    .map(|((w, a_orig), a_target)| {
                        let mut w_e = w.clone();
                        for j in 0..a_orig.len() {
                            if a_target[j] != a_orig[j] {
                                let sign = if a_target[j] == 1 { 1.0 } else { -1.0 };
                                w_e = linear_edit(&w_e, &dirs[j], sign * knob);
                            }
                        }
                        w_e
                    })
                    .collect()
            }
        };
        reports.push(evaluate_edits(
            world,
            flow,
            &eval_set.originals,
            &edited,
            &eval_set.targets,
            &masks,
            method,
            knob,
        )?);
    }
    Ok(reports)
}

/// The operating point of a sweep at a target editing accuracy: the first
/// report reaching the threshold, or the best-accuracy report when the
/// method never gets there.
#[derive(Clone, Copy, Debug)]
pub struct MatchedPoint<'a> {
    pub report: &'a EditReport,
    pub reached: bool,
}

pub fn at_accuracy(reports: &[EditReport], threshold: f64) -> Option<MatchedPoint<'_>> {
    if let Some(r) = reports.iter().find(|r| r.editing_accuracy >= threshold) {
        return Some(MatchedPoint { report: r, reached: true });
    }
    reports
        .iter()
        .max_by(|a, b| a.editing_accuracy.partial_cmp(&b.editing_accuracy).unwrap())
        .map(|r| MatchedPoint { report: r, reached: false })
}
