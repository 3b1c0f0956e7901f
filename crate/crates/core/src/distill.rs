//! Uncertainty-aware distillation.
//!
//! * uncertainty of an exemplar = mean over classes of the variance of the
//!   predicted probabilities across noise-perturbed forward passes;
//! * refinement keeps the lowest-uncertainty fraction of the memory;
//! * the distillation weight scales with the refinement ratio and with
//!   `sqrt(old classes / new classes)`;
//! * the session objective is `CE + zeta * KD`, where KD is the
//!   cross-entropy between temperature-softened reference and target
//!   distributions over the old classes, averaged over the refined set.

use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::exemplar::{ExemplarSet, Provenance};
use crate::loss::{cross_entropy, soft_cross_entropy, softmax, softmax_t};
use crate::model::{Gradients, ModelState};
use crate::rng::{derive_seed, StreamRng};
use crate::{ClassId, SampleId};

pub const DEFAULT_TEMPERATURE: f64 = 2.0;

/// Gaussian input noise for test-time augmentation. The standard deviation
/// of feature `d` is `scale * per_feature_std[d]` (or `scale` when no
/// per-feature reference is given).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub scale: f64,
    pub per_feature_std: Option<Vec<f64>>,
}

impl NoiseModel {
    pub fn isotropic(scale: f64) -> Self {
        Self {
            scale,
            per_feature_std: None,
        }
    }

    pub fn relative(scale: f64, per_feature_std: Vec<f64>) -> Self {
        Self {
            scale,
            per_feature_std: Some(per_feature_std),
        }
    }

    fn sigma(&self, d: usize) -> f64 {
        match &self.per_feature_std {
            Some(s) => self.scale * s[d],
            None => self.scale,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyConfig {
    #[serde(default = "default_passes")]
    pub pass_count: usize,
    #[serde(default = "default_noise")]
    pub noise_scale: f64,
    #[serde(default = "default_keep")]
    pub keep_fraction: f64,
    /// Keep the *most* uncertain fraction instead of the least.
    #[serde(default)]
    pub keep_most_uncertain: bool,
}

fn default_passes() -> usize {
    10
}
fn default_noise() -> f64 {
    0.1
}
fn default_keep() -> f64 {
    0.75
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            pass_count: default_passes(),
            noise_scale: default_noise(),
            keep_fraction: default_keep(),
            keep_most_uncertain: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyEstimate {
    pub exemplar_ref: SampleId,
    pub lambda: f64,
    pub pass_count: usize,
    pub noise_scale: f64,
}

/// Per-pass probability matrix (`pass x class`) and the resulting lambda.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyTrace {
    pub probs: Vec<Vec<f64>>,
    pub lambda: f64,
}

pub fn estimate_uncertainty(model: &ModelState, input: &[f64], pass_count: usize, noise: &NoiseModel, seed: u64) -> Result<f64> {
    Ok(estimate_uncertainty_traced(model, input, pass_count, noise, seed)?.lambda)
}

pub fn estimate_uncertainty_traced(
    model: &ModelState,
    input: &[f64],
    pass_count: usize,
    noise: &NoiseModel,
    seed: u64,
) -> Result<UncertaintyTrace> {
    if pass_count < 2 {
        return Err(Error::Contract(format!(
            "uncertainty needs at least 2 passes, got {pass_count}"
        )));
    }
    if input.len() != model.input_dim() {
        return Err(Error::Contract(format!(
            "input has dimension {}, model expects {}",
            input.len(),
            model.input_dim()
        )));
    }
    if !(noise.scale >= 0.0 && noise.scale.is_finite()) {
        return Err(Error::Config(format!(
            "noise scale must be finite and nonnegative, got {}",
            noise.scale
        )));
    }
    let mut rng = StreamRng::seed_from_u64(seed);
    let probs: Vec<Vec<f64>> = (0..pass_count)
        .map(|_| {
            let noisy: Vec<f64> = input
                .iter()
                .enumerate()
                .map(|(d, x)| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x + noise.sigma(d) * z
                })
                .collect();
            softmax(&model.logits(&noisy))
        })
        .collect();
    let lambda = mean_class_variance(&probs);
    Ok(UncertaintyTrace { probs, lambda })
}

/// Mean over classes of the population variance across passes. Deviations
/// are taken from the first pass so identical passes give exactly zero.
pub fn mean_class_variance(probs: &[Vec<f64>]) -> f64 {
    let passes = probs.len() as f64;
    let classes = probs[0].len();
    let mut total = 0.0;
    for c in 0..classes {
        let pivot = probs[0][c];
        let (mut s, mut s2) = (0.0, 0.0);
        for row in probs {
            let d = row[c] - pivot;
            s += d;
            s2 += d * d;
        }
        let mean = s / passes;
        total += (s2 / passes - mean * mean).max(0.0);
    }
    total / classes as f64
}

/// One line of the refinement audit file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub session: usize,
    pub sample_id: SampleId,
    pub class_id: ClassId,
    pub provenance: Provenance,
    pub lambda: f64,
    pub kept: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    /// The refined memory, with `uncertainty` filled in.
    pub refined: ExemplarSet,
    pub records: Vec<RefinementRecord>,
}

pub fn refined_size(total: usize, keep_fraction: f64) -> usize {
    ((keep_fraction * total as f64 - 1e-9).ceil().max(0.0) as usize).min(total)
}

pub fn refine_exemplars(
    exemplars: &ExemplarSet,
    model: &ModelState,
    config: &UncertaintyConfig,
    noise: &NoiseModel,
    session: usize,
    seed: u64,
) -> Result<Refinement> {
    refine_exemplars_with(Execution::default(), exemplars, model, config, noise, session, seed)
}

/// Scores every exemplar and keeps the `ceil(keep_fraction * |E|)` with the
/// lowest uncertainty (ties keep memory order). Each exemplar draws its noise
/// from a seed derived from `seed` and its sample id.
pub fn refine_exemplars_with(
    exec: Execution,
    exemplars: &ExemplarSet,
    model: &ModelState,
    config: &UncertaintyConfig,
    noise: &NoiseModel,
    session: usize,
    seed: u64,
) -> Result<Refinement> {
    if !(config.keep_fraction > 0.0 && config.keep_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "keep_fraction must lie in (0, 1], got {}",
            config.keep_fraction
        )));
    }
    let members: Vec<_> = exemplars.iter().collect();
    let lambdas: Vec<f64> = exec.try_map(&members, |e| {
        estimate_uncertainty(
            model,
            &e.input,
            config.pass_count,
            noise,
            derive_seed(seed, "tta", e.sample_id as u64),
        )
    })?;
    let mut order: Vec<usize> = (0..members.len()).collect();
    if config.keep_most_uncertain {
        order.sort_by(|&a, &b| lambdas[b].total_cmp(&lambdas[a]));
    } else {
        order.sort_by(|&a, &b| lambdas[a].total_cmp(&lambdas[b]));
    }
    let keep_n = refined_size(members.len(), config.keep_fraction);
    let mut kept = vec![false; members.len()];
    for &i in &order[..keep_n] {
        kept[i] = true;
    }
    let records = members
        .iter()
        .zip(&lambdas)
        .zip(&kept)
        .map(|((e, &lambda), &kept)| RefinementRecord {
            session,
            sample_id: e.sample_id,
            class_id: e.class_id,
            provenance: e.provenance,
            lambda,
            kept,
        })
        .collect();
    let mut position = 0usize;
    let mut refined = exemplars.filtered(|_| {
        position += 1;
        kept[position - 1]
    });
    let kept_lambdas = lambdas.iter().zip(&kept).filter(|(_, k)| **k).map(|(l, _)| *l);
    for (e, l) in refined.iter_mut().zip(kept_lambdas) {
        e.uncertainty = Some(l);
    }
    Ok(Refinement { refined, records })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdaptiveWeight {
    pub zeta_base: f64,
    pub exemplar_ratio: f64,
    pub class_ratio: f64,
    pub zeta: f64,
}

impl AdaptiveWeight {
    /// A fixed weight with unit ratios.
    pub fn constant(zeta: f64) -> Self {
        Self {
            zeta_base: zeta,
            exemplar_ratio: 1.0,
            class_ratio: 1.0,
            zeta,
        }
    }
}

/// `zeta = zeta_base * |E| / |E_refined| * sqrt(old / new)`.
pub fn adaptive_weight(
    zeta_base: f64,
    e_size: usize,
    e_refined_size: usize,
    old_classes: usize,
    new_classes: usize,
) -> Result<AdaptiveWeight> {
    if e_refined_size == 0 || new_classes == 0 {
        return Err(Error::Domain(format!(
            "adaptive weight needs a nonempty refined set and new classes (|E~| = {e_refined_size}, new = {new_classes})"
        )));
    }
    if e_size == 0 || old_classes == 0 || e_refined_size > e_size {
        return Err(Error::Domain(format!(
            "adaptive weight needs 0 < |E~| <= |E| and old classes (|E| = {e_size}, |E~| = {e_refined_size}, old = {old_classes})"
        )));
    }
    if !(zeta_base > 0.0 && zeta_base.is_finite()) {
        return Err(Error::Domain(format!("zeta_base must be positive, got {zeta_base}")));
    }
    let exemplar_ratio = e_size as f64 / e_refined_size as f64;
    let class_ratio = (old_classes as f64 / new_classes as f64).sqrt();
    Ok(AdaptiveWeight {
        zeta_base,
        exemplar_ratio,
        class_ratio,
        zeta: zeta_base * exemplar_ratio * class_ratio,
    })
}

/// Reference soft targets over the old classes for a fixed exemplar set.
/// The reference model is frozen for the whole session, so these are
/// computed once.
#[derive(Debug, Clone, PartialEq)]
pub struct DistillTargets {
    pub inputs: Vec<Vec<f64>>,
    pub soft: Vec<Vec<f64>>,
    pub old_classes: Vec<ClassId>,
    pub temperature: f64,
}

impl DistillTargets {
    pub fn new(reference: &ModelState, refined: &ExemplarSet, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        let inputs: Vec<Vec<f64>> = refined.iter().map(|e| e.input.clone()).collect();
        let soft = reference
            .logits_batch(Execution::default(), &inputs)?
            .into_iter()
            .map(|z| softmax_t(&z, temperature))
            .collect();
        Ok(Self {
            inputs,
            soft,
            old_classes: reference.classes().to_vec(),
            temperature,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    fn check_target(&self, target: &ModelState) -> Result<()> {
        let n = self.old_classes.len();
        if target.classes().len() < n || target.classes()[..n] != self.old_classes[..] {
            return Err(Error::Contract("target head must extend the reference head".into()));
        }
        Ok(())
    }
}

const CHUNK: usize = 16;

/// Sum of per-item losses and, optionally, the sum of their parameter
/// gradients each scaled by `grad_scale`. Chunking is fixed so the
/// floating-point summation order does not depend on the thread count.
fn summed_loss<T, I, L>(
    exec: Execution,
    model: &ModelState,
    items: &[T],
    input_of: I,
    loss_of: L,
    grad_scale: Option<f64>,
) -> Result<(f64, Option<Gradients>)>
where
    T: Sync,
    I: Fn(&T) -> &[f64] + Sync + Send,
    L: Fn(&T, &[f64]) -> Result<(f64, Vec<f64>)> + Sync + Send,
{
    let chunks: Vec<&[T]> = items.chunks(CHUNK).collect();
    let partials = exec.try_map(&chunks, |chunk| -> Result<(f64, Option<Gradients>)> {
        let mut grads = grad_scale.map(|_| model.zero_grads());
        let mut sum = 0.0;
        for item in *chunk {
            let x = input_of(item);
            let (loss, mut dlogits) = loss_of(item, &model.logits(x))?;
            sum += loss;
            if let (Some(g), Some(s)) = (grads.as_mut(), grad_scale) {
                dlogits.iter_mut().for_each(|d| *d *= s);
                model.accumulate_gradient(x, &dlogits, g);
            }
        }
        Ok((sum, grads))
    })?;
    let mut total = 0.0;
    let mut grads = grad_scale.map(|_| model.zero_grads());
    for (s, g) in partials {
        total += s;
        if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
            acc.add_scaled(&g, 1.0);
        }
    }
    Ok((total, grads))
}

fn distill_term(
    exec: Execution,
    target: &ModelState,
    targets: &DistillTargets,
    grad_scale: Option<f64>,
) -> Result<(f64, Option<Gradients>)> {
    targets.check_target(target)?;
    let n_old = targets.old_classes.len();
    let width = target.classes().len();
    let pairs: Vec<(&[f64], &[f64])> = targets
        .inputs
        .iter()
        .zip(&targets.soft)
        .map(|(x, q)| (x.as_slice(), q.as_slice()))
        .collect();
    let m = pairs.len() as f64;
    let (sum, grads) = summed_loss(
        exec,
        target,
        &pairs,
        |(x, _)| x,
        |(_, q), z| {
            let (loss, g_old) = soft_cross_entropy(&z[..n_old], q, targets.temperature);
            let mut g = g_old;
            g.resize(width, 0.0);
            Ok((loss, g))
        },
        grad_scale.map(|s| s / m),
    )?;
    Ok((sum / m, grads))
}

/// Mean soft cross-entropy over `refined` between softened reference and
/// target predictions on the reference's classes. An empty set yields 0.
pub fn distillation_loss(reference: &ModelState, target: &ModelState, refined: &ExemplarSet, temperature: f64) -> Result<f64> {
    let targets = DistillTargets::new(reference, refined, temperature)?;
    if targets.is_empty() {
        return Ok(0.0);
    }
    Ok(distill_term(Execution::default(), target, &targets, None)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub dl: f64,
    pub zeta: f64,
    pub total: f64,
}

/// A labeled training item: input and (possibly pseudo) class.
pub type LabeledRef<'a> = (&'a [f64], ClassId);

/// `CE(batch) + zeta * KD(refined)`; the distillation term is skipped (0)
/// without a reference or with an empty refined set.
pub fn session_loss(
    model: &ModelState,
    reference: Option<&ModelState>,
    batch_labeled: &[LabeledRef<'_>],
    refined: &ExemplarSet,
    weight: &AdaptiveWeight,
    temperature: f64,
) -> Result<LossBreakdown> {
    let targets = reference.map(|r| DistillTargets::new(r, refined, temperature)).transpose()?;
    Ok(session_objective(
        Execution::default(),
        model,
        batch_labeled,
        targets.as_ref(),
        weight.zeta,
        false,
    )?
    .0)
}

/// Loss breakdown and, when `with_grad`, the gradient of `total` with
/// respect to every trainable parameter.
pub fn session_objective(
    exec: Execution,
    model: &ModelState,
    batch_labeled: &[LabeledRef<'_>],
    targets: Option<&DistillTargets>,
    zeta: f64,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    if !zeta.is_finite() {
        return Err(Error::Domain(format!("distillation weight must be finite, got {zeta}")));
    }
    let b = batch_labeled.len() as f64;
    let (ce, mut grads) = if batch_labeled.is_empty() {
        (0.0, with_grad.then(|| model.zero_grads()))
    } else {
        let (sum, g) = summed_loss(
            exec,
            model,
            batch_labeled,
            |(x, _)| x,
            |&(_, class), z| {
                let k = model
                    .class_index(class)
                    .ok_or_else(|| Error::Contract(format!("label {class} is not in the model head")))?;
                Ok(cross_entropy(z, k))
            },
            with_grad.then_some(1.0 / b),
        )?;
        (sum / b, g)
    };
    let dl = match targets {
        Some(t) if !t.is_empty() => {
            let (dl, g) = distill_term(exec, model, t, with_grad.then_some(zeta))?;
            if let (Some(acc), Some(g)) = (grads.as_mut(), g) {
                acc.add_scaled(&g, 1.0);
            }
            dl
        }
        _ => 0.0,
    };
    Ok((
        LossBreakdown {
            ce,
            dl,
            zeta,
            total: ce + zeta * dl,
        },
        grads,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptive_weight_examples() {
        assert_eq!(adaptive_weight(1.0, 100, 100, 5, 5).unwrap().zeta, 1.0);
        assert!((adaptive_weight(1.0, 80, 60, 60, 5).unwrap().zeta - 4.6188).abs() < 1e-4);
        assert!((adaptive_weight(2.0, 100, 75, 100, 10).unwrap().zeta - 8.4327).abs() < 1e-4);
        assert!(matches!(adaptive_weight(1.0, 10, 0, 5, 5), Err(Error::Domain(_))));
        assert!(matches!(adaptive_weight(1.0, 10, 5, 5, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn refined_size_rounds_up() {
        assert_eq!(refined_size(8, 0.75), 6);
        assert_eq!(refined_size(7, 0.75), 6);
        assert_eq!(refined_size(10, 0.3), 3);
        assert_eq!(refined_size(5, 1.0), 5);
    }

    #[test]
    fn identical_rows_have_zero_variance() {
        let row = vec![0.1, 0.2, 0.7];
        assert_eq!(mean_class_variance(&vec![row; 10]), 0.0);
    }
}
