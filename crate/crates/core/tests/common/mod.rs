#![allow(dead_code)]

use rand::Rng;
use semifscil::distill::{
    adaptive_weight, estimate_uncertainty, session_loss, session_objective, DistillTargets, LabeledRef, NoiseModel,
    UncertaintyConfig,
};
use semifscil::equilibrium::{Candidate, CandidateLists};
use semifscil::exec::Execution;
use semifscil::exemplar::{Exemplar, ExemplarSet, Provenance};
use semifscil::model::{Activation, BackboneSpec, ModelState};
use semifscil::rng::derive_seed;
use semifscil::rng::SeedTree;
use semifscil::ClassId;

pub fn toy_model(input_dim: usize, hidden: &[usize], feature_dim: usize, classes: &[ClassId], seed: u64) -> ModelState {
    let spec = BackboneSpec::Mlp {
        hidden: hidden.to_vec(),
        feature_dim,
        activation: Activation::Tanh,
    };
    ModelState::new(&spec, input_dim, classes, &mut SeedTree::new(seed).rng("toy", 0)).unwrap()
}

pub fn random_inputs(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SeedTree::new(seed).rng("inputs", 0);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect())
        .collect()
}

/// Memory with `per_class` random exemplars for each class, ids assigned in order.
pub fn random_memory(classes: &[ClassId], per_class: usize, dim: usize, seed: u64) -> ExemplarSet {
    let mut set = ExemplarSet::new(per_class.max(1)).unwrap();
    let mut id = 0;
    for &c in classes {
        let list = random_inputs(per_class, dim, seed.wrapping_add(c as u64))
            .into_iter()
            .map(|input| {
                id += 1;
                Exemplar {
                    sample_id: id,
                    input,
                    class_id: c,
                    provenance: Provenance::Labeled,
                    uncertainty: None,
                }
            })
            .collect();
        set.insert_class(c, list).unwrap();
    }
    set
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Greedy herding recomputed from explicit running means.
pub fn oracle_herding(features: &[Vec<f64>], m: usize) -> Vec<usize> {
    let n = features.len();
    let dim = features[0].len();
    let mu: Vec<f64> = (0..dim)
        .map(|d| features.iter().map(|f| f[d]).sum::<f64>() / n as f64)
        .collect();
    let mut chosen: Vec<usize> = Vec::new();
    for _ in 0..m {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..n).filter(|j| !chosen.contains(j)) {
            let members: Vec<usize> = chosen.iter().copied().chain([j]).collect();
            let mean: Vec<f64> = (0..dim)
                .map(|d| members.iter().map(|&i| features[i][d]).sum::<f64>() / members.len() as f64)
                .collect();
            let dist = sq_dist(&mu, &mean);
            match best {
                Some((_, bd)) if dist >= bd => {}
                _ => best = Some((j, dist)),
            }
        }
        chosen.push(best.unwrap().0);
    }
    chosen
}

/// Exhaustive nearest prototype; ties go to the smallest class id.
pub fn oracle_nme(features: &[Vec<f64>], prototypes: &std::collections::BTreeMap<ClassId, Vec<f64>>) -> Vec<ClassId> {
    features
        .iter()
        .map(|f| {
            let mut all: Vec<(f64, ClassId)> = prototypes.iter().map(|(&c, p)| (sq_dist(f, p), c)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            all[0].1
        })
        .collect()
}

/// Filter-and-sort over the pool: restricted softmax, first arg-max,
/// strict threshold, descending confidence with pool order among equals.
pub fn oracle_partition(
    pool: &[Vec<f64>],
    model: &ModelState,
    gamma: f64,
    session_classes: &[ClassId],
) -> std::collections::BTreeMap<ClassId, Vec<(usize, f64)>> {
    let mut out: std::collections::BTreeMap<ClassId, Vec<(usize, f64)>> =
        session_classes.iter().map(|&c| (c, Vec::new())).collect();
    for (pos, x) in pool.iter().enumerate() {
        let z = model.logits(x);
        let rows: Vec<f64> = session_classes
            .iter()
            .map(|c| z[model.classes().iter().position(|k| k == c).unwrap()])
            .collect();
        let p = softmax(&rows);
        let mut best = 0;
        for k in 1..p.len() {
            if p[k] > p[best] {
                best = k;
            }
        }
        if p[best] > gamma {
            out.get_mut(&session_classes[best]).unwrap().push((pos, p[best]));
        }
    }
    for list in out.values_mut() {
        list.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    }
    out
}

pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

pub struct GradientCase {
    pub reference: ModelState,
    pub target: ModelState,
    pub batch: Vec<(Vec<f64>, usize)>,
    pub memory: ExemplarSet,
}

/// Expanded, partly frozen toy model with a labeled batch and a memory.
pub fn gradient_case(seed: u64) -> GradientCase {
    let reference = toy_model(4, &[7, 6], 5, &[0, 1, 2], seed);
    let mut target = reference.clone();
    let tree = SeedTree::new(seed);
    target.expand_head(&[3, 4], &mut tree.rng("expand", 0)).unwrap();
    let mut rng = tree.rng("perturb", 0);
    for loc in target.parameter_locations() {
        target
            .param_mut(loc)
            .iter_mut()
            .for_each(|w| *w += rng.random_range(-0.2..0.2));
    }
    target.freeze_front_layers(1).unwrap();
    let batch = random_inputs(9, 4, seed + 1)
        .into_iter()
        .enumerate()
        .map(|(i, x)| (x, i % 5))
        .collect();
    let memory = random_memory(&[0, 1, 2], 3, 4, seed + 2);
    GradientCase {
        reference,
        target,
        batch,
        memory,
    }
}

/// Checks every unfrozen parameter and returns the worst relative error.
pub fn check_gradients(c: &GradientCase, exec: Execution) -> f64 {
    let refined = c.memory.filtered(|e| e.sample_id % 4 != 0);
    let weight = adaptive_weight(1.0, c.memory.len(), refined.len(), 3, 2).unwrap();
    let batch: Vec<LabeledRef<'_>> = c.batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let targets = DistillTargets::new(&c.reference, &refined, 2.0).unwrap();
    let (_, grads) = session_objective(exec, &c.target, &batch, Some(&targets), weight.zeta, true).unwrap();
    let grads = grads.unwrap();

    let loss = |m: &ModelState| {
        session_loss(m, Some(&c.reference), &batch, &refined, &weight, 2.0)
            .unwrap()
            .total
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for loc in c.target.parameter_locations() {
        let analytic = grads.get(loc);
        if !c.target.is_trainable(loc) {
            assert!(analytic.iter().all(|g| *g == 0.0), "frozen {loc:?} received gradient");
            continue;
        }
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = c.target.clone();
            plus.param_mut(loc)[i] += STEP;
            let mut minus = c.target.clone();
            minus.param_mut(loc)[i] -= STEP;
            let numeric = (loss(&plus) - loss(&minus)) / (2.0 * STEP);
            let err = relative_error(a, numeric);
            assert!(err < REL_TOL, "{loc:?}[{i}]: analytic {a} numeric {numeric} rel {err:e}");
            worst = worst.max(err);
            checked += 1;
        }
    }
    assert!(checked > 50);
    worst
}

/// `(class, list size, selected)` events violating `s_a/n_a >= s_b/n_b` for `n_a <= n_b`.
pub fn monotone_violations(events: &[(usize, usize, usize)]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for &(a, na, sa) in events {
        for &(b, nb, sb) in events {
            if a != b && na > 0 && nb > 0 && na <= nb && sa * nb < sb * na {
                out.push((a, b));
            }
        }
    }
    out
}

pub fn lists_from_sizes(sizes: &[usize]) -> CandidateLists {
    sizes
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let list = (0..n)
                .map(|k| Candidate {
                    id: c * 10_000 + k,
                    input: vec![],
                    confidence: 1.0 - k as f64 * 1e-3,
                })
                .collect();
            (c, list)
        })
        .collect()
}

/// Sort-and-slice reference for memory refinement: ids kept, in memory order.
pub fn oracle_refine(
    memory: &ExemplarSet,
    model: &ModelState,
    cfg: &UncertaintyConfig,
    noise: &NoiseModel,
    seed: u64,
) -> Vec<usize> {
    let mut scored: Vec<(f64, usize, usize)> = memory
        .iter()
        .enumerate()
        .map(|(pos, e)| {
            let l = estimate_uncertainty(
                model,
                &e.input,
                cfg.pass_count,
                noise,
                derive_seed(seed, "tta", e.sample_id as u64),
            )
            .unwrap();
            (l, pos, e.sample_id)
        })
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let keep = (cfg.keep_fraction * memory.len() as f64).ceil() as usize;
    let mut ids: Vec<(usize, usize)> = scored[..keep].iter().map(|&(_, pos, id)| (pos, id)).collect();
    ids.sort();
    ids.into_iter().map(|(_, id)| id).collect()
}
