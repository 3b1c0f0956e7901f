//! Class-balanced self-training on an unlabeled pool.
//!
//! Each unlabeled iteration re-predicts the remaining pool with the current
//! model (restricted to the session's own classes), keeps items whose
//! confidence exceeds `gamma`, groups them by pseudo class sorted by
//! confidence, and takes a per-class prefix. Prefix sizes follow either an
//! equal quota or an explicit proportion table; in both cases a class with
//! fewer candidates never receives a smaller selected fraction than a class
//! with more candidates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::loss::softmax;
use crate::model::ModelState;
use crate::protocol::{SessionSpec, UnlabeledItem};
use crate::{ClassId, SampleId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabeled {
    pub id: SampleId,
    pub input: Vec<f64>,
    pub class_id: ClassId,
    pub confidence: f64,
    /// Unlabeled iteration (0-based) in which the item was selected.
    pub iteration: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelBatch {
    pub session_index: usize,
    pub items: Vec<PseudoLabeled>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Quota {
    /// `iteration_budget / N` items per class.
    #[default]
    Equal,
    /// Fraction of each class's candidate list.
    Proportions(BTreeMap<ClassId, f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Balance {
    #[default]
    ClassBalanced,
    /// Plain self-training: the most confident items above `gamma`,
    /// regardless of class.
    ThresholdOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    #[serde(default)]
    pub gamma: f64,
    #[serde(default)]
    pub quota: Quota,
    pub iteration_budget: usize,
    pub iterations: usize,
    #[serde(default)]
    pub balance: Balance,
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if let Quota::Proportions(p) = &self.quota {
            if let Some((c, v)) = p.iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
                return Err(Error::PolicyTable(format!("proportion for class {c} is {v}, outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Pseudo label from a distribution already restricted to `session_classes`:
/// the arg-max class (lowest index on ties) and its probability.
pub fn pseudo_label(probs: &[f64], session_classes: &[ClassId]) -> (ClassId, f64) {
    assert_eq!(
        probs.len(),
        session_classes.len(),
        "distribution must cover exactly the session classes"
    );
    let best = crate::model::argmax(probs);
    (session_classes[best], probs[best])
}

/// Softmax over the head rows of `classes` only.
pub fn restricted_distribution(model: &ModelState, logits: &[f64], classes: &[ClassId]) -> Result<Vec<f64>> {
    let slice = classes
        .iter()
        .map(|&c| {
            model
                .class_index(c)
                .map(|i| logits[i])
                .ok_or_else(|| Error::Contract(format!("class {c} is not in the model head")))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(softmax(&slice))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: SampleId,
    pub input: Vec<f64>,
    pub confidence: f64,
}

/// Per-class candidate lists, each sorted by descending confidence (pool
/// order among equals). Every session class has an entry.
pub type CandidateLists = BTreeMap<ClassId, Vec<Candidate>>;

pub fn partition_confident(
    pool: &[UnlabeledItem],
    model: &ModelState,
    policy: &SelectionPolicy,
    session_classes: &[ClassId],
) -> Result<CandidateLists> {
    partition_confident_with(Execution::default(), pool, model, policy, session_classes)
}

pub fn partition_confident_with(
    exec: Execution,
    pool: &[UnlabeledItem],
    model: &ModelState,
    policy: &SelectionPolicy,
    session_classes: &[ClassId],
) -> Result<CandidateLists> {
    let inputs: Vec<&[f64]> = pool.iter().map(|u| u.input.as_slice()).collect();
    let logits = model.logits_batch(exec, &inputs)?;
    let mut lists: CandidateLists = session_classes.iter().map(|&c| (c, Vec::new())).collect();
    for (item, z) in pool.iter().zip(&logits) {
        let probs = restricted_distribution(model, z, session_classes)?;
        let (class, confidence) = pseudo_label(&probs, session_classes);
        if confidence > policy.gamma {
            lists.get_mut(&class).unwrap().push(Candidate {
                id: item.id,
                input: item.input.clone(),
                confidence,
            });
        }
    }
    for list in lists.values_mut() {
        list.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    }
    Ok(lists)
}

/// First pair `(a, b)` with `0 < |D_a| <= |D_b|` whose selected fractions
/// violate `s_a / |D_a| >= s_b / |D_b|`. Entries are `(class, size, selected)`.
pub fn monotone_violation(events: &[(ClassId, usize, usize)]) -> Option<(ClassId, ClassId)> {
    for &(a, na, sa) in events {
        for &(b, nb, sb) in events {
            if a == b || na == 0 || nb == 0 || na > nb {
                continue;
            }
            if (sa as u128) * (nb as u128) < (sb as u128) * (na as u128) {
                return Some((a, b));
            }
        }
    }
    None
}

fn check_nominal(sizes: &[(ClassId, usize)], table: &BTreeMap<ClassId, f64>) -> Result<Vec<f64>> {
    let props = sizes
        .iter()
        .map(|(c, _)| {
            table
                .get(c)
                .copied()
                .ok_or_else(|| Error::PolicyTable(format!("no proportion given for class {c}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    for (i, &(a, na)) in sizes.iter().enumerate() {
        for (j, &(b, nb)) in sizes.iter().enumerate() {
            if i != j && na > 0 && nb > 0 && na <= nb && props[i] < props[j] {
                return Err(Error::Policy {
                    a,
                    b,
                    size_a: na,
                    size_b: nb,
                    p_a: props[i],
                    p_b: props[j],
                });
            }
        }
    }
    Ok(props)
}

/// Counts `ceil(p * n)` per class, then raised where needed so that the
/// selected fraction is nonincreasing in list size.
fn proportional_counts(sizes: &[(ClassId, usize)], props: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = sizes
        .iter()
        .zip(props)
        .map(|(&(_, n), &p)| (((p * n as f64) - 1e-9).ceil().max(0.0) as usize).min(n))
        .collect();
    let mut order: Vec<usize> = (0..sizes.len()).filter(|&i| sizes[i].1 > 0).collect();
    order.sort_by(|&i, &j| sizes[j].1.cmp(&sizes[i].1));
    // largest selected fraction among strictly larger lists, as (count, size)
    let mut bound: (usize, usize) = (0, 1);
    let mut k = 0;
    while k < order.len() {
        let size = sizes[order[k]].1;
        let group: Vec<usize> = order[k..].iter().copied().take_while(|&i| sizes[i].1 == size).collect();
        let floor = (bound.0 * size).div_ceil(bound.1);
        let level = group.iter().map(|&i| counts[i].max(floor)).max().unwrap();
        for &i in &group {
            counts[i] = level;
        }
        if level * bound.1 > bound.0 * size {
            bound = (level, size);
        }
        k += group.len();
    }
    counts
}

/// Selects this iteration's additions from `candidates`.
pub fn class_balanced_select(
    candidates: &CandidateLists,
    policy: &SelectionPolicy,
    session_index: usize,
    iteration: usize,
) -> Result<PseudoLabelBatch> {
    let take = |class: ClassId, c: &Candidate| PseudoLabeled {
        id: c.id,
        input: c.input.clone(),
        class_id: class,
        confidence: c.confidence,
        iteration,
    };
    let items = match policy.balance {
        Balance::ThresholdOnly => {
            let mut all: Vec<(ClassId, &Candidate)> = candidates
                .iter()
                .flat_map(|(&cl, list)| list.iter().map(move |c| (cl, c)))
                .collect();
            all.sort_by(|a, b| b.1.confidence.total_cmp(&a.1.confidence));
            all.into_iter()
                .take(policy.iteration_budget)
                .map(|(cl, c)| take(cl, c))
                .collect()
        }
        Balance::ClassBalanced => {
            let sizes: Vec<(ClassId, usize)> = candidates.iter().map(|(&c, l)| (c, l.len())).collect();
            let counts = match &policy.quota {
                Quota::Equal => {
                    let q = policy.iteration_budget / sizes.len().max(1);
                    sizes.iter().map(|&(_, n)| q.min(n)).collect()
                }
                Quota::Proportions(table) => {
                    let props = check_nominal(&sizes, table)?;
                    proportional_counts(&sizes, &props)
                }
            };
            candidates
                .iter()
                .zip(counts)
                .flat_map(|((&class, list), k)| list[..k].iter().map(move |c| take(class, c)))
                .collect()
        }
    };
    Ok(PseudoLabelBatch { session_index, items })
}

/// One line of the per-iteration audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationAudit {
    pub session: usize,
    pub iteration: usize,
    pub pool_remaining: usize,
    pub candidates: BTreeMap<ClassId, usize>,
    pub selected: BTreeMap<ClassId, usize>,
    pub min_confidence: Option<f64>,
    pub mean_confidence: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UnlabeledOutcome {
    /// Accumulated selections in selection order.
    pub selected: Vec<PseudoLabeled>,
    pub audit: Vec<IterationAudit>,
}

/// Runs `policy.iterations` rounds of predict / partition / select / train.
/// Selected items leave the pool and keep the label they were given.
/// `train_step` receives the model, everything selected so far and the
/// iteration index.
pub fn run_unlabeled_iterations<F>(
    model: &mut ModelState,
    session: &SessionSpec,
    policy: &SelectionPolicy,
    mut train_step: F,
) -> Result<UnlabeledOutcome>
where
    F: FnMut(&mut ModelState, &[PseudoLabeled], usize) -> Result<()>,
{
    policy.validate()?;
    let mut pool: Vec<UnlabeledItem> = session.unlabeled_pool.clone();
    let mut outcome = UnlabeledOutcome::default();
    for iteration in 0..policy.iterations {
        let lists = partition_confident(&pool, model, policy, &session.class_ids)?;
        let batch = class_balanced_select(&lists, policy, session.index, iteration)?;

        let mut selected: BTreeMap<ClassId, usize> = lists.keys().map(|&c| (c, 0)).collect();
        for item in &batch.items {
            *selected.entry(item.class_id).or_default() += 1;
        }
        let confidences: Vec<f64> = batch.items.iter().map(|i| i.confidence).collect();
        let chosen: std::collections::HashSet<SampleId> = batch.items.iter().map(|i| i.id).collect();
        pool.retain(|u| !chosen.contains(&u.id));
        outcome.audit.push(IterationAudit {
            session: session.index,
            iteration,
            pool_remaining: pool.len(),
            candidates: lists.iter().map(|(&c, l)| (c, l.len())).collect(),
            selected,
            min_confidence: confidences.iter().copied().reduce(f64::min),
            mean_confidence: (!confidences.is_empty()).then(|| confidences.iter().sum::<f64>() / confidences.len() as f64),
        });
        outcome.selected.extend(batch.items);
        train_step(model, &outcome.selected, iteration)?;
    }
    Ok(outcome)
}
