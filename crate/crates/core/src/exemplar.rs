//! Rehearsal memory: per-class exemplar lists chosen by herding, carrying
//! provenance (labeled or pseudo-labeled) and an optional cached uncertainty.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::equilibrium::PseudoLabeled;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::protocol::Sample;
use crate::rng::StreamRng;
use crate::{ClassId, SampleId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Labeled,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub sample_id: SampleId,
    pub input: Vec<f64>,
    pub class_id: ClassId,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uncertainty: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarSet {
    budget: usize,
    per_class: BTreeMap<ClassId, Vec<Exemplar>>,
}

impl ExemplarSet {
    pub fn new(budget: usize) -> Result<Self> {
        if budget == 0 {
            return Err(Error::Config("exemplar budget per class must be positive".into()));
        }
        Ok(Self {
            budget,
            per_class: BTreeMap::new(),
        })
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    pub fn classes(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.per_class.keys().copied()
    }

    pub fn class(&self, class: ClassId) -> &[Exemplar] {
        self.per_class.get(&class).map_or(&[], Vec::as_slice)
    }

    pub fn contains_class(&self, class: ClassId) -> bool {
        self.per_class.contains_key(&class)
    }

    /// All exemplars, by ascending class id and herding order within a class.
    pub fn iter(&self) -> impl Iterator<Item = &Exemplar> {
        self.per_class.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn class_count(&self) -> usize {
        self.per_class.len()
    }

    /// Installs the list for `class`. Lists may be empty (a refined set can
    /// lose a class) but never exceed the budget.
    pub fn insert_class(&mut self, class: ClassId, exemplars: Vec<Exemplar>) -> Result<()> {
        if exemplars.len() > self.budget {
            return Err(Error::Contract(format!(
                "class {class}: {} exemplars exceed the budget of {}",
                exemplars.len(),
                self.budget
            )));
        }
        if let Some(bad) = exemplars.iter().find(|e| e.class_id != class) {
            return Err(Error::Contract(format!(
                "exemplar {} labeled {} filed under class {class}",
                bad.sample_id, bad.class_id
            )));
        }
        self.per_class.insert(class, exemplars);
        Ok(())
    }

    /// Same classes and budget, keeping only exemplars accepted by `keep`.
    pub fn filtered(&self, mut keep: impl FnMut(&Exemplar) -> bool) -> ExemplarSet {
        let per_class = self
            .per_class
            .iter()
            .map(|(&c, list)| (c, list.iter().filter(|e| keep(e)).cloned().collect()))
            .collect();
        ExemplarSet {
            budget: self.budget,
            per_class,
        }
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = &mut Exemplar> {
        self.per_class.values_mut().flatten()
    }
}

/// Greedy herding. At step `t` the candidate minimising
/// `|| mu - (S + f) / t ||` is picked, where `mu` is the mean of all
/// candidates and `S` the sum of features already chosen. Ties go to the
/// lowest index. Returns `m` indices in selection order.
pub fn herding_select(features: &[Vec<f64>], m: usize) -> Result<Vec<usize>> {
    let n = features.len();
    if m > n {
        return Err(Error::Selection {
            requested: m,
            available: n,
        });
    }
    if m == 0 {
        return Ok(Vec::new());
    }
    let dim = features[0].len();
    let mut mu = vec![0.0; dim];
    for f in features {
        mu.iter_mut().zip(f).for_each(|(a, b)| *a += b);
    }
    mu.iter_mut().for_each(|a| *a /= n as f64);

    let mut chosen = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut running = vec![0.0; dim];
    for t in 1..=m {
        let inv_t = 1.0 / t as f64;
        let mut best: Option<(usize, f64)> = None;
        for (j, f) in features.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let d: f64 = mu
                .iter()
                .zip(&running)
                .zip(f)
                .map(|((u, s), x)| {
                    let diff = u - (s + x) * inv_t;
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        let (j, _) = best.expect("m <= n leaves a candidate");
        taken[j] = true;
        running.iter_mut().zip(&features[j]).for_each(|(s, x)| *s += x);
        chosen.push(j);
    }
    Ok(chosen)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionRule {
    #[default]
    Herding,
    /// Uniformly random subset; ablation baseline.
    Random,
}

fn select_for_class(
    model: &ModelState,
    class: ClassId,
    candidates: Vec<Exemplar>,
    budget: usize,
    rule: SelectionRule,
    rng: &mut StreamRng,
) -> Result<Vec<Exemplar>> {
    if candidates.is_empty() {
        return Err(Error::EmptyClass(class));
    }
    let m = budget.min(candidates.len());
    let order = match rule {
        SelectionRule::Herding => {
            let inputs: Vec<&[f64]> = candidates.iter().map(|c| c.input.as_slice()).collect();
            herding_select(&model.extract_features(&inputs)?, m)?
        }
        SelectionRule::Random => {
            let mut idx: Vec<usize> = (0..candidates.len()).collect();
            idx.shuffle(rng);
            idx.truncate(m);
            idx
        }
    };
    let mut slots: Vec<Option<Exemplar>> = candidates.into_iter().map(Some).collect();
    Ok(order.into_iter().map(|i| slots[i].take().unwrap()).collect())
}

fn labeled_exemplar(s: &Sample) -> Exemplar {
    Exemplar {
        sample_id: s.id,
        input: s.input.clone(),
        class_id: s.label,
        provenance: Provenance::Labeled,
        uncertainty: None,
    }
}

/// Initial memory from fully labeled data (the base session).
pub fn build_exemplars(
    model: &ModelState,
    samples: &[Sample],
    classes: &[ClassId],
    budget: usize,
    rule: SelectionRule,
    rng: &mut StreamRng,
) -> Result<ExemplarSet> {
    update_exemplars(&ExemplarSet::new(budget)?, samples, &[], classes, model, rule, rng)
}

/// Carries previous classes over unchanged and selects up to `budget`
/// exemplars for each class in `new_classes` from its labeled samples
/// followed by its pseudo-labeled samples.
pub fn update_exemplars(
    previous: &ExemplarSet,
    session_labeled: &[Sample],
    session_pseudo: &[PseudoLabeled],
    new_classes: &[ClassId],
    model: &ModelState,
    rule: SelectionRule,
    rng: &mut StreamRng,
) -> Result<ExemplarSet> {
    let mut next = previous.clone();
    for &class in new_classes {
        if previous.contains_class(class) {
            return Err(Error::Contract(format!("class {class} already has exemplars")));
        }
        let mut candidates: Vec<Exemplar> = session_labeled
            .iter()
            .filter(|s| s.label == class)
            .map(labeled_exemplar)
            .collect();
        candidates.extend(session_pseudo.iter().filter(|p| p.class_id == class).map(|p| Exemplar {
            sample_id: p.id,
            input: p.input.clone(),
            class_id: class,
            provenance: Provenance::Pseudo,
            uncertainty: None,
        }));
        let chosen = select_for_class(model, class, candidates, previous.budget, rule, rng)?;
        next.insert_class(class, chosen)?;
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_features_pick_in_input_order() {
        let f = vec![vec![1.0, 1.0]; 6];
        assert_eq!(herding_select(&f, 4).unwrap(), vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_pick_is_nearest_to_mean() {
        let f = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 0.0]];
        assert_eq!(herding_select(&f, 1).unwrap(), vec![2]);
    }

    #[test]
    fn over_request_is_an_error() {
        let f = vec![vec![0.0]; 3];
        assert!(matches!(
            herding_select(&f, 4),
            Err(Error::Selection {
                requested: 4,
                available: 3
            })
        ));
        assert!(herding_select(&f, 0).unwrap().is_empty());
    }

    #[test]
    fn budget_is_enforced() {
        let mut set = ExemplarSet::new(2).unwrap();
        let e = |id| Exemplar {
            sample_id: id,
            input: vec![0.0],
            class_id: 1,
            provenance: Provenance::Labeled,
            uncertainty: None,
        };
        assert!(set.insert_class(1, vec![e(0), e(1), e(2)]).is_err());
        set.insert_class(1, vec![e(0), e(1)]).unwrap();
        assert_eq!(set.len(), 2);
        assert!(ExemplarSet::new(0).is_err());
    }
}
