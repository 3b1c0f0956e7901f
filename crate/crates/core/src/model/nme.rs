//! Class prototypes and nearest-mean-of-exemplars classification.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ModelState;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::exemplar::ExemplarSet;
use crate::ClassId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct NmeOptions {
    /// L2-normalise features before averaging and before distance queries.
    #[serde(default)]
    pub normalize: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeTable {
    pub prototypes: BTreeMap<ClassId, Vec<f64>>,
    pub normalized: bool,
}

fn l2_normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

/// Prototypes over the classes stored in `exemplars`.
pub fn compute_prototypes(model: &ModelState, exemplars: &ExemplarSet, opts: NmeOptions) -> Result<PrototypeTable> {
    let items: Vec<(ClassId, &[f64])> = exemplars.iter().map(|e| (e.class_id, e.input.as_slice())).collect();
    let classes: Vec<ClassId> = exemplars.classes().collect();
    compute_prototypes_from(model, &items, &classes, opts)
}

/// Prototype of each class in `classes` = mean feature of its items.
pub fn compute_prototypes_from(
    model: &ModelState,
    items: &[(ClassId, &[f64])],
    classes: &[ClassId],
    opts: NmeOptions,
) -> Result<PrototypeTable> {
    let inputs: Vec<&[f64]> = items.iter().map(|(_, x)| *x).collect();
    let mut features = model.extract_features(&inputs)?;
    if opts.normalize {
        features.iter_mut().for_each(|f| l2_normalize(f));
    }
    let dim = model.feature_dim();
    let mut sums: BTreeMap<ClassId, (Vec<f64>, usize)> = classes.iter().map(|&c| (c, (vec![0.0; dim], 0))).collect();
    for ((class, _), f) in items.iter().zip(&features) {
        if let Some((sum, n)) = sums.get_mut(class) {
            sum.iter_mut().zip(f).for_each(|(s, v)| *s += v);
            *n += 1;
        }
    }
    let mut prototypes = BTreeMap::new();
    for (class, (mut sum, n)) in sums {
        if n == 0 {
            return Err(Error::MissingPrototype(class));
        }
        sum.iter_mut().for_each(|s| *s /= n as f64);
        if opts.normalize {
            l2_normalize(&mut sum);
        }
        prototypes.insert(class, sum);
    }
    Ok(PrototypeTable {
        prototypes,
        normalized: opts.normalize,
    })
}

pub fn nme_classify(features: &[Vec<f64>], table: &PrototypeTable) -> Vec<ClassId> {
    nme_classify_with(Execution::default(), features, table)
}

/// Nearest prototype by Euclidean distance; ties resolve to the smallest
/// class id. Panics if the table is empty.
pub fn nme_classify_with(exec: Execution, features: &[Vec<f64>], table: &PrototypeTable) -> Vec<ClassId> {
    assert!(!table.prototypes.is_empty(), "nme_classify needs at least one prototype");
    exec.map(features, |f| {
        let mut query = f.clone();
        if table.normalized {
            l2_normalize(&mut query);
        }
        let mut best: Option<(ClassId, f64)> = None;
        for (&class, proto) in &table.prototypes {
            let d: f64 = proto.iter().zip(&query).map(|(p, q)| (p - q) * (p - q)).sum();
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((class, d));
            }
        }
        best.unwrap().0
    })
}
