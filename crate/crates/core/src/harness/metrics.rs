//! Session accuracy, performance drop and average accuracy.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{nme_classify, ModelState, PrototypeTable};
use crate::protocol::Sample;
use crate::ClassId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionMetrics {
    pub session_index: usize,
    pub overall_acc: f64,
    pub base_acc: f64,
    /// Absent in the base session.
    pub novel_acc: Option<f64>,
    /// Arg-max accuracy of the classification head, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cnn_overall_acc: Option<f64>,
    pub timestamp: String,
    pub wall_time_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub sessions: Vec<SessionMetrics>,
    pub pd: f64,
    pub average_acc: f64,
    pub config: crate::harness::ExperimentConfig,
    pub audit_files: Vec<std::path::PathBuf>,
}

impl RunReport {
    pub fn from_sessions(
        sessions: Vec<SessionMetrics>,
        config: crate::harness::ExperimentConfig,
        audit_files: Vec<std::path::PathBuf>,
    ) -> Result<Self> {
        let accs: Vec<f64> = sessions.iter().map(|s| s.overall_acc).collect();
        let average_acc = average_accuracy(&accs)?;
        let pd = performance_drop(accs[0], *accs.last().unwrap());
        Ok(Self {
            sessions,
            pd,
            average_acc,
            config,
            audit_files,
        })
    }

    pub fn final_session(&self) -> &SessionMetrics {
        self.sessions.last().expect("a report has at least one session")
    }
}

/// First-session accuracy minus last-session accuracy, in points.
pub fn performance_drop(first_acc: f64, last_acc: f64) -> f64 {
    first_acc - last_acc
}

pub fn average_accuracy(accs: &[f64]) -> Result<f64> {
    if accs.is_empty() {
        return Err(Error::Contract("average accuracy of an empty session list".into()));
    }
    Ok(accs.iter().sum::<f64>() / accs.len() as f64)
}

/// Fixed-point two-decimal rendering used in tables and CSV output.
pub fn pct(v: f64) -> String {
    format!("{v:.2}")
}

fn percent(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| 100.0 * hits as f64 / total as f64)
}

/// NME accuracy over `test_set`, split into base and novel classes.
pub fn evaluate(
    model: &ModelState,
    prototypes: &PrototypeTable,
    test_set: &[Sample],
    base_classes: &[ClassId],
    novel_classes: &[ClassId],
    session_index: usize,
    cnn_head: bool,
) -> Result<SessionMetrics> {
    if test_set.is_empty() {
        return Err(Error::Contract(format!("session {session_index} has an empty test set")));
    }
    let test_classes: BTreeSet<ClassId> = test_set.iter().map(|s| s.label).collect();
    if let Some(&missing) = test_classes.iter().find(|c| !prototypes.prototypes.contains_key(c)) {
        return Err(Error::MissingPrototype(missing));
    }
    let inputs: Vec<&[f64]> = test_set.iter().map(|s| s.input.as_slice()).collect();
    let predicted = nme_classify(&model.extract_features(&inputs)?, prototypes);

    let base: BTreeSet<ClassId> = base_classes.iter().copied().collect();
    let novel: BTreeSet<ClassId> = novel_classes.iter().copied().collect();
    let (mut hits, mut base_hits, mut base_n, mut novel_hits, mut novel_n) = (0, 0, 0, 0, 0);
    for (s, &p) in test_set.iter().zip(&predicted) {
        let ok = (s.label == p) as usize;
        hits += ok;
        if base.contains(&s.label) {
            base_hits += ok;
            base_n += 1;
        } else if novel.contains(&s.label) {
            novel_hits += ok;
            novel_n += 1;
        }
    }

    let cnn_overall_acc = if cnn_head {
        let logits = model.logits_batch(crate::exec::Execution::default(), &inputs)?;
        let correct = test_set
            .iter()
            .zip(&logits)
            .filter(|(s, z)| model.classes()[crate::model::argmax(z)] == s.label)
            .count();
        percent(correct, test_set.len())
    } else {
        None
    };

    Ok(SessionMetrics {
        session_index,
        overall_acc: percent(hits, test_set.len()).unwrap(),
        base_acc: percent(base_hits, base_n).unwrap_or(0.0),
        novel_acc: if novel.is_empty() {
            None
        } else {
            percent(novel_hits, novel_n)
        },
        cnn_overall_acc,
        timestamp: chrono::Utc::now().to_rfc3339(),
        wall_time_secs: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drop_and_average() {
        assert!((performance_drop(68.68, 21.16) - 47.52).abs() < 1e-9);
        assert!((performance_drop(75.17, 60.72) - 14.45).abs() < 1e-9);
        assert_eq!(performance_drop(50.0, 50.0), 0.0);
        assert_eq!(average_accuracy(&[42.0]).unwrap(), 42.0);
        assert_eq!(average_accuracy(&[0.0, 100.0]).unwrap(), 50.0);
        assert!(average_accuracy(&[]).is_err());
    }
}
