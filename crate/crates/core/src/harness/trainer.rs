//! Per-session training: the base session and incremental sessions.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::audit::AuditLog;
use super::config::{Ablation, ExperimentConfig, PhaseSchedule, PrototypeSource};
use super::metrics::{evaluate, SessionMetrics};
use crate::distill::{
    adaptive_weight, refine_exemplars_with, session_objective, AdaptiveWeight, DistillTargets, LabeledRef, NoiseModel,
    RefinementRecord,
};
use crate::equilibrium::{run_unlabeled_iterations, IterationAudit, PseudoLabeled};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::exemplar::{build_exemplars, update_exemplars, ExemplarSet};
use crate::model::{compute_prototypes_from, ModelState, PrototypeTable, Sgd, SgdConfig};
use crate::protocol::{SessionSpec, SessionStream};
use crate::rng::{SeedTree, StreamRng};
use crate::{ClassId, SampleId};

/// Shared, read-only state for every session of one run.
pub struct TrainContext<'a> {
    pub config: &'a ExperimentConfig,
    pub stream: &'a SessionStream,
    pub exec: Execution,
    pub audit: &'a AuditLog,
}

impl TrainContext<'_> {
    fn seeds(&self, session: usize) -> SeedTree {
        SeedTree::new(self.config.seed).child("session", session as u64)
    }

    fn sgd(&self, lr: f64) -> Sgd {
        let o = &self.config.optimizer;
        Sgd::new(SgdConfig {
            lr,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
        })
    }
}

/// Per-epoch loss line of the training audit file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub session: usize,
    pub phase: String,
    pub epoch: usize,
    pub lr: f64,
    pub ce: f64,
    pub dl: f64,
    pub zeta: f64,
    pub total: f64,
}

/// Weight and memory sizes chosen for one incremental session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session: usize,
    pub weight: AdaptiveWeight,
    pub exemplars: usize,
    pub refined: usize,
    pub pseudo_labeled: usize,
}

pub fn training_file(session: usize) -> String {
    format!("training_session_{session}.jsonl")
}
pub fn refinement_file(session: usize) -> String {
    format!("refinement_session_{session}.jsonl")
}
pub fn unlabeled_file(session: usize) -> String {
    format!("unlabeled_session_{session}.jsonl")
}
pub fn summary_file() -> String {
    "sessions.jsonl".into()
}

/// Mean loss over one pass of `items` in shuffled minibatches. Every step
/// minimises `CE(batch) + zeta * KD(targets)`.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    exec: Execution,
    model: &mut ModelState,
    sgd: &mut Sgd,
    items: &[LabeledRef<'_>],
    targets: Option<&DistillTargets>,
    zeta: f64,
    batch_size: usize,
    rng: Option<&mut StreamRng>,
) -> Result<crate::distill::LossBreakdown> {
    let mut order: Vec<usize> = (0..items.len()).collect();
    if let Some(rng) = rng {
        order.shuffle(rng);
    }
    let mut acc = crate::distill::LossBreakdown {
        ce: 0.0,
        dl: 0.0,
        zeta,
        total: 0.0,
    };
    let mut steps = 0usize;
    for chunk in order.chunks(batch_size.max(1)) {
        let batch: Vec<LabeledRef<'_>> = chunk.iter().map(|&i| items[i]).collect();
        let (loss, grads) = session_objective(exec, model, &batch, targets, zeta, true)?;
        let grads = grads.expect("gradient requested");
        if !loss.total.is_finite() || !grads.is_finite() {
            acc.total = f64::NAN;
            return Ok(acc);
        }
        sgd.step(model, &grads);
        acc.ce += loss.ce;
        acc.dl += loss.dl;
        acc.total += loss.total;
        steps += 1;
    }
    if steps > 0 {
        let s = steps as f64;
        acc.ce /= s;
        acc.dl /= s;
        acc.total /= s;
    }
    Ok(acc)
}

#[allow(clippy::too_many_arguments)]
fn run_phase(
    ctx: &TrainContext<'_>,
    session: usize,
    phase: &str,
    model: &mut ModelState,
    sgd: &mut Sgd,
    schedule: &PhaseSchedule,
    items: &[LabeledRef<'_>],
    targets: Option<&DistillTargets>,
    zeta: f64,
    rng: &mut StreamRng,
) -> Result<()> {
    let mut records = Vec::with_capacity(schedule.epochs);
    for epoch in 0..schedule.epochs {
        let lr = schedule.lr_at(epoch);
        sgd.set_lr(lr);
        let loss = train_epoch(
            ctx.exec,
            model,
            sgd,
            items,
            targets,
            zeta,
            ctx.config.optimizer.batch_size,
            Some(rng),
        )?;
        records.push(EpochRecord {
            session,
            phase: phase.into(),
            epoch,
            lr,
            ce: loss.ce,
            dl: loss.dl,
            zeta: loss.zeta,
            total: loss.total,
        });
        if !loss.total.is_finite() {
            ctx.audit.append(&training_file(session), &records)?;
            return Err(Error::Diverged {
                session,
                epoch,
                loss: loss.total,
            });
        }
    }
    ctx.audit.append(&training_file(session), &records)
}

fn prototypes(
    ctx: &TrainContext<'_>,
    model: &ModelState,
    exemplars: &ExemplarSet,
    labeled: &[crate::protocol::Sample],
    classes: &[ClassId],
) -> Result<PrototypeTable> {
    let mut items: Vec<(ClassId, &[f64])> = exemplars.iter().map(|e| (e.class_id, e.input.as_slice())).collect();
    if ctx.config.evaluation.prototypes == PrototypeSource::ExemplarsAndLabeled {
        let present: BTreeSet<SampleId> = exemplars.iter().map(|e| e.sample_id).collect();
        items.extend(
            labeled
                .iter()
                .filter(|s| !present.contains(&s.id))
                .map(|s| (s.label, s.input.as_slice())),
        );
    }
    compute_prototypes_from(model, &items, classes, ctx.config.evaluation.nme)
}

fn session_metrics(
    ctx: &TrainContext<'_>,
    model: &ModelState,
    exemplars: &ExemplarSet,
    spec: &SessionSpec,
    started: Instant,
) -> Result<SessionMetrics> {
    let seen = ctx.stream.seen_classes(spec.index);
    let table = prototypes(ctx, model, exemplars, &spec.labeled, &seen)?;
    let base = ctx.stream.base_classes();
    let novel: Vec<ClassId> = seen.iter().copied().filter(|c| !base.contains(c)).collect();
    let cnn = ctx.config.evaluation.cnn_head || ctx.config.has(Ablation::CnnHead);
    let mut m = evaluate(model, &table, &spec.test_set, base, &novel, spec.index, cnn)?;
    m.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(m)
}

/// Cross-entropy training on the base classes, herding memory `E_1`, then
/// freezing of the configured front groups.
pub fn train_base_session(ctx: &TrainContext<'_>) -> Result<(ModelState, ExemplarSet, SessionMetrics)> {
    let started = Instant::now();
    let spec = ctx.stream.base();
    let seeds = ctx.seeds(spec.index);
    let input_dim = spec
        .labeled
        .first()
        .map(|s| s.input.len())
        .ok_or_else(|| Error::Contract("empty base session".into()))?;
    let mut model = ModelState::new(&ctx.config.backbone, input_dim, &spec.class_ids, &mut seeds.rng("init", 0))?;
    ctx.audit.reset(&training_file(spec.index))?;

    let items: Vec<LabeledRef<'_>> = spec.labeled.iter().map(|s| (s.input.as_slice(), s.label)).collect();
    let schedule = &ctx.config.optimizer.base;
    let mut sgd = ctx.sgd(schedule.lr);
    run_phase(
        ctx,
        spec.index,
        "base",
        &mut model,
        &mut sgd,
        schedule,
        &items,
        None,
        0.0,
        &mut seeds.rng("shuffle", 0),
    )?;

    let exemplars = build_exemplars(
        &model,
        &spec.labeled,
        &spec.class_ids,
        ctx.config.memory.budget_per_class,
        ctx.config.exemplar_rule(),
        &mut seeds.rng("memory", 0),
    )?;
    model.freeze_front_layers(ctx.config.freeze_groups)?;
    let metrics = session_metrics(ctx, &model, &exemplars, spec, started)?;
    Ok((model, exemplars, metrics))
}

#[derive(Debug, Clone)]
pub struct IncrementalOutcome {
    pub model: ModelState,
    pub exemplars: ExemplarSet,
    pub metrics: SessionMetrics,
    pub summary: SessionSummary,
    pub pseudo_labeled: Vec<PseudoLabeled>,
    pub refinement: Vec<RefinementRecord>,
    pub iterations: Vec<IterationAudit>,
}

/// One N-way K-shot session: head expansion, memory refinement and
/// weighting, supervised epochs, class-balanced self-training on the pool,
/// memory update and NME evaluation over every seen class.
pub fn run_incremental_session(
    ctx: &TrainContext<'_>,
    session: usize,
    reference: &ModelState,
    exemplars: &ExemplarSet,
) -> Result<IncrementalOutcome> {
    let started = Instant::now();
    let spec = ctx
        .stream
        .sessions
        .get(session - 1)
        .filter(|_| session > 1)
        .ok_or_else(|| Error::Contract(format!("session {session} is not an incremental session of this stream")))?;
    let config = ctx.config;
    let seeds = ctx.seeds(session);
    for name in [training_file(session), refinement_file(session), unlabeled_file(session)] {
        ctx.audit.reset(&name)?;
    }

    let mut model = reference.clone();
    model.expand_head(&spec.class_ids, &mut seeds.rng("init", 0))?;

    let naive = config.has(Ablation::Naive);
    let (refined, records) = if config.has(Ablation::NoUad) || naive {
        (exemplars.clone(), Vec::new())
    } else {
        let noise = NoiseModel::relative(config.uncertainty.noise_scale, ctx.stream.base_feature_std());
        let r = refine_exemplars_with(
            ctx.exec,
            exemplars,
            reference,
            &config.uncertainty,
            &noise,
            session,
            seeds.seed("noise", 0),
        )?;
        (r.refined, r.records)
    };
    ctx.audit.append(&refinement_file(session), &records)?;

    let zeta_base = config.distillation.zeta_base;
    let weight = if naive {
        AdaptiveWeight::constant(0.0)
    } else if config.has(Ablation::NoUad) {
        AdaptiveWeight::constant(1.0)
    } else if config.has(Ablation::NoAw) {
        AdaptiveWeight::constant(zeta_base)
    } else {
        adaptive_weight(
            zeta_base,
            exemplars.len(),
            refined.len(),
            reference.classes().len(),
            spec.class_ids.len(),
        )?
    };
    let targets = if weight.zeta > 0.0 {
        Some(DistillTargets::new(reference, &refined, config.distillation.temperature)?)
    } else {
        None
    };

    let mut supervised: Vec<LabeledRef<'_>> = exemplars.iter().map(|e| (e.input.as_slice(), e.class_id)).collect();
    supervised.extend(spec.labeled.iter().map(|s| (s.input.as_slice(), s.label)));
    let schedule = &config.optimizer.incremental;
    let mut sgd = ctx.sgd(schedule.lr);
    let mut shuffle = seeds.rng("shuffle", 0);
    run_phase(
        ctx,
        session,
        "supervised",
        &mut model,
        &mut sgd,
        schedule,
        &supervised,
        targets.as_ref(),
        weight.zeta,
        &mut shuffle,
    )?;

    let mut labeled: Vec<LabeledRef<'_>> = spec.labeled.iter().map(|s| (s.input.as_slice(), s.label)).collect();
    labeled.extend(refined.iter().map(|e| (e.input.as_slice(), e.class_id)));
    let extra_lr = schedule.lr_at(schedule.epochs);
    let policy = config.selection_policy();
    let o = &config.optimizer;
    let mut extra_records = Vec::new();
    let outcome = run_unlabeled_iterations(&mut model, spec, &policy, |m, pseudo, iteration| {
        sgd.set_lr(extra_lr);
        let pseudo_items: Vec<LabeledRef<'_>> = pseudo.iter().map(|p| (p.input.as_slice(), p.class_id)).collect();
        for epoch in 0..o.extra_epochs {
            let passes: Vec<Vec<LabeledRef<'_>>> = if o.labeled_first {
                vec![labeled.clone(), pseudo_items.clone()]
            } else {
                vec![labeled.iter().chain(&pseudo_items).copied().collect()]
            };
            let mut total = 0.0;
            for items in &passes {
                let l = train_epoch(
                    ctx.exec,
                    m,
                    &mut sgd,
                    items,
                    targets.as_ref(),
                    weight.zeta,
                    o.batch_size,
                    Some(&mut shuffle),
                )?;
                total += l.total;
                extra_records.push(EpochRecord {
                    session,
                    phase: format!("extra-{iteration}"),
                    epoch,
                    lr: extra_lr,
                    ce: l.ce,
                    dl: l.dl,
                    zeta: l.zeta,
                    total: l.total,
                });
            }
            if !total.is_finite() {
                return Err(Error::Diverged {
                    session,
                    epoch: iteration * o.extra_epochs + epoch,
                    loss: total,
                });
            }
        }
        Ok(())
    });
    ctx.audit.append(&training_file(session), &extra_records)?;
    let outcome = outcome?;
    ctx.audit.append(&unlabeled_file(session), &outcome.audit)?;

    let next = update_exemplars(
        exemplars,
        &spec.labeled,
        &outcome.selected,
        &spec.class_ids,
        &model,
        config.exemplar_rule(),
        &mut seeds.rng("memory", 0),
    )?;
    let metrics = session_metrics(ctx, &model, &next, spec, started)?;
    let summary = SessionSummary {
        session,
        weight,
        exemplars: exemplars.len(),
        refined: refined.len(),
        pseudo_labeled: outcome.selected.len(),
    };
    ctx.audit.append(&summary_file(), std::slice::from_ref(&summary))?;
    Ok(IncrementalOutcome {
        model,
        exemplars: next,
        metrics,
        summary,
        pseudo_labeled: outcome.selected,
        refinement: records,
        iterations: outcome.audit,
    })
}
