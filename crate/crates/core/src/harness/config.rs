//! Experiment configuration (TOML) and presets.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distill::{UncertaintyConfig, DEFAULT_TEMPERATURE};
use crate::equilibrium::{Balance, Quota, SelectionPolicy};
use crate::error::{Error, Result};
use crate::exemplar::SelectionRule;
use crate::model::{Activation, BackboneSpec, NmeOptions};
use crate::protocol::{synthetic_manifest, DatasetManifest, ProtocolConfig};

pub const ENV_SEED: &str = "SEMIFSCIL_SEED";
pub const ENV_OUT: &str = "SEMIFSCIL_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic {
        class_count: usize,
        samples_per_class: usize,
        dimension: usize,
        separation: f64,
        /// Defaults to a stream derived from the experiment seed.
        #[serde(default)]
        seed: Option<u64>,
    },
    Csv {
        path: PathBuf,
    },
    TensorDir {
        path: PathBuf,
    },
}

impl DatasetSource {
    pub fn load(&self, experiment_seed: u64) -> Result<DatasetManifest> {
        match self {
            DatasetSource::Synthetic {
                class_count,
                samples_per_class,
                dimension,
                separation,
                seed,
            } => {
                let seed = seed.unwrap_or_else(|| crate::rng::derive_seed(experiment_seed, "dataset", 0));
                synthetic_manifest(*class_count, *samples_per_class, *dimension, *separation, seed)
            }
            DatasetSource::Csv { path } => DatasetManifest::from_csv(path),
            DatasetSource::TensorDir { path } => DatasetManifest::from_tensor_dir(path),
        }
    }
}

/// Learning-rate schedule for one phase: `lr` divided by `1 / decay` at each
/// milestone epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseSchedule {
    pub lr: f64,
    pub epochs: usize,
    #[serde(default)]
    pub milestones: Vec<usize>,
    #[serde(default = "default_decay")]
    pub decay: f64,
}

fn default_decay() -> f64 {
    0.1
}

impl PhaseSchedule {
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.decay.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    pub batch_size: usize,
    /// Session 1.
    pub base: PhaseSchedule,
    /// Supervised epochs of sessions > 1.
    pub incremental: PhaseSchedule,
    /// Epochs after each unlabeled iteration.
    pub extra_epochs: usize,
    /// Within an extra epoch, visit labeled batches before pseudo-labeled
    /// ones instead of one shuffled mix.
    #[serde(default = "yes")]
    pub labeled_first: bool,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_wd() -> f64 {
    5e-4
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillationConfig {
    pub zeta_base: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryConfig {
    #[serde(default = "default_budget")]
    pub budget_per_class: usize,
    #[serde(default)]
    pub selection: SelectionRule,
}

fn default_budget() -> usize {
    20
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrototypeSource {
    /// Exemplars plus the current session's labeled samples.
    #[default]
    ExemplarsAndLabeled,
    ExemplarsOnly,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvaluationConfig {
    #[serde(default, flatten)]
    pub nme: NmeOptions,
    #[serde(default)]
    pub prototypes: PrototypeSource,
    /// Also report arg-max accuracy of the classification head.
    #[serde(default)]
    pub cnn_head: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    /// Standard distillation: unrefined memory, weight 1.
    NoUad,
    /// Plain threshold self-training without class balancing.
    NoCe,
    /// Fixed weight `zeta_base` instead of the adaptive weight.
    NoAw,
    /// Record head (arg-max) accuracy next to NME.
    CnnHead,
    /// No distillation and no unlabeled iterations.
    Naive,
    /// Random instead of herding exemplar selection.
    RandomExemplars,
}

impl Ablation {
    pub const ALL: [Ablation; 6] = [
        Ablation::NoUad,
        Ablation::NoCe,
        Ablation::NoAw,
        Ablation::CnnHead,
        Ablation::Naive,
        Ablation::RandomExemplars,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoUad => "no-uad",
            Ablation::NoCe => "no-ce",
            Ablation::NoAw => "no-aw",
            Ablation::CnnHead => "cnn-head",
            Ablation::Naive => "naive",
            Ablation::RandomExemplars => "random-exemplars",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown ablation '{s}' (expected one of {:?})",
                Ablation::ALL.map(|a| a.name())
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetSource,
    /// `protocol.seed` is ignored: the split stream derives from `seed`.
    pub protocol: ProtocolConfig,
    pub backbone: BackboneSpec,
    /// Backbone groups frozen after the base session.
    pub freeze_groups: usize,
    pub optimizer: OptimizerConfig,
    pub unlabeled: SelectionPolicy,
    #[serde(default)]
    pub uncertainty: UncertaintyConfig,
    pub distillation: DistillationConfig,
    #[serde(default = "default_memory")]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub ablations: Vec<Ablation>,
}

fn default_memory() -> MemoryConfig {
    MemoryConfig {
        budget_per_class: default_budget(),
        selection: SelectionRule::Herding,
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Self = toml::from_str(&text).map_err(|e| Error::parse(path, e))?;
        if let DatasetSource::Csv { path: p } | DatasetSource::TensorDir { path: p } = &mut config.dataset {
            if p.is_relative() {
                *p = path.parent().unwrap_or(Path::new(".")).join(&*p);
            }
        }
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `SEMIFSCIL_SEED` / `SEMIFSCIL_OUT` if set.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(seed) = std::env::var(ENV_SEED) {
            self.seed = seed
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_SEED} must be an integer, got '{seed}'")))?;
        }
        if let Ok(out) = std::env::var(ENV_OUT) {
            self.output_dir = PathBuf::from(out);
        }
        Ok(())
    }

    pub fn has(&self, ablation: Ablation) -> bool {
        self.ablations.contains(&ablation)
    }

    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        if !self.has(ablation) {
            self.ablations.push(ablation);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.unlabeled.validate()?;
        let o = &self.optimizer;
        for (name, lr) in [("base", o.base.lr), ("incremental", o.incremental.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("optimizer.{name}.lr must be positive, got {lr}")));
            }
        }
        if o.batch_size == 0 {
            return Err(Error::Config("optimizer.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&o.momentum) || o.weight_decay < 0.0 {
            return Err(Error::Config(
                "momentum must lie in [0, 1) and weight decay must be nonnegative".into(),
            ));
        }
        let positive = |v: f64| v > 0.0;
        if !positive(self.distillation.zeta_base) || !positive(self.distillation.temperature) {
            return Err(Error::Config(
                "distillation.zeta_base and temperature must be positive".into(),
            ));
        }
        if self.uncertainty.pass_count < 2 {
            return Err(Error::Config("uncertainty.pass_count must be at least 2".into()));
        }
        if !(self.uncertainty.keep_fraction > 0.0 && self.uncertainty.keep_fraction <= 1.0) {
            return Err(Error::Config("uncertainty.keep_fraction must lie in (0, 1]".into()));
        }
        if self.memory.budget_per_class == 0 {
            return Err(Error::Config("memory.budget_per_class must be positive".into()));
        }
        Ok(())
    }

    /// Effective unlabeled policy after ablations.
    pub fn selection_policy(&self) -> SelectionPolicy {
        let mut p = self.unlabeled.clone();
        if self.has(Ablation::NoCe) {
            p.balance = Balance::ThresholdOnly;
        }
        if self.has(Ablation::Naive) {
            p.iterations = 0;
        }
        p
    }

    pub fn exemplar_rule(&self) -> SelectionRule {
        if self.has(Ablation::RandomExemplars) {
            SelectionRule::Random
        } else {
            self.memory.selection
        }
    }

    /// Desk-scale synthetic benchmark: 10 classes, 6 base classes and two
    /// 2-way 5-shot sessions with 100-item unlabeled pools, MLP backbone.
    pub fn desk() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            dataset: DatasetSource::Synthetic {
                class_count: 10,
                samples_per_class: 1200,
                dimension: 8,
                separation: 3.0,
                seed: None,
            },
            protocol: ProtocolConfig {
                base_class_count: 6,
                n_way: 2,
                k_shot: 5,
                session_count: 3,
                unlabeled_pool_size: 100,
                seed: 0,
                train_fraction: 5.0 / 6.0,
                cross_session_distractors: false,
            },
            backbone: BackboneSpec::Mlp {
                hidden: vec![32],
                feature_dim: 16,
                activation: Activation::Relu,
            },
            freeze_groups: 1,
            optimizer: OptimizerConfig {
                momentum: 0.9,
                weight_decay: 5e-4,
                batch_size: 32,
                base: PhaseSchedule {
                    lr: 0.05,
                    epochs: 30,
                    milestones: vec![20, 25],
                    decay: 0.1,
                },
                incremental: PhaseSchedule {
                    lr: 0.03,
                    epochs: 60,
                    milestones: vec![],
                    decay: 0.1,
                },
                extra_epochs: 3,
                labeled_first: true,
            },
            unlabeled: SelectionPolicy {
                gamma: 0.0,
                quota: Quota::Equal,
                iteration_budget: 10,
                iterations: 8,
                balance: Balance::ClassBalanced,
            },
            uncertainty: UncertaintyConfig::default(),
            distillation: DistillationConfig {
                zeta_base: 1.0,
                temperature: DEFAULT_TEMPERATURE,
            },
            memory: default_memory(),
            evaluation: EvaluationConfig::default(),
            ablations: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn full_scale(
        name: &str,
        base: usize,
        way: usize,
        sessions: usize,
        batch: usize,
        base_lr: f64,
        inc: PhaseSchedule,
        extra: usize,
        iterations: usize,
        zeta_base: f64,
    ) -> Self {
        let mut c = Self::desk();
        c.output_dir = PathBuf::from(format!("runs/{name}"));
        c.dataset = DatasetSource::TensorDir {
            path: PathBuf::from(format!("data/{name}")),
        };
        c.protocol = ProtocolConfig {
            base_class_count: base,
            n_way: way,
            k_shot: 5,
            session_count: sessions,
            unlabeled_pool_size: 1_000_000,
            seed: 0,
            train_fraction: 5.0 / 6.0,
            cross_session_distractors: false,
        };
        c.backbone = BackboneSpec::Resnet18 { feature_dim: 512 };
        c.freeze_groups = 4;
        c.optimizer.batch_size = batch;
        c.optimizer.base = PhaseSchedule {
            lr: base_lr,
            epochs: 160,
            milestones: vec![80, 120],
            decay: 0.1,
        };
        c.optimizer.incremental = inc;
        c.optimizer.extra_epochs = extra;
        c.unlabeled.iterations = iterations;
        c.distillation.zeta_base = zeta_base;
        c
    }

    /// CIFAR100 layout: 60 base classes, eight 5-way 5-shot sessions.
    pub fn cifar100() -> Self {
        let inc = PhaseSchedule {
            lr: 0.001,
            epochs: 100,
            milestones: vec![],
            decay: 0.1,
        };
        Self::full_scale("cifar100", 60, 5, 9, 32, 0.1, inc, 10, 35, 1.0)
    }

    pub fn mini_imagenet() -> Self {
        let inc = PhaseSchedule {
            lr: 0.001,
            epochs: 100,
            milestones: vec![],
            decay: 0.1,
        };
        Self::full_scale("mini-imagenet", 60, 5, 9, 128, 0.1, inc, 10, 16, 2.0)
    }

    /// CUB200 layout: 100 base classes, ten 10-way 5-shot sessions.
    pub fn cub200() -> Self {
        let inc = PhaseSchedule {
            lr: 0.0005,
            epochs: 60,
            milestones: vec![],
            decay: 0.1,
        };
        Self::full_scale("cub200", 100, 10, 11, 32, 0.001, inc, 20, 16, 2.0)
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(Self::desk()),
            "cifar100" => Some(Self::cifar100()),
            "mini-imagenet" => Some(Self::mini_imagenet()),
            "cub200" => Some(Self::cub200()),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for name in ["desk", "cifar100", "mini-imagenet", "cub200"] {
            let c = ExperimentConfig::preset(name).unwrap();
            let text = c.to_toml().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), c, "{name}");
        }
    }

    #[test]
    fn lr_schedule_decays_at_milestones() {
        let s = PhaseSchedule {
            lr: 0.1,
            epochs: 160,
            milestones: vec![80, 120],
            decay: 0.1,
        };
        assert_eq!(s.lr_at(0), 0.1);
        assert!((s.lr_at(80) - 0.01).abs() < 1e-15);
        assert!((s.lr_at(159) - 0.001).abs() < 1e-15);
    }

    #[test]
    fn ablation_names_parse() {
        for a in Ablation::ALL {
            assert_eq!(a.name().parse::<Ablation>().unwrap(), a);
        }
        assert!("bogus".parse::<Ablation>().is_err());
    }
}
