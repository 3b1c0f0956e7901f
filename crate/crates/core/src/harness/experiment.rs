//! Whole-run orchestration, artifacts and checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::audit::AuditLog;
use super::config::ExperimentConfig;
use super::metrics::{RunReport, SessionMetrics};
use super::report::{accuracy_svg, metrics_csv, write_text};
use super::trainer::{run_incremental_session, train_base_session, TrainContext};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::exemplar::ExemplarSet;
use crate::model::ModelState;
use crate::protocol::{build_benchmark, SessionStream};
use crate::rng::derive_seed;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Model, memory and metrics history at the end of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub session_index: usize,
    pub seed: u64,
    pub model: ModelState,
    pub exemplars: ExemplarSet,
    pub history: Vec<SessionMetrics>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &serde_json::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(path, e))?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::parse(path, "missing format_version"))?;
        if found != CHECKPOINT_FORMAT_VERSION as u64 {
            return Err(Error::FormatVersion {
                found: found as u32,
                expected: CHECKPOINT_FORMAT_VERSION,
            });
        }
        serde_json::from_value(value).map_err(|e| Error::parse(path, e))
    }
}

/// Output layout under the run directory.
#[derive(Debug, Clone, PartialEq)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    pub fn stream_index(&self) -> PathBuf {
        self.root.join("stream_index.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.root.join("metrics.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.root.join("report.json")
    }
    pub fn plot(&self) -> PathBuf {
        self.root.join("accuracy.svg")
    }
    pub fn audit(&self) -> PathBuf {
        self.root.join("audit")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }
    pub fn checkpoint(&self, session: usize) -> PathBuf {
        self.checkpoints().join(format!("session_{session}.json"))
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub exec: Execution,
    /// Continue after the session stored in this checkpoint.
    pub resume: Option<PathBuf>,
    /// Skip every file write (useful for in-process sweeps).
    pub in_memory: bool,
}

/// Benchmark stream of a config. The split stream is derived from the
/// experiment seed.
pub fn build_stream(config: &ExperimentConfig) -> Result<SessionStream> {
    let manifest = config.dataset.load(config.seed)?;
    let mut protocol = config.protocol.clone();
    protocol.seed = derive_seed(config.seed, "split", 0);
    build_benchmark(&manifest, &protocol)
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    run_experiment_with(config, &RunOptions::default())
}

/// Runs every session, writing artifacts as it goes so a failure leaves the
/// completed sessions on disk.
pub fn run_experiment_with(config: &ExperimentConfig, options: &RunOptions) -> Result<RunReport> {
    config.validate()?;
    let paths = RunPaths::new(&config.output_dir);
    let stream = build_stream(config)?;
    let audit = if options.in_memory {
        AuditLog::disabled()
    } else {
        for dir in [paths.root.clone(), paths.checkpoints()] {
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        write_text(&paths.config(), &config.to_toml()?)?;
        stream.write_index(&paths.stream_index())?;
        AuditLog::in_dir(paths.audit())?
    };
    let ctx = TrainContext {
        config,
        stream: &stream,
        exec: options.exec,
        audit: &audit,
    };

    let (mut model, mut exemplars, mut history) = match &options.resume {
        Some(path) => {
            let cp = Checkpoint::load(path)?;
            if cp.seed != config.seed {
                return Err(Error::Config(format!(
                    "checkpoint seed {} differs from config seed {}",
                    cp.seed, config.seed
                )));
            }
            if cp.session_index == 0 || cp.session_index > stream.sessions.len() || cp.history.len() != cp.session_index {
                return Err(Error::Config(format!(
                    "checkpoint session {} does not fit this stream",
                    cp.session_index
                )));
            }
            (cp.model, cp.exemplars, cp.history)
        }
        None => {
            let (model, exemplars, metrics) = train_base_session(&ctx)?;
            (model, exemplars, vec![metrics])
        }
    };

    let save = |model: &ModelState, exemplars: &ExemplarSet, history: &[SessionMetrics]| -> Result<()> {
        if options.in_memory {
            return Ok(());
        }
        write_text(&paths.metrics(), &metrics_csv(history))?;
        Checkpoint {
            format_version: CHECKPOINT_FORMAT_VERSION,
            session_index: history.len(),
            seed: config.seed,
            model: model.clone(),
            exemplars: exemplars.clone(),
            history: history.to_vec(),
        }
        .save(&paths.checkpoint(history.len()))
    };
    save(&model, &exemplars, &history)?;

    for session in history.len() + 1..=stream.sessions.len() {
        let out = run_incremental_session(&ctx, session, &model, &exemplars)?;
        model = out.model;
        exemplars = out.exemplars;
        history.push(out.metrics);
        save(&model, &exemplars, &history)?;
    }

    let report = RunReport::from_sessions(history, config.clone(), audit.files())?;
    if !options.in_memory {
        write_text(&paths.report(), &serde_json::to_string_pretty(&report)?)?;
        write_text(
            &paths.plot(),
            &accuracy_svg(&format!("seed {}", config.seed), &report.sessions),
        )?;
    }
    Ok(report)
}

/// Reads a stored `report.json`.
pub fn load_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e))
}
