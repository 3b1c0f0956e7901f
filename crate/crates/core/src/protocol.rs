//! Session curriculum: a base session followed by disjoint N-way K-shot
//! sessions, each carrying a labeled support set and an unlabeled pool drawn
//! from the leftovers of the same classes.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeedTree;
use crate::{ClassId, SampleId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: SampleId,
    pub input: Vec<f64>,
    pub label: ClassId,
}

/// An unlabeled pool entry. The ground-truth label is deliberately absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnlabeledItem {
    pub id: SampleId,
    pub input: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub samples: Vec<Sample>,
    pub class_count: usize,
}

impl DatasetManifest {
    /// Builds a manifest, assigning sample ids in input order.
    pub fn new(name: impl Into<String>, rows: Vec<(Vec<f64>, ClassId)>, class_count: usize) -> Result<Self> {
        let samples = rows
            .into_iter()
            .enumerate()
            .map(|(id, (input, label))| Sample { id, input, label })
            .collect();
        let manifest = Self {
            name: name.into(),
            samples,
            class_count,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.class_count == 0 {
            return Err(Error::Config("manifest must declare at least one class".into()));
        }
        let dim = self.dimension();
        let mut counts = vec![0usize; self.class_count];
        for s in &self.samples {
            if s.label >= self.class_count {
                return Err(Error::ClassConfig {
                    class: s.label,
                    reason: format!("label out of range (class_count = {})", self.class_count),
                });
            }
            if s.input.len() != dim {
                return Err(Error::Contract(format!(
                    "sample {} has dimension {} but manifest dimension is {dim}",
                    s.id,
                    s.input.len()
                )));
            }
            if s.input.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!("sample {} has a non-finite entry", s.id)));
            }
            counts[s.label] += 1;
        }
        if let Some(class) = counts.iter().position(|&c| c == 0) {
            return Err(Error::ClassConfig {
                class,
                reason: "class has no samples".into(),
            });
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.samples.first().map_or(0, |s| s.input.len())
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.class_count];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Reads a columnar text file: one row per sample, comma separated,
    /// flattened input followed by an integer label. A non-numeric first row is
    /// treated as a header.
    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_path(path)
            .map_err(|e| Error::parse(path, e))?;
        let mut rows = Vec::new();
        for (index, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::parse(path, e))?;
            let line = record.position().map_or(index as u64 + 1, |p| p.line());
            if record.len() < 2 {
                return Err(Error::parse(
                    path,
                    format!("line {line}: need at least one feature and a label"),
                ));
            }
            let label = record[record.len() - 1].parse::<usize>();
            let input: std::result::Result<Vec<f64>, _> = record.iter().take(record.len() - 1).map(str::parse::<f64>).collect();
            match (input, label) {
                (Ok(input), Ok(label)) => rows.push((input, label)),
                _ if index == 0 => continue,
                _ => return Err(Error::parse(path, format!("line {line}: malformed row"))),
            }
        }
        let class_count = rows.iter().map(|(_, l)| l + 1).max().unwrap_or(0);
        let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::new(name, rows, class_count)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e))?;
        for s in &self.samples {
            let mut record: Vec<String> = s.input.iter().map(f64::to_string).collect();
            record.push(s.label.to_string());
            writer.write_record(&record).map_err(|e| Error::parse(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a directory of per-class tensor files named `<class-id>.bin`.
    ///
    /// File layout (little endian): magic `SFT1`, `u32` sample count, `u32`
    /// flattened dimension, then `count * dim` `f32` values row-major.
    pub fn from_tensor_dir(dir: &Path) -> Result<Self> {
        let mut per_class: BTreeMap<ClassId, Vec<Vec<f64>>> = BTreeMap::new();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some("bin") {
                continue;
            }
            let class: ClassId = path
                .file_stem()
                .and_then(|s| s.to_str())
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::parse(&path, "file name must be <class-id>.bin"))?;
            per_class.insert(class, read_tensor_file(&path)?);
        }
        let class_count = per_class.keys().next_back().map_or(0, |c| c + 1);
        let rows = per_class
            .into_iter()
            .flat_map(|(class, rows)| rows.into_iter().map(move |r| (r, class)))
            .collect();
        let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::new(name, rows, class_count)
    }

    pub fn write_tensor_dir(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let dim = self.dimension();
        for class in 0..self.class_count {
            let rows: Vec<&Sample> = self.samples.iter().filter(|s| s.label == class).collect();
            let mut bytes = Vec::with_capacity(12 + rows.len() * dim * 4);
            bytes.extend_from_slice(TENSOR_MAGIC);
            bytes.extend_from_slice(&(rows.len() as u32).to_le_bytes());
            bytes.extend_from_slice(&(dim as u32).to_le_bytes());
            for s in rows {
                for &v in &s.input {
                    bytes.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
            let path = dir.join(format!("{class}.bin"));
            fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

const TENSOR_MAGIC: &[u8; 4] = b"SFT1";

fn read_tensor_file(path: &Path) -> Result<Vec<Vec<f64>>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 12 || &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::parse(path, "missing SFT1 header"));
    }
    let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let (count, dim) = (word(4), word(8));
    let body = &bytes[12..];
    if body.len() != count * dim * 4 {
        return Err(Error::parse(
            path,
            format!("expected {count}x{dim} f32 values, found {} bytes", body.len()),
        ));
    }
    Ok(body
        .chunks_exact(dim * 4)
        .map(|row| {
            row.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect()
        })
        .collect())
}

/// Gaussian blobs with unit covariance. Class means sit on scaled basis
/// vectors when `class_count <= dimension` (all pairwise distances equal
/// `separation`), otherwise on a lattice with spacing `separation`.
pub fn synthetic_manifest(
    class_count: usize,
    samples_per_class: usize,
    dimension: usize,
    separation: f64,
    seed: u64,
) -> Result<DatasetManifest> {
    if class_count == 0 || samples_per_class == 0 || dimension == 0 {
        return Err(Error::Config("synthetic manifest arguments must be positive".into()));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::Config(format!("separation must be positive, got {separation}")));
    }
    let means = class_means(class_count, dimension, separation);
    let mut rng = SeedTree::new(seed).rng("synthetic", 0);
    let mut rows = Vec::with_capacity(class_count * samples_per_class);
    for (class, mean) in means.iter().enumerate() {
        for _ in 0..samples_per_class {
            let input = mean
                .iter()
                .map(|m| m + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                .collect();
            rows.push((input, class));
        }
    }
    DatasetManifest::new(
        format!("synthetic-{class_count}x{samples_per_class}-d{dimension}"),
        rows,
        class_count,
    )
}

fn class_means(class_count: usize, dimension: usize, separation: f64) -> Vec<Vec<f64>> {
    if class_count <= dimension && class_count > 1 {
        let scale = separation / std::f64::consts::SQRT_2;
        return (0..class_count)
            .map(|c| (0..dimension).map(|d| if d == c { scale } else { 0.0 }).collect())
            .collect();
    }
    let mut side = 1usize;
    while side.pow(dimension.min(32) as u32) < class_count {
        side += 1;
    }
    (0..class_count)
        .map(|c| {
            let mut rest = c;
            let mut mean = vec![0.0; dimension];
            for slot in mean.iter_mut() {
                *slot = (rest % side) as f64 * separation;
                rest /= side;
            }
            mean
        })
        .collect()
}

fn default_train_fraction() -> f64 {
    5.0 / 6.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub base_class_count: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub session_count: usize,
    pub unlabeled_pool_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Per-class fraction of samples assigned to training before sessions are
    /// assembled; the remainder is the test split.
    #[serde(default = "default_train_fraction")]
    pub train_fraction: f64,
    /// Mix leftovers of classes outside the session into its unlabeled pool.
    #[serde(default)]
    pub cross_session_distractors: bool,
}

impl ProtocolConfig {
    pub fn required_classes(&self) -> usize {
        self.base_class_count + self.session_count.saturating_sub(1) * self.n_way
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_class_count == 0 || self.n_way == 0 || self.k_shot == 0 || self.session_count == 0 {
            return Err(Error::Config(
                "base_class_count, n_way, k_shot and session_count must all be positive".into(),
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1], got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }

    pub fn classes_of_session(&self, index: usize) -> std::ops::Range<ClassId> {
        if index == 1 {
            0..self.base_class_count
        } else {
            let start = self.base_class_count + (index - 2) * self.n_way;
            start..start + self.n_way
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSpec {
    pub index: usize,
    pub class_ids: Vec<ClassId>,
    pub labeled: Vec<Sample>,
    pub unlabeled_pool: Vec<UnlabeledItem>,
    pub test_set: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionStream {
    pub config: ProtocolConfig,
    pub sessions: Vec<SessionSpec>,
}

impl SessionStream {
    pub fn base(&self) -> &SessionSpec {
        &self.sessions[0]
    }

    pub fn base_classes(&self) -> &[ClassId] {
        &self.sessions[0].class_ids
    }

    /// All classes of sessions `1..=index`.
    pub fn seen_classes(&self, index: usize) -> Vec<ClassId> {
        self.sessions[..index]
            .iter()
            .flat_map(|s| s.class_ids.iter().copied())
            .collect()
    }

    /// Per-feature standard deviation over the base session's labeled data.
    pub fn base_feature_std(&self) -> Vec<f64> {
        let data = &self.base().labeled;
        let dim = data.first().map_or(0, |s| s.input.len());
        let n = data.len().max(1) as f64;
        let mut mean = vec![0.0; dim];
        for s in data {
            for (m, v) in mean.iter_mut().zip(&s.input) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for s in data {
            for ((acc, v), m) in var.iter_mut().zip(&s.input).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        var.into_iter().map(|v| (v / n).sqrt()).collect()
    }

    pub fn index(&self) -> StreamIndex {
        StreamIndex {
            config: self.config.clone(),
            sessions: self
                .sessions
                .iter()
                .map(|s| SessionIndex {
                    index: s.index,
                    class_ids: s.class_ids.clone(),
                    labeled: s.labeled.iter().map(|x| x.id).collect(),
                    unlabeled: s.unlabeled_pool.iter().map(|x| x.id).collect(),
                    test: s.test_set.iter().map(|x| x.id).collect(),
                })
                .collect(),
        }
    }

    pub fn write_index(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.index())?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }
}

/// Sample ids per session and role, for reproducibility audits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamIndex {
    pub config: ProtocolConfig,
    pub sessions: Vec<SessionIndex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionIndex {
    pub index: usize,
    pub class_ids: Vec<ClassId>,
    pub labeled: Vec<SampleId>,
    pub unlabeled: Vec<SampleId>,
    pub test: Vec<SampleId>,
}

struct ClassSplit {
    train: Vec<usize>,
    test: Vec<usize>,
}

pub fn build_benchmark(manifest: &DatasetManifest, config: &ProtocolConfig) -> Result<SessionStream> {
    config.validate()?;
    manifest.validate()?;
    let required = config.required_classes();
    if required > manifest.class_count {
        return Err(Error::Config(format!(
            "protocol needs {required} classes ({} base + {} x {}-way) but manifest '{}' has {}",
            config.base_class_count,
            config.session_count - 1,
            config.n_way,
            manifest.name,
            manifest.class_count
        )));
    }

    let seeds = SeedTree::new(config.seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); manifest.class_count];
    for (pos, s) in manifest.samples.iter().enumerate() {
        by_class[s.label].push(pos);
    }
    let splits: Vec<ClassSplit> = by_class
        .into_iter()
        .enumerate()
        .map(|(class, mut members)| {
            members.shuffle(&mut seeds.rng("split", class as u64));
            let n = members.len();
            let n_train = ((n as f64 * config.train_fraction - 1e-9).ceil() as usize).clamp(1, n);
            let test = members.split_off(n_train);
            ClassSplit { train: members, test }
        })
        .collect();

    let sample = |pos: usize| manifest.samples[pos].clone();
    let mut leftovers: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    let mut shots: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for index in 2..=config.session_count {
        for class in config.classes_of_session(index) {
            let train = &splits[class].train;
            if train.len() < config.k_shot {
                return Err(Error::ClassConfig {
                    class,
                    reason: format!(
                        "needs {} training samples for {}-shot, has {}",
                        config.k_shot,
                        config.k_shot,
                        train.len()
                    ),
                });
            }
            shots.insert(class, train[..config.k_shot].to_vec());
            leftovers.insert(class, train[config.k_shot..].to_vec());
        }
    }

    let mut sessions = Vec::with_capacity(config.session_count);
    let mut test_set: Vec<Sample> = Vec::new();
    for index in 1..=config.session_count {
        let class_ids: Vec<ClassId> = config.classes_of_session(index).collect();
        for &c in &class_ids {
            test_set.extend(splits[c].test.iter().map(|&p| sample(p)));
        }
        let (labeled, unlabeled_pool) = if index == 1 {
            let labeled = class_ids
                .iter()
                .flat_map(|&c| splits[c].train.iter().map(|&p| sample(p)))
                .collect();
            (labeled, Vec::new())
        } else {
            let labeled = class_ids.iter().flat_map(|&c| shots[&c].iter().map(|&p| sample(p))).collect();
            let mut candidates: Vec<usize> = class_ids.iter().flat_map(|c| leftovers[c].iter().copied()).collect();
            if config.cross_session_distractors {
                let own: BTreeSet<ClassId> = class_ids.iter().copied().collect();
                for (class, split) in splits.iter().enumerate() {
                    if own.contains(&class) {
                        continue;
                    }
                    match leftovers.get(&class) {
                        Some(rest) => candidates.extend(rest),
                        None => candidates.extend(&split.train),
                    }
                }
            }
            candidates.shuffle(&mut seeds.rng("pool", index as u64));
            candidates.truncate(config.unlabeled_pool_size);
            let pool = candidates
                .into_iter()
                .map(|p| UnlabeledItem {
                    id: manifest.samples[p].id,
                    input: manifest.samples[p].input.clone(),
                })
                .collect();
            (labeled, pool)
        };
        sessions.push(SessionSpec {
            index,
            class_ids,
            labeled,
            unlabeled_pool,
            test_set: test_set.clone(),
        });
    }
    Ok(SessionStream {
        config: config.clone(),
        sessions,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(base: usize, way: usize, shot: usize, sessions: usize, pool: usize) -> ProtocolConfig {
        ProtocolConfig {
            base_class_count: base,
            n_way: way,
            k_shot: shot,
            session_count: sessions,
            unlabeled_pool_size: pool,
            seed: 3,
            train_fraction: 5.0 / 6.0,
            cross_session_distractors: false,
        }
    }

    #[test]
    fn cifar_shaped_curriculum() {
        let m = synthetic_manifest(100, 12, 2, 4.0, 0).unwrap();
        let s = build_benchmark(&m, &config(60, 5, 5, 9, 100)).unwrap();
        assert_eq!(s.sessions.len(), 9);
        for sess in &s.sessions[1..] {
            assert_eq!(sess.labeled.len(), 25);
        }
    }

    #[test]
    fn cub_shaped_curriculum() {
        let m = synthetic_manifest(200, 8, 2, 4.0, 0).unwrap();
        let s = build_benchmark(&m, &config(100, 10, 5, 11, 50)).unwrap();
        assert_eq!(s.sessions.len(), 11);
        for sess in &s.sessions[1..] {
            assert_eq!(sess.labeled.len(), 50);
        }
    }

    #[test]
    fn single_session_has_no_pool() {
        let m = synthetic_manifest(4, 6, 2, 4.0, 0).unwrap();
        let s = build_benchmark(&m, &config(4, 2, 5, 1, 100)).unwrap();
        assert_eq!(s.sessions.len(), 1);
        assert!(s.sessions[0].unlabeled_pool.is_empty());
        assert_eq!(s.sessions[0].labeled.len(), 4 * 5);
    }

    #[test]
    fn class_budget_is_checked() {
        let m = synthetic_manifest(10, 6, 2, 4.0, 0).unwrap();
        let err = build_benchmark(&m, &config(6, 3, 1, 3, 0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn shot_shortage_names_the_class() {
        let mut rows: Vec<(Vec<f64>, ClassId)> = (0..3).flat_map(|c| (0..12).map(move |_| (vec![c as f64], c))).collect();
        rows.retain(|(_, c)| *c != 2);
        rows.push((vec![2.0], 2));
        rows.push((vec![2.0], 2));
        let m = DatasetManifest::new("short", rows, 3).unwrap();
        match build_benchmark(&m, &config(1, 1, 5, 3, 10)).unwrap_err() {
            Error::ClassConfig { class, .. } => assert_eq!(class, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn minimal_manifest() {
        let m = synthetic_manifest(1, 1, 1, 1.0, 0).unwrap();
        assert_eq!(m.samples.len(), 1);
        assert_eq!(m.samples[0].label, 0);
        let m = synthetic_manifest(10, 60, 2, 8.0, 0).unwrap();
        assert_eq!(m.samples.len(), 600);
    }

    #[test]
    fn manifest_rejects_empty_class() {
        let err = DatasetManifest::new("gap", vec![(vec![0.0], 0), (vec![1.0], 2)], 3).unwrap_err();
        assert!(matches!(err, Error::ClassConfig { class: 1, .. }));
    }

    #[test]
    fn distractors_only_when_enabled() {
        let m = synthetic_manifest(8, 12, 2, 4.0, 0).unwrap();
        let mut cfg = config(4, 2, 2, 3, 1000);
        let plain = build_benchmark(&m, &cfg).unwrap();
        let label_of = |id: SampleId| m.samples[id].label;
        for sess in &plain.sessions[1..] {
            assert!(sess.unlabeled_pool.iter().all(|u| sess.class_ids.contains(&label_of(u.id))));
        }
        cfg.cross_session_distractors = true;
        let mixed = build_benchmark(&m, &cfg).unwrap();
        let s2 = &mixed.sessions[1];
        assert!(s2.unlabeled_pool.iter().any(|u| !s2.class_ids.contains(&label_of(u.id))));
        let own: BTreeSet<_> = s2.labeled.iter().map(|x| x.id).collect();
        assert!(s2.unlabeled_pool.iter().all(|u| !own.contains(&u.id)));
    }
}
