//! Model contract: backbone (feature extractor), linear classification head
//! over the classes seen so far, and a frozen mask over backbone groups.

mod backbone;
mod dense;
mod nme;
mod optim;

pub use backbone::{Activation, Backbone, BackboneSpec, FeatureExtractor, GroupGrads, Mlp};
pub use dense::Dense;
pub use nme::{compute_prototypes, compute_prototypes_from, nme_classify, nme_classify_with, NmeOptions, PrototypeTable};
pub use optim::{Sgd, SgdConfig};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::loss::softmax;
use crate::ClassId;

/// Standard deviation of freshly added head rows.
pub const HEAD_INIT_SCALE: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionDistribution {
    pub probs: Vec<f64>,
}

impl PredictionDistribution {
    /// Index of the largest probability; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamLocation {
    Backbone { group: usize, tensor: usize },
    Head { tensor: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub backbone: GroupGrads,
    pub head: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, loc: ParamLocation) -> &[f64] {
        match loc {
            ParamLocation::Backbone { group, tensor } => &self.backbone[group][tensor],
            ParamLocation::Head { tensor } => &self.head[tensor],
        }
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Vec<f64>> {
        self.backbone.iter_mut().flatten().chain(self.head.iter_mut())
    }

    fn tensors(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.backbone.iter().flatten().chain(self.head.iter())
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors_mut().flatten().for_each(|g| *g *= s);
    }

    pub fn add_scaled(&mut self, other: &Gradients, s: f64) {
        for (a, b) in self.tensors_mut().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += s * y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().flatten().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    backbone: Backbone,
    head: Dense,
    classes: Vec<ClassId>,
    frozen: Vec<bool>,
}

impl ModelState {
    pub fn new<R: Rng + ?Sized>(spec: &BackboneSpec, input_dim: usize, classes: &[ClassId], rng: &mut R) -> Result<Self> {
        let backbone = spec.build(input_dim, rng)?;
        let mut head = Dense::zeros(backbone.feature_dim(), 0);
        head.append_rows(classes.len(), HEAD_INIT_SCALE, rng);
        Self::from_parts(backbone, head, classes.to_vec())
    }

    pub fn from_parts(backbone: Backbone, head: Dense, classes: Vec<ClassId>) -> Result<Self> {
        if head.inputs != backbone.feature_dim() || head.outputs != classes.len() {
            return Err(Error::Contract(format!(
                "head is {}x{} but backbone emits {} features for {} classes",
                head.outputs,
                head.inputs,
                backbone.feature_dim(),
                classes.len()
            )));
        }
        let frozen = vec![false; backbone.group_count()];
        Ok(Self {
            backbone,
            head,
            classes,
            frozen,
        })
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn head(&self) -> &Dense {
        &self.head
    }

    /// Known classes in head-row order.
    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn class_index(&self, class: ClassId) -> Option<usize> {
        self.classes.iter().position(|&c| c == class)
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.backbone.input_dim()
    }

    pub fn group_count(&self) -> usize {
        self.backbone.group_count()
    }

    pub fn frozen_mask(&self) -> &[bool] {
        &self.frozen
    }

    /// Index of the first backbone group that receives updates.
    pub fn first_trainable_group(&self) -> usize {
        self.frozen.iter().take_while(|f| **f).count()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Contract(format!(
                "input has dimension {}, model expects {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Head logits for one input. Caller guarantees the input dimension.
    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.head.forward(&self.backbone.features(x))
    }

    pub fn logits_batch<I: AsRef<[f64]> + Sync>(&self, exec: Execution, batch: &[I]) -> Result<Vec<Vec<f64>>> {
        exec.try_map(batch, |x| {
            let x = x.as_ref();
            self.check_input(x)?;
            Ok(self.logits(x))
        })
    }

    pub fn forward<I: AsRef<[f64]> + Sync>(&self, batch: &[I]) -> Result<Vec<PredictionDistribution>> {
        self.forward_with(Execution::default(), batch)
    }

    pub fn forward_with<I: AsRef<[f64]> + Sync>(&self, exec: Execution, batch: &[I]) -> Result<Vec<PredictionDistribution>> {
        Ok(self
            .logits_batch(exec, batch)?
            .into_iter()
            .map(|z| PredictionDistribution { probs: softmax(&z) })
            .collect())
    }

    pub fn extract_features<I: AsRef<[f64]> + Sync>(&self, batch: &[I]) -> Result<Vec<Vec<f64>>> {
        self.extract_features_with(Execution::default(), batch)
    }

    pub fn extract_features_with<I: AsRef<[f64]> + Sync>(&self, exec: Execution, batch: &[I]) -> Result<Vec<Vec<f64>>> {
        exec.try_map(batch, |x| {
            let x = x.as_ref();
            self.check_input(x)?;
            Ok(self.backbone.features(x))
        })
    }

    /// Adds one head row per new class; existing rows are untouched.
    pub fn expand_head<R: Rng + ?Sized>(&mut self, new_classes: &[ClassId], rng: &mut R) -> Result<()> {
        for c in new_classes {
            if self.classes.contains(c) || new_classes.iter().filter(|d| *d == c).count() > 1 {
                return Err(Error::Contract(format!("class {c} is already known to the head")));
            }
        }
        self.head.append_rows(new_classes.len(), HEAD_INIT_SCALE, rng);
        self.classes.extend_from_slice(new_classes);
        Ok(())
    }

    /// Freezes backbone groups `0..group_count`; later groups become trainable.
    pub fn freeze_front_layers(&mut self, group_count: usize) -> Result<()> {
        if group_count > self.group_count() {
            return Err(Error::Config(format!(
                "cannot freeze {group_count} groups, backbone has {}",
                self.group_count()
            )));
        }
        for (g, f) in self.frozen.iter_mut().enumerate() {
            *f = g < group_count;
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            backbone: self.backbone.zero_grads(),
            head: self.head.zero_grad(),
        }
    }

    /// Backpropagates `dL/dlogits` for one input into `grads`. Frozen front
    /// groups receive no gradient.
    pub fn accumulate_gradient(&self, x: &[f64], dlogits: &[f64], grads: &mut Gradients) {
        let trace = self.backbone.trace(x);
        let dfeat = self.head.backward(trace.last().unwrap(), dlogits, &mut grads.head);
        let first = self.first_trainable_group();
        if first < self.group_count() {
            self.backbone.backward(&trace, &dfeat, &mut grads.backbone, first);
        }
    }

    /// Every parameter tensor, in a fixed order.
    pub fn parameter_locations(&self) -> Vec<ParamLocation> {
        let mut locs = Vec::new();
        for group in 0..self.group_count() {
            for tensor in 0..self.backbone.group_tensors(group).len() {
                locs.push(ParamLocation::Backbone { group, tensor });
            }
        }
        locs.push(ParamLocation::Head { tensor: 0 });
        locs.push(ParamLocation::Head { tensor: 1 });
        locs
    }

    pub fn is_trainable(&self, loc: ParamLocation) -> bool {
        match loc {
            ParamLocation::Backbone { group, .. } => !self.frozen[group],
            ParamLocation::Head { .. } => true,
        }
    }

    pub fn param(&self, loc: ParamLocation) -> &[f64] {
        match loc {
            ParamLocation::Backbone { group, tensor } => self.backbone.group_tensors(group)[tensor],
            ParamLocation::Head { tensor } => self.head.tensors()[tensor],
        }
    }

    pub fn param_mut(&mut self, loc: ParamLocation) -> &mut [f64] {
        match loc {
            ParamLocation::Backbone { group, tensor } => self.backbone.group_tensors_mut(group).swap_remove(tensor),
            ParamLocation::Head { tensor } => {
                let [w, b] = self.head.tensors_mut();
                if tensor == 0 {
                    w
                } else {
                    b
                }
            }
        }
    }

    /// Flattened copy of one backbone group, for bit-identity checks.
    pub fn group_snapshot(&self, group: usize) -> Vec<f64> {
        self.backbone.group_tensors(group).concat()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeedTree;

    fn toy(classes: &[ClassId]) -> ModelState {
        let spec = BackboneSpec::Mlp {
            hidden: vec![6, 5],
            feature_dim: 4,
            activation: Activation::Relu,
        };
        ModelState::new(&spec, 3, classes, &mut SeedTree::new(1).rng("init", 0)).unwrap()
    }

    #[test]
    fn forward_yields_distributions_in_order() {
        let m = toy(&[0, 1]);
        let batch = vec![vec![0.1, 0.2, 0.3], vec![-1.0, 2.0, 0.5], vec![0.1, 0.2, 0.3]];
        let out = m.forward(&batch).unwrap();
        assert_eq!(out.len(), 3);
        for d in &out {
            assert_eq!(d.probs.len(), 2);
            assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(d.probs.iter().all(|p| *p > 0.0));
        }
        assert_eq!(out[0], out[2]);
        assert_eq!(m.forward_with(Execution::Sequential, &batch).unwrap(), out);
    }

    #[test]
    fn shape_mismatch_is_a_contract_error() {
        let m = toy(&[0, 1]);
        assert!(matches!(m.forward(&[vec![1.0, 2.0]]), Err(Error::Contract(_))));
        assert!(matches!(m.extract_features(&[vec![1.0; 4]]), Err(Error::Contract(_))));
    }

    #[test]
    fn features_have_configured_width() {
        let spec = BackboneSpec::Mlp {
            hidden: vec![16],
            feature_dim: 512,
            activation: Activation::Relu,
        };
        let m = ModelState::new(&spec, 3, &[0], &mut SeedTree::new(1).rng("init", 0)).unwrap();
        assert_eq!(m.extract_features(&[vec![0.5; 3]]).unwrap()[0].len(), 512);
        let m = toy(&[0]);
        let f = m.extract_features(&[vec![0.5; 3], vec![0.5; 3]]).unwrap();
        assert_eq!(f[0].len(), 4);
        assert_eq!(f[0], f[1]);
    }

    #[test]
    fn expansion_preserves_old_logits() {
        let mut rng = SeedTree::new(2).rng("expand", 0);
        let base = toy(&(0..6).collect::<Vec<_>>());
        let x = [0.3, -0.7, 1.1];
        let before = base.logits(&x);

        let mut once = base.clone();
        once.expand_head(&[6, 7, 8, 9, 10], &mut rng).unwrap();
        assert_eq!(once.classes().len(), 11);
        assert_eq!(&once.logits(&x)[..6], &before[..]);

        let mut same = base.clone();
        same.expand_head(&[], &mut rng).unwrap();
        assert_eq!(same, base);

        let mut twice = base.clone();
        twice.expand_head(&[6, 7], &mut rng).unwrap();
        twice.expand_head(&[8, 9], &mut rng).unwrap();
        let mut single = base.clone();
        single.expand_head(&[6, 7, 8, 9], &mut rng).unwrap();
        let old = base.head().weight.len();
        assert_eq!(twice.head().weight[..old], single.head().weight[..old]);
        assert_eq!(twice.head().bias[6..], [0.0; 4]);
        assert!(once.expand_head(&[3], &mut rng).is_err());
    }

    #[test]
    fn freezing_is_bounded() {
        let mut m = toy(&[0, 1]);
        assert_eq!(m.group_count(), 3);
        m.freeze_front_layers(2).unwrap();
        assert_eq!(m.frozen_mask(), &[true, true, false]);
        assert_eq!(m.first_trainable_group(), 2);
        m.freeze_front_layers(0).unwrap();
        assert_eq!(m.frozen_mask(), &[false, false, false]);
        assert!(matches!(m.freeze_front_layers(4), Err(Error::Config(_))));
    }

    #[test]
    fn resnet_is_config_only() {
        let spec = BackboneSpec::Resnet18 { feature_dim: 512 };
        let err = ModelState::new(&spec, 3, &[0], &mut SeedTree::new(1).rng("init", 0)).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
