//! Pluggable feature extractors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::dense::Dense;
use crate::error::{Error, Result};

/// Per-group, per-tensor flat gradients.
pub type GroupGrads = Vec<Vec<Vec<f64>>>;

/// The contract a backbone fulfils for the model, the trainer and the
/// gradient checker. Parameters are organised in ordered groups; freezing
/// acts on a prefix of groups.
pub trait FeatureExtractor {
    fn input_dim(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn group_count(&self) -> usize;

    fn features(&self, x: &[f64]) -> Vec<f64>;

    /// Forward pass keeping intermediate activations; the last entry is the
    /// feature vector.
    fn trace(&self, x: &[f64]) -> Vec<Vec<f64>>;

    /// Accumulates parameter gradients for groups `first_group..` given
    /// `dL/dfeatures`. Groups below `first_group` are left untouched.
    fn backward(&self, trace: &[Vec<f64>], dfeat: &[f64], grads: &mut GroupGrads, first_group: usize);

    fn group_tensors(&self, group: usize) -> Vec<&[f64]>;
    fn group_tensors_mut(&mut self, group: usize) -> Vec<&mut [f64]>;
    fn zero_grads(&self) -> GroupGrads;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation output.
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
        }
    }
}

/// Multi-layer perceptron; each dense layer (with its activation) is one
/// parameter group and the last layer's output is the feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        hidden: &[usize],
        feature_dim: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let mut widths = vec![input_dim];
        widths.extend_from_slice(hidden);
        widths.push(feature_dim);
        let layers = widths.windows(2).map(|w| Dense::he(w[0], w[1], rng)).collect();
        Self { layers, activation }
    }
}

impl FeatureExtractor for Mlp {
    fn input_dim(&self) -> usize {
        self.layers[0].inputs
    }

    fn feature_dim(&self) -> usize {
        self.layers.last().unwrap().outputs
    }

    fn group_count(&self) -> usize {
        self.layers.len()
    }

    fn features(&self, x: &[f64]) -> Vec<f64> {
        self.layers.iter().fold(x.to_vec(), |h, layer| {
            layer.forward(&h).into_iter().map(|v| self.activation.apply(v)).collect()
        })
    }

    fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_vec());
        for layer in &self.layers {
            let h = layer.forward(acts.last().unwrap());
            acts.push(h.into_iter().map(|v| self.activation.apply(v)).collect());
        }
        acts
    }

    fn backward(&self, trace: &[Vec<f64>], dfeat: &[f64], grads: &mut GroupGrads, first_group: usize) {
        let mut upstream = dfeat.to_vec();
        for g in (first_group..self.layers.len()).rev() {
            let out = &trace[g + 1];
            let dz: Vec<f64> = upstream
                .iter()
                .zip(out)
                .map(|(d, &y)| d * self.activation.derivative_from_output(y))
                .collect();
            upstream = self.layers[g].backward(&trace[g], &dz, &mut grads[g]);
        }
    }

    fn group_tensors(&self, group: usize) -> Vec<&[f64]> {
        self.layers[group].tensors().to_vec()
    }

    fn group_tensors_mut(&mut self, group: usize) -> Vec<&mut [f64]> {
        self.layers[group].tensors_mut().into_iter().collect()
    }

    fn zero_grads(&self) -> GroupGrads {
        self.layers.iter().map(Dense::zero_grad).collect()
    }
}

/// Backbone selection as written in experiment configs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackboneSpec {
    Mlp {
        hidden: Vec<usize>,
        #[serde(default = "default_feature_dim")]
        feature_dim: usize,
        #[serde(default)]
        activation: Activation,
    },
    /// Accepted in configs so full-scale presets parse; this build has no
    /// convolutional runtime, so instantiating it is a configuration error.
    Resnet18 {
        #[serde(default = "default_feature_dim")]
        feature_dim: usize,
    },
}

fn default_feature_dim() -> usize {
    512
}

impl BackboneSpec {
    pub fn feature_dim(&self) -> usize {
        match self {
            BackboneSpec::Mlp { feature_dim, .. } | BackboneSpec::Resnet18 { feature_dim } => *feature_dim,
        }
    }

    pub fn build<R: Rng + ?Sized>(&self, input_dim: usize, rng: &mut R) -> Result<Backbone> {
        match self {
            BackboneSpec::Mlp {
                hidden,
                feature_dim,
                activation,
            } => {
                if *feature_dim == 0 || hidden.contains(&0) || input_dim == 0 {
                    return Err(Error::Config("backbone widths must be positive".into()));
                }
                Ok(Backbone::Mlp(Mlp::new(input_dim, hidden, *feature_dim, *activation, rng)))
            }
            BackboneSpec::Resnet18 { .. } => Err(Error::Config(
                "resnet18 backbone is not available in this build; use kind = \"mlp\"".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Backbone {
    Mlp(Mlp),
}

impl Backbone {
    fn inner(&self) -> &dyn FeatureExtractor {
        match self {
            Backbone::Mlp(m) => m,
        }
    }

    fn inner_mut(&mut self) -> &mut dyn FeatureExtractor {
        match self {
            Backbone::Mlp(m) => m,
        }
    }
}

impl FeatureExtractor for Backbone {
    fn input_dim(&self) -> usize {
        self.inner().input_dim()
    }
    fn feature_dim(&self) -> usize {
        self.inner().feature_dim()
    }
    fn group_count(&self) -> usize {
        self.inner().group_count()
    }
    fn features(&self, x: &[f64]) -> Vec<f64> {
        self.inner().features(x)
    }
    fn trace(&self, x: &[f64]) -> Vec<Vec<f64>> {
        self.inner().trace(x)
    }
    fn backward(&self, trace: &[Vec<f64>], dfeat: &[f64], grads: &mut GroupGrads, first_group: usize) {
        self.inner().backward(trace, dfeat, grads, first_group)
    }
    fn group_tensors(&self, group: usize) -> Vec<&[f64]> {
        self.inner().group_tensors(group)
    }
    fn group_tensors_mut(&mut self, group: usize) -> Vec<&mut [f64]> {
        self.inner_mut().group_tensors_mut(group)
    }
    fn zero_grads(&self) -> GroupGrads {
        self.inner().zero_grads()
    }
}
