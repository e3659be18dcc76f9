//! Sequential models and class prediction.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::{forward_layer, LayerSpec};
use crate::scalar::Scalar;
use crate::tensor::{check_shape, Tensor, TensorError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("model must contain at least one layer")]
    NoLayers,
    #[error("layer `{layer}`: {reason}")]
    InvalidLayer { layer: String, reason: String },
    #[error("layer `{layer}` expects input {expected}, got {found:?}")]
    InputShape {
        layer: String,
        expected: String,
        found: Vec<usize>,
    },
    #[error("layer `{layer}` (#{index}) cannot follow `{previous}`: {source}")]
    Chain {
        index: usize,
        layer: String,
        previous: String,
        #[source]
        source: Box<ModelError>,
    },
    #[error("layer `{layer}`: alpha shape {alpha:?} does not broadcast to input shape {input:?}")]
    Broadcast {
        layer: String,
        alpha: Vec<usize>,
        input: Vec<usize>,
    },
    #[error("final layer `{layer}` produces shape {shape:?}; class scores must be rank-1")]
    FinalRank { layer: String, shape: Vec<usize> },
    #[error("input shape {found:?} does not match model input shape {expected:?}")]
    ModelInput {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("layer index {index} out of range for a model with {count} layers")]
    LayerIndex { index: usize, count: usize },
    #[error("class scores must be rank-1, got shape {0:?}")]
    ScoreRank(Vec<usize>),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Outcome of classifying one score vector.
///
/// Serialized as the class index, or `null` for an invalid prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "Option<usize>", into = "Option<usize>")]
pub enum Prediction {
    Class(usize),
    /// Every score was NaN. Counts as a misclassification everywhere.
    Invalid,
}

impl Prediction {
    pub fn class(self) -> Option<usize> {
        match self {
            Prediction::Class(c) => Some(c),
            Prediction::Invalid => None,
        }
    }

    /// True only for a valid prediction of `label`.
    pub fn matches_label(self, label: usize) -> bool {
        self == Prediction::Class(label)
    }

    /// True only when both predictions are valid and equal.
    pub fn agrees_with(self, reference: Prediction) -> bool {
        matches!((self, reference), (Prediction::Class(a), Prediction::Class(b)) if a == b)
    }
}

impl From<Option<usize>> for Prediction {
    fn from(value: Option<usize>) -> Self {
        value.map_or(Prediction::Invalid, Prediction::Class)
    }
}

impl From<Prediction> for Option<usize> {
    fn from(value: Prediction) -> Self {
        value.class()
    }
}

/// Argmax with ties going to the lowest index. NaN scores are skipped; if
/// nothing else is left the prediction is [`Prediction::Invalid`].
pub fn predict<T: Scalar>(scores: &Tensor<T>) -> Result<Prediction, ModelError> {
    if scores.rank() != 1 {
        return Err(ModelError::ScoreRank(scores.shape().to_vec()));
    }
    let mut best: Option<(usize, T)> = None;
    for (i, &s) in scores.data().iter().enumerate() {
        if s.is_nan() {
            continue;
        }
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    Ok(best.map_or(Prediction::Invalid, |(i, _)| Prediction::Class(i)))
}

/// An ordered chain of layers whose shapes have been checked end to end.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec<T>>,
    output_shapes: Vec<Vec<usize>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec<T>>) -> Result<Self, ModelError> {
        check_shape(&input_shape)?;
        if layers.is_empty() {
            return Err(ModelError::NoLayers);
        }
        let mut output_shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape.clone();
        for (index, layer) in layers.iter().enumerate() {
            current = layer.output_shape(&current).map_err(|source| {
                if index == 0 {
                    source
                } else {
                    ModelError::Chain {
                        index,
                        layer: layer.name.clone(),
                        previous: layers[index - 1].name.clone(),
                        source: Box::new(source),
                    }
                }
            })?;
            output_shapes.push(current.clone());
        }
        if current.len() != 1 {
            return Err(ModelError::FinalRank {
                layer: layers.last().unwrap().name.clone(),
                shape: current,
            });
        }
        Ok(Self {
            input_shape,
            layers,
            output_shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec<T>] {
        &self.layers
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn class_count(&self) -> usize {
        self.output_shapes.last().unwrap()[0]
    }

    pub fn output_shape(&self, layer: usize) -> Result<&[usize], ModelError> {
        self.check_index(layer)?;
        Ok(&self.output_shapes[layer])
    }

    /// Input shape of `layer` (the model input for layer 0).
    pub fn layer_input_shape(&self, layer: usize) -> Result<&[usize], ModelError> {
        self.check_index(layer)?;
        Ok(if layer == 0 {
            &self.input_shape
        } else {
            &self.output_shapes[layer - 1]
        })
    }

    pub(crate) fn check_index(&self, layer: usize) -> Result<(), ModelError> {
        if layer >= self.layers.len() {
            return Err(ModelError::LayerIndex {
                index: layer,
                count: self.layers.len(),
            });
        }
        Ok(())
    }

    /// First layer of the pass-through run that ends at `layer`: walks back
    /// over Flatten/Dropout layers, whose outputs hold the same values in the
    /// same positions as their predecessor's.
    pub fn value_origin(&self, layer: usize) -> usize {
        let mut origin = layer;
        while origin > 0 && self.layers[origin].is_pass_through() {
            origin -= 1;
        }
        origin
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(), ModelError> {
        if input.shape() != self.input_shape.as_slice() {
            return Err(ModelError::ModelInput {
                expected: self.input_shape.clone(),
                found: input.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Class scores for one input.
    pub fn forward(&self, input: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_input(input)?;
        self.run_range(0, self.layers.len(), input.clone())
    }

    /// Output of `layer`, computed by running layers `0..=layer`.
    pub fn head(&self, layer: usize, input: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_index(layer)?;
        self.check_input(input)?;
        self.run_range(0, layer + 1, input.clone())
    }

    /// Scores from running layers after `layer` on its output `activation`.
    pub fn tail_scores(&self, layer: usize, activation: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        self.check_index(layer)?;
        if activation.shape() != self.output_shapes[layer].as_slice() {
            return Err(ModelError::InputShape {
                layer: self.layers[layer].name.clone(),
                expected: format!("{:?} (output of this layer)", self.output_shapes[layer]),
                found: activation.shape().to_vec(),
            });
        }
        self.run_range(layer + 1, self.layers.len(), activation.clone())
    }

    /// Prediction from layers `layer + 1..` applied to `activation`.
    pub fn run_tail(&self, layer: usize, activation: &Tensor<T>) -> Result<Prediction, ModelError> {
        predict(&self.tail_scores(layer, activation)?)
    }

    fn run_range(&self, start: usize, end: usize, mut x: Tensor<T>) -> Result<Tensor<T>, ModelError> {
        for layer in &self.layers[start..end] {
            x = forward_layer(layer, &x)?;
        }
        Ok(x)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        use crate::layers::LayerKind as K;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let kind = match &l.kind {
                    K::Conv2D {
                        kernel,
                        bias,
                        stride,
                        padding,
                        activation,
                    } => K::Conv2D {
                        kernel: kernel.cast(),
                        bias: bias.cast(),
                        stride: *stride,
                        padding: *padding,
                        activation: *activation,
                    },
                    K::MaxPool2D { window, stride } => K::MaxPool2D {
                        window: *window,
                        stride: *stride,
                    },
                    K::Dense {
                        weights,
                        bias,
                        activation,
                    } => K::Dense {
                        weights: weights.cast(),
                        bias: bias.cast(),
                        activation: *activation,
                    },
                    K::Relu => K::Relu,
                    K::PRelu { alpha } => K::PRelu { alpha: alpha.cast() },
                    K::Softmax => K::Softmax,
                    K::Flatten => K::Flatten,
                    K::Dropout { rate } => K::Dropout { rate: *rate },
                };
                LayerSpec::new(l.name.clone(), kind)
            })
            .collect();
        Model {
            input_shape: self.input_shape.clone(),
            layers,
            output_shapes: self.output_shapes.clone(),
        }
    }
}
