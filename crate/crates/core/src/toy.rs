//! Seeded toy models and a matching synthetic dataset, so tests and demos
//! never need downloads.
//!
//! Samples are noisy copies of one random prototype image per class. The
//! convolutional layers keep random weights; the final dense layer is fitted
//! in closed form as a nearest-centroid classifier on the features it sees,
//! which makes the golden accuracy well above chance.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::Dataset;
use crate::layers::{Activation, LayerKind, LayerSpec, Padding};
use crate::model::{Model, ModelError};
use crate::tensor::Tensor;

pub const TOY_INPUT: [usize; 3] = [16, 16, 1];
const NOISE: f32 = 0.35;

#[derive(Debug, Clone, PartialEq)]
pub struct Toy {
    /// Twelve layers: conv, conv, pool, dropout, conv, conv, pool, dropout,
    /// flatten, dense, dropout, dense with softmax.
    pub cnn: Model<f32>,
    /// Small CNN with three PReLU layers, for operation-wise injection.
    pub prelu_cnn: Model<f32>,
    pub dataset: Dataset<f32>,
}

struct Gen(ChaCha8Rng);

impl Gen {
    fn unit(&mut self) -> f32 {
        (self.0.next_u32() >> 8) as f32 / (1u32 << 24) as f32
    }

    fn symmetric(&mut self, bound: f32) -> f32 {
        (self.unit() * 2.0 - 1.0) * bound
    }

    fn tensor(&mut self, shape: Vec<usize>, bound: f32) -> Tensor<f32> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.symmetric(bound)).collect();
        Tensor::new(shape, data).expect("generated shape")
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, activation: Activation) -> LayerSpec<f32> {
        let bound = (6.0 / (9 * cin) as f32).sqrt();
        LayerSpec::new(
            name,
            LayerKind::Conv2D {
                kernel: self.tensor(vec![3, 3, cin, cout], bound),
                bias: self.tensor(vec![cout], 0.05),
                stride: (1, 1),
                padding: Padding::Same,
                activation,
            },
        )
    }

    fn dense(&mut self, name: &str, n_in: usize, n_out: usize, activation: Activation) -> LayerSpec<f32> {
        let bound = (6.0 / n_in as f32).sqrt();
        LayerSpec::new(
            name,
            LayerKind::Dense {
                weights: self.tensor(vec![n_in, n_out], bound),
                bias: self.tensor(vec![n_out], 0.05),
                activation,
            },
        )
    }

    fn prelu(&mut self, name: &str, channels: usize) -> LayerSpec<f32> {
        let alpha = (0..channels).map(|_| 0.05 + 0.25 * self.unit()).collect();
        LayerSpec::new(
            name,
            LayerKind::PRelu {
                alpha: Tensor::from_vec(alpha).expect("non-empty"),
            },
        )
    }
}

fn pool(name: &str) -> LayerSpec<f32> {
    LayerSpec::new(
        name,
        LayerKind::MaxPool2D {
            window: (2, 2),
            stride: (2, 2),
        },
    )
}

fn dropout(name: &str, rate: f64) -> LayerSpec<f32> {
    LayerSpec::new(name, LayerKind::Dropout { rate })
}

/// Replaces the last layer (a dense layer) with a nearest-centroid
/// classifier over the features entering it.
fn fit_last_dense(model: Model<f32>, dataset: &Dataset<f32>, activation: Activation) -> Result<Model<f32>, ModelError> {
    let last = model.layer_count() - 1;
    let feature_len = model.layer_input_shape(last)?[0];
    let classes = dataset.class_count();
    let labels = dataset.labels().expect("toy dataset is labelled");
    let mut sums = vec![vec![0f64; feature_len]; classes];
    let mut counts = vec![0usize; classes];
    for (x, &label) in dataset.samples().iter().zip(labels) {
        let features = model.head(last - 1, x)?;
        for (s, &f) in sums[label as usize].iter_mut().zip(features.data()) {
            *s += f64::from(f);
        }
        counts[label as usize] += 1;
    }
    let mut weights = vec![0f32; feature_len * classes];
    let mut bias = vec![0f32; classes];
    for (k, (sum, &count)) in sums.iter().zip(&counts).enumerate() {
        let centroid: Vec<f64> = sum.iter().map(|s| s / count.max(1) as f64).collect();
        for (i, c) in centroid.iter().enumerate() {
            weights[i * classes + k] = *c as f32;
        }
        bias[k] = (-0.5 * centroid.iter().map(|c| c * c).sum::<f64>()) as f32;
    }
    let mut layers = model.layers().to_vec();
    layers[last] = LayerSpec::new(
        layers[last].name.clone(),
        LayerKind::Dense {
            weights: Tensor::new(vec![feature_len, classes], weights)?,
            bias: Tensor::new(vec![classes], bias)?,
            activation,
        },
    );
    Model::new(model.input_shape().to_vec(), layers)
}

/// Generates the toy models and a labelled dataset of `samples` inputs over
/// `classes` classes (labels cycle through the classes).
///
/// # Panics
/// If `samples` or `classes` is zero.
pub fn generate_toy(seed: u64, samples: usize, classes: usize) -> Toy {
    assert!(samples > 0 && classes > 0, "toy dataset needs samples and classes");
    let mut data_gen = Gen(ChaCha8Rng::seed_from_u64(seed));
    let pixels: usize = TOY_INPUT.iter().product();
    let prototypes: Vec<Vec<f32>> = (0..classes)
        .map(|_| (0..pixels).map(|_| data_gen.unit()).collect())
        .collect();
    let mut inputs = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let label = i % classes;
        let data = prototypes[label].iter().map(|&p| p + data_gen.symmetric(NOISE)).collect();
        inputs.push(Tensor::new(TOY_INPUT.to_vec(), data).expect("input shape"));
        labels.push(label as u32);
    }
    let dataset = Dataset::new(inputs, Some(labels), classes).expect("consistent toy dataset");

    let mut g = Gen(ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0de));
    let cnn_layers = vec![
        g.conv("conv_1", 1, 4, Activation::Relu),
        g.conv("conv_2", 4, 8, Activation::Relu),
        pool("pool_1"),
        dropout("dropout_1", 0.25),
        g.conv("conv_3", 8, 8, Activation::Relu),
        g.conv("conv_4", 8, 8, Activation::Relu),
        pool("pool_2"),
        dropout("dropout_2", 0.25),
        LayerSpec::new("flatten", LayerKind::Flatten),
        g.dense("dense_1", 128, 32, Activation::Relu),
        dropout("dropout_3", 0.5),
        g.dense("dense_2", 32, classes, Activation::Softmax),
    ];
    let cnn = Model::new(TOY_INPUT.to_vec(), cnn_layers).expect("toy CNN shapes");
    let cnn = fit_last_dense(cnn, &dataset, Activation::Softmax).expect("toy CNN fit");

    let prelu_layers = vec![
        g.conv("conv_1", 1, 4, Activation::Linear),
        g.prelu("prelu_1", 4),
        pool("pool_1"),
        g.conv("conv_2", 4, 8, Activation::Linear),
        g.prelu("prelu_2", 8),
        pool("pool_2"),
        LayerSpec::new("flatten", LayerKind::Flatten),
        g.dense("dense_1", 128, 16, Activation::Linear),
        g.prelu("prelu_3", 16),
        g.dense("dense_2", 16, classes, Activation::Softmax),
    ];
    let prelu_cnn = Model::new(TOY_INPUT.to_vec(), prelu_layers).expect("toy PReLU CNN shapes");
    let prelu_cnn = fit_last_dense(prelu_cnn, &dataset, Activation::Softmax).expect("toy PReLU CNN fit");

    Toy {
        cnn,
        prelu_cnn,
        dataset,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::microops::{expand_prelu, MicroOpKind};
    use crate::model::predict;

    #[test]
    fn shapes_and_layout() {
        let toy = generate_toy(1, 20, 4);
        assert_eq!(toy.cnn.layer_count(), 12);
        assert_eq!(toy.cnn.output_shape(3).unwrap(), &[8, 8, 8]);
        assert_eq!(toy.cnn.class_count(), 4);
        let kinds: Vec<_> = toy.cnn.layers().iter().map(|l| l.kind_name()).collect();
        assert_eq!(
            kinds,
            [
                "conv2d", "conv2d", "max_pool2d", "dropout", "conv2d", "conv2d", "max_pool2d", "dropout", "flatten", "dense",
                "dropout", "dense"
            ]
        );
        let micro = expand_prelu(&toy.prelu_cnn);
        assert_eq!(micro.count_kind(&[MicroOpKind::Add].into()), 3);
    }

    #[test]
    fn deterministic_per_seed() {
        assert_eq!(generate_toy(9, 12, 3), generate_toy(9, 12, 3));
        assert_ne!(generate_toy(9, 12, 3).dataset, generate_toy(10, 12, 3).dataset);
    }

    #[test]
    fn better_than_chance() {
        let toy = generate_toy(42, 100, 10);
        let labels = toy.dataset.labels().unwrap();
        for model in [&toy.cnn, &toy.prelu_cnn] {
            let correct = toy
                .dataset
                .samples()
                .iter()
                .zip(labels)
                .filter(|(x, &l)| predict(&model.forward(x).unwrap()).unwrap().matches_label(l as usize))
                .count();
            assert!(correct > 10 * 2, "accuracy {correct}/100");
        }
    }
}
