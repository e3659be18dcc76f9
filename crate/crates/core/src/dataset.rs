//! Evaluation sets: uniformly shaped input tensors with optional labels.

use thiserror::Error;

use crate::model::Model;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DatasetError {
    #[error("dataset must contain at least one sample")]
    Empty,
    #[error("class_count must be at least 1")]
    NoClasses,
    #[error("sample {index} has shape {found:?}, expected {expected:?}")]
    NonUniform {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("{samples} samples but {labels} labels")]
    LabelCount { samples: usize, labels: usize },
    #[error("label {label} of sample {index} is not below class_count {class_count}")]
    LabelRange {
        index: usize,
        label: u32,
        class_count: usize,
    },
    #[error("samples have shape {dataset:?} but the model expects {model:?}")]
    ModelInput { dataset: Vec<usize>, model: Vec<usize> },
    #[error("dataset declares {dataset} classes but the model scores only {model}")]
    ModelClasses { dataset: usize, model: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    samples: Vec<Tensor<T>>,
    labels: Option<Vec<u32>>,
    class_count: usize,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(samples: Vec<Tensor<T>>, labels: Option<Vec<u32>>, class_count: usize) -> Result<Self, DatasetError> {
        let first = samples.first().ok_or(DatasetError::Empty)?;
        if class_count == 0 {
            return Err(DatasetError::NoClasses);
        }
        if let Some((index, s)) = samples.iter().enumerate().find(|(_, s)| s.shape() != first.shape()) {
            return Err(DatasetError::NonUniform {
                index,
                expected: first.shape().to_vec(),
                found: s.shape().to_vec(),
            });
        }
        if let Some(labels) = &labels {
            if labels.len() != samples.len() {
                return Err(DatasetError::LabelCount {
                    samples: samples.len(),
                    labels: labels.len(),
                });
            }
            if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= class_count) {
                return Err(DatasetError::LabelRange {
                    index,
                    label,
                    class_count,
                });
            }
        }
        Ok(Self {
            samples,
            labels,
            class_count,
        })
    }

    pub fn samples(&self) -> &[Tensor<T>] {
        &self.samples
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// Never true for a constructed dataset.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.samples[0].shape()
    }

    /// Checks that samples fit the model input and labels fit its outputs.
    pub fn check_model(&self, model: &Model<T>) -> Result<(), DatasetError> {
        if self.sample_shape() != model.input_shape() {
            return Err(DatasetError::ModelInput {
                dataset: self.sample_shape().to_vec(),
                model: model.input_shape().to_vec(),
            });
        }
        if self.class_count > model.class_count() {
            return Err(DatasetError::ModelClasses {
                dataset: self.class_count,
                model: model.class_count(),
            });
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            samples: self.samples.iter().map(Tensor::cast).collect(),
            labels: self.labels.clone(),
            class_count: self.class_count,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor<f32> {
        Tensor::zeros(vec![4, 4, 1]).unwrap()
    }

    #[test]
    fn valid_dataset() {
        let ds = Dataset::new(vec![sample(); 10], Some((0..10).collect()), 10).unwrap();
        assert_eq!(ds.len(), 10);
        assert_eq!(ds.sample_shape(), &[4, 4, 1]);
    }

    #[test]
    fn rejects_inconsistent_data() {
        assert_eq!(Dataset::<f32>::new(vec![], None, 2), Err(DatasetError::Empty));
        assert!(matches!(
            Dataset::new(vec![sample(); 10], Some((0..9).collect()), 10),
            Err(DatasetError::LabelCount { samples: 10, labels: 9 })
        ));
        assert!(matches!(
            Dataset::new(vec![sample(); 2], Some(vec![0, 5]), 5),
            Err(DatasetError::LabelRange { index: 1, label: 5, .. })
        ));
        let odd = Tensor::zeros(vec![2, 2, 1]).unwrap();
        assert!(matches!(
            Dataset::new(vec![sample(), odd], None, 1),
            Err(DatasetError::NonUniform { index: 1, .. })
        ));
    }
}
