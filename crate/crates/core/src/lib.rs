//! Fault injection for sequential CNN inference.
//!
//! Models run on [`tensor::Tensor`] values of any [`scalar::Scalar`] type
//! (`f32` or `f64`); files on disk are always binary32. Faults are injected
//! either into the outputs of primitive operations ([`microops`]) or into a
//! layer's output replayed from an activation cache ([`executor`]), and
//! [`campaign`] sweeps them over many seeded trials.

pub mod campaign;
pub mod dataset;
pub mod executor;
pub mod fault;
pub mod io;
pub mod layers;
pub mod microops;
pub mod model;
pub mod scalar;
pub mod stream;
pub mod tensor;
pub mod toy;

use std::io::ErrorKind;

use thiserror::Error;

pub use campaign::{CampaignError, CampaignResult, CampaignSpec, RunOptions};
pub use dataset::{Dataset, DatasetError};
pub use executor::{ActivationCache, ExecError, PredictionSet};
pub use fault::{FaultError, FaultKind, FaultSpec, InjectionRecord};
pub use io::{IoError, RunConfig};
pub use microops::{MicroOpKind, MicroOpModel};
pub use model::{Model, ModelError, Prediction};
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
pub type Dataset32 = Dataset<f32>;
pub type Dataset64 = Dataset<f64>;
pub type MicroOpModel32 = MicroOpModel<f32>;
pub type MicroOpModel64 = MicroOpModel<f64>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] IoError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Campaign(#[from] CampaignError),
}

/// Coarse failure category, stable across releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Internal,
    /// Bad or missing input: files, configuration, incompatible shapes.
    Input,
    /// Not enough memory budget or disk.
    Resource,
}

impl ErrorClass {
    /// Process exit code: 1 internal, 2 input, 3 resource.
    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Internal => 1,
            ErrorClass::Input => 2,
            ErrorClass::Resource => 3,
        }
    }
}

fn io_class(e: &std::io::Error, otherwise: ErrorClass) -> ErrorClass {
    match e.kind() {
        ErrorKind::StorageFull | ErrorKind::OutOfMemory | ErrorKind::QuotaExceeded | ErrorKind::FileTooLarge => {
            ErrorClass::Resource
        }
        _ => otherwise,
    }
}

fn exec_class(e: &ExecError) -> ErrorClass {
    match e {
        ExecError::BudgetTooSmall { .. } => ErrorClass::Resource,
        ExecError::Io { source, .. } => io_class(source, ErrorClass::Resource),
        ExecError::Cancelled => ErrorClass::Internal,
        _ => ErrorClass::Input,
    }
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Io(IoError::Io { source, .. }) => io_class(source, ErrorClass::Input),
            Error::Io(_) | Error::Model(_) | Error::Dataset(_) | Error::Fault(_) => ErrorClass::Input,
            Error::Exec(e) => exec_class(e),
            Error::Campaign(e) => match e {
                CampaignError::Exec(e) => exec_class(e),
                CampaignError::Io { source, .. } => io_class(source, ErrorClass::Internal),
                CampaignError::Invalid(_)
                | CampaignError::MissingLabels
                | CampaignError::EmptyTrials { .. }
                | CampaignError::Summary { .. } => ErrorClass::Input,
                CampaignError::Stats(_) | CampaignError::Aborted { .. } => ErrorClass::Internal,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        let missing = IoError::Io {
            path: "x".into(),
            source: std::io::Error::from(ErrorKind::NotFound),
        };
        assert_eq!(Error::from(missing).class().exit_code(), 2);
        let budget = ExecError::BudgetTooSmall { budget: 1, needed: 4 };
        assert_eq!(Error::from(budget).class().exit_code(), 3);
        let full = ExecError::Io {
            path: "c".into(),
            source: std::io::Error::from(ErrorKind::StorageFull),
        };
        assert_eq!(Error::from(CampaignError::Exec(full)).class(), ErrorClass::Resource);
        assert_eq!(Error::from(ExecError::Cancelled).class().exit_code(), 1);
    }
}
