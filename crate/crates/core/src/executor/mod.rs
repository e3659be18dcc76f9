//! Inference with fault hooks: golden runs, operation-wise injection on the
//! micro-op graph and layer-wise injection replayed from activation caches.

mod cache;

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError};
use crate::fault::{apply_planned, maybe_inject, plan_injection, FaultError, FaultKind, FaultSpec, InjectionRecord, InjectionTarget, PlannedFault};
use crate::layers::forward_layer_delta;
use crate::microops::{MicroOpKind, MicroOpModel};
use crate::model::{predict, Model, ModelError, Prediction};
use crate::scalar::Scalar;
use crate::stream::derive_stream;
use crate::tensor::Tensor;

pub use cache::{build_cache, cache_fingerprint, open_or_build_cache, ActivationCache, CACHE_MANIFEST};

#[derive(Debug, Error)]
pub enum ExecError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error("no operation of kind {kinds} exists in the model; available: {available}")]
    TargetAbsent { kinds: String, available: String },
    #[error("operation-wise execution needs an operation target, got layer {0}")]
    NotOperationWise(usize),
    #[error("layer-wise execution needs a layer target")]
    NotLayerWise,
    #[error("cache holds layer {cache} but the fault targets layer {spec}")]
    CacheLayer { cache: usize, spec: usize },
    #[error("memory budget of {budget} bytes is smaller than one activation ({needed} bytes)")]
    BudgetTooSmall { budget: u64, needed: u64 },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {reason}", path.display())]
    CacheFormat { path: PathBuf, reason: String },
    #[error("cancelled")]
    Cancelled,
}

impl ExecError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ExecError::Io {
            path: path.into(),
            source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Golden,
    Injected { spec_digest: String, trial: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub provenance: Provenance,
    pub predictions: Vec<Prediction>,
}

impl PredictionSet {
    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

/// Fault-free predictions for every sample.
pub fn golden_run<T: Scalar>(model: &Model<T>, dataset: &Dataset<T>) -> Result<PredictionSet, ExecError> {
    dataset.check_model(model)?;
    let predictions = dataset
        .samples()
        .par_iter()
        .map(|x| model.forward(x).and_then(|s| predict(&s)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PredictionSet {
        provenance: Provenance::Golden,
        predictions,
    })
}

fn op_targets(spec: &FaultSpec) -> Result<&std::collections::BTreeSet<MicroOpKind>, ExecError> {
    match &spec.target {
        InjectionTarget::Operations(kinds) => Ok(kinds),
        InjectionTarget::Layer(l) => Err(ExecError::NotOperationWise(*l)),
    }
}

/// Fails unless at least one op of a targeted kind exists.
pub fn check_op_targets<T: Scalar>(microops: &MicroOpModel<T>, kinds: &std::collections::BTreeSet<MicroOpKind>) -> Result<(), ExecError> {
    if microops.count_kind(kinds) == 0 {
        let mut present: Vec<&str> = microops.sites().iter().map(|s| s.kind.as_str()).collect();
        present.sort_unstable();
        present.dedup();
        return Err(ExecError::TargetAbsent {
            kinds: kinds.iter().map(|k| k.as_str()).collect::<Vec<_>>().join("+"),
            available: if present.is_empty() { "none".into() } else { present.join(", ") },
        });
    }
    Ok(())
}

fn injected(spec: &FaultSpec, trial: u64, predictions: Vec<Prediction>) -> PredictionSet {
    PredictionSet {
        provenance: Provenance::Injected {
            spec_digest: spec.digest(),
            trial,
        },
        predictions,
    }
}

/// One operation-wise trial: every execution of a targeted op may be
/// corrupted, each with its own stream keyed by `(seed, trial, sample, op id)`.
pub fn run_injected_opwise<T: Scalar>(
    microops: &MicroOpModel<T>,
    dataset: &Dataset<T>,
    spec: &FaultSpec,
    trial: u64,
) -> Result<(PredictionSet, Vec<InjectionRecord>), ExecError> {
    let kinds = op_targets(spec)?;
    spec.kind.validate::<T>()?;
    check_op_targets(microops, kinds)?;
    dataset.check_model(microops.model())?;
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut records = Vec::new();
    for (sample, x) in dataset.samples().iter().enumerate() {
        let scores = microops.forward_with(x, |site, out| {
            if kinds.contains(&site.kind) {
                let mut stream = derive_stream(spec.seed, trial, sample as u64, site.id as u64);
                if let Some(corruption) = maybe_inject(out, spec, &mut stream) {
                    records.push(InjectionRecord {
                        trial,
                        sample: sample as u64,
                        site: site.id as u64,
                        corruption,
                        width: T::BITS,
                    });
                }
            }
        })?;
        predictions.push(predict(&scores)?);
    }
    Ok((injected(spec, trial, predictions), records))
}

/// One layer-wise trial replayed from `cache`. Each sample's cached
/// activation is copied, possibly corrupted once, and run through the tail.
///
/// The stream site is the layer's value origin, so a Flatten or Dropout
/// layer draws the same fault as the layer whose values it passes on.
pub fn run_injected_layerwise<T: Scalar>(
    model: &Model<T>,
    cache: &ActivationCache,
    spec: &FaultSpec,
    trial: u64,
) -> Result<(PredictionSet, Vec<InjectionRecord>), ExecError> {
    let layer = layer_target(spec, cache)?;
    spec.validate_for(model)?;
    cache.check_model(model)?;
    let site = model.value_origin(layer) as u64;
    let mut predictions = Vec::with_capacity(cache.sample_count());
    let mut records = Vec::new();
    for chunk in 0..cache.chunk_count() {
        let first = cache.chunk_first_sample(chunk);
        for (offset, activation) in cache.load_chunk::<T>(chunk)?.into_iter().enumerate() {
            let sample = (first + offset) as u64;
            let mut copy = activation;
            let mut stream = derive_stream(spec.seed, trial, sample, site);
            if let Some(corruption) = maybe_inject(&mut copy, spec, &mut stream) {
                records.push(InjectionRecord {
                    trial,
                    sample,
                    site: layer as u64,
                    corruption,
                    width: T::BITS,
                });
            }
            predictions.push(model.run_tail(layer, &copy)?);
        }
    }
    Ok((injected(spec, trial, predictions), records))
}

fn layer_target(spec: &FaultSpec, cache: &ActivationCache) -> Result<usize, ExecError> {
    match spec.target {
        InjectionTarget::Layer(l) if l == cache.layer() => Ok(l),
        InjectionTarget::Layer(l) => Err(ExecError::CacheLayer {
            cache: cache.layer(),
            spec: l,
        }),
        InjectionTarget::Operations(_) => Err(ExecError::NotLayerWise),
    }
}

/// One (probability, trial) pair of a batched sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepJob {
    pub probability: f64,
    pub trial: u64,
}

/// Predictions and landed faults of one sweep job.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct JobOutcome {
    pub predictions: Vec<Prediction>,
    pub records: Vec<InjectionRecord>,
}

fn check_cancel(cancel: &AtomicBool) -> Result<(), ExecError> {
    if cancel.load(Ordering::Relaxed) {
        Err(ExecError::Cancelled)
    } else {
        Ok(())
    }
}

/// Outputs of every layer after `layer`, starting from its output.
fn trace_tail<T: Scalar>(model: &Model<T>, layer: usize, activation: &Tensor<T>) -> Result<Vec<Tensor<T>>, ExecError> {
    let mut outputs = Vec::with_capacity(model.layer_count() - layer - 1);
    let mut x = activation.clone();
    for spec in &model.layers()[layer + 1..] {
        x = crate::layers::forward_layer(spec, &x)?;
        outputs.push(x.clone());
    }
    Ok(outputs)
}

/// Tail prediction for an activation that differs from the golden one only
/// at `changed`, recomputing just what the change reaches. Bit-identical to
/// [`Model::run_tail`].
fn tail_from_change<T: Scalar>(
    model: &Model<T>,
    layer: usize,
    corrupted: Tensor<T>,
    changed: usize,
    trace: &[Tensor<T>],
    golden: Prediction,
) -> Result<Prediction, ExecError> {
    let mut x = corrupted;
    let mut diff = vec![changed];
    for (spec, reference) in model.layers()[layer + 1..].iter().zip(trace) {
        let (out, d) = forward_layer_delta(spec, &x, &diff, reference)?;
        if d.is_empty() {
            return Ok(golden);
        }
        x = out;
        diff = d;
    }
    Ok(predict(&x)?)
}

/// Runs many layer-wise trials in one pass over the cache: each chunk is
/// read once and every job is applied to it. Results match calling
/// [`run_injected_layerwise`] per job exactly; `golden` lets samples whose
/// activation is left unchanged reuse the golden prediction.
#[allow(clippy::too_many_arguments)]
pub fn layerwise_sweep<T: Scalar>(
    model: &Model<T>,
    cache: &ActivationCache,
    layer: usize,
    kind: FaultKind,
    seed: u64,
    jobs: &[SweepJob],
    golden: &[Prediction],
    cancel: &AtomicBool,
) -> Result<Vec<JobOutcome>, ExecError> {
    if layer != cache.layer() {
        return Err(ExecError::CacheLayer {
            cache: cache.layer(),
            spec: layer,
        });
    }
    kind.validate::<T>()?;
    cache.check_model(model)?;
    let site = model.value_origin(layer) as u64;
    let n = cache.sample_count();
    let mut outcomes: Vec<JobOutcome> = jobs
        .iter()
        .map(|_| JobOutcome {
            predictions: Vec::with_capacity(n),
            records: Vec::new(),
        })
        .collect();
    for chunk in 0..cache.chunk_count() {
        let first = cache.chunk_first_sample(chunk);
        for (offset, activation) in cache.load_chunk::<T>(chunk)?.into_iter().enumerate() {
            check_cancel(cancel)?;
            let sample = first + offset;
            let trace = trace_tail(model, layer, &activation)?;
            let golden_pred = golden[sample];
            outcomes
                .par_iter_mut()
                .zip(jobs)
                .try_for_each(|(outcome, job)| -> Result<(), ExecError> {
                    let mut stream = derive_stream(seed, job.trial, sample as u64, site);
                    let prediction = match plan_injection(&mut stream, job.probability, activation.len()) {
                        None => golden_pred,
                        Some(plan) => {
                            let mut copy = activation.clone();
                            let corruption = apply_planned(&mut copy, plan, kind);
                            outcome.records.push(InjectionRecord {
                                trial: job.trial,
                                sample: sample as u64,
                                site: layer as u64,
                                corruption,
                                width: T::BITS,
                            });
                            if corruption.changed() {
                                tail_from_change(model, layer, copy, plan.element, &trace, golden_pred)?
                            } else {
                                golden_pred
                            }
                        }
                    };
                    outcome.predictions.push(prediction);
                    Ok(())
                })?;
        }
    }
    Ok(outcomes)
}

/// Batched operation-wise trials. Samples on which no targeted op draws a
/// fault reuse the golden prediction instead of re-running inference.
#[allow(clippy::too_many_arguments)]
pub fn opwise_sweep<T: Scalar>(
    microops: &MicroOpModel<T>,
    dataset: &Dataset<T>,
    targets: &std::collections::BTreeSet<MicroOpKind>,
    kind: FaultKind,
    seed: u64,
    jobs: &[SweepJob],
    golden: &[Prediction],
    cancel: &AtomicBool,
) -> Result<Vec<JobOutcome>, ExecError> {
    kind.validate::<T>()?;
    check_op_targets(microops, targets)?;
    dataset.check_model(microops.model())?;
    let sites: Vec<_> = microops.sites().iter().filter(|s| targets.contains(&s.kind)).collect();
    let mut outcomes: Vec<JobOutcome> = jobs
        .iter()
        .map(|_| JobOutcome {
            predictions: Vec::with_capacity(dataset.len()),
            records: Vec::new(),
        })
        .collect();
    for (sample, x) in dataset.samples().iter().enumerate() {
        check_cancel(cancel)?;
        outcomes
            .par_iter_mut()
            .zip(jobs)
            .try_for_each(|(outcome, job)| -> Result<(), ExecError> {
                let plans: Vec<(usize, PlannedFault)> = sites
                    .iter()
                    .filter_map(|site| {
                        let mut stream = derive_stream(seed, job.trial, sample as u64, site.id as u64);
                        plan_injection(&mut stream, job.probability, site.len).map(|p| (site.id, p))
                    })
                    .collect();
                if plans.is_empty() {
                    outcome.predictions.push(golden[sample]);
                    return Ok(());
                }
                let mut pending = plans.iter().peekable();
                let scores = microops.forward_with(x, |site, out| {
                    if let Some(&&(id, plan)) = pending.peek() {
                        if id == site.id {
                            pending.next();
                            let corruption = apply_planned(out, plan, kind);
                            outcome.records.push(InjectionRecord {
                                trial: job.trial,
                                sample: sample as u64,
                                site: id as u64,
                                corruption,
                                width: T::BITS,
                            });
                        }
                    }
                })?;
                outcome.predictions.push(predict(&scores)?);
                Ok(())
            })?;
    }
    Ok(outcomes)
}
