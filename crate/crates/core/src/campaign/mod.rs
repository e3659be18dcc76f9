//! Probability sweeps and per-layer experiments over many trials, with
//! accuracy statistics and report files.

mod report;
pub mod stats;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::Dataset;
use crate::executor::{golden_run, layerwise_sweep, open_or_build_cache, opwise_sweep, ExecError, JobOutcome, SweepJob};
use crate::fault::{FaultKind, InjectionRecord};
use crate::io::{check_probabilities, Metric, RunConfig, TargetSelector, DEFAULT_BUDGET, DEFAULT_EPSILON, DEFAULT_TRIALS, DEFAULT_WINDOW};
use crate::microops::{expand_prelu, MicroOpKind};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::stream::RNG_ALGORITHM;

pub use report::{emit_report, emit_tables, load_summary, summary_table, REPORT_FILES};
pub use stats::{accuracy, cma, converged, summarize, Convergence, Reference, StatsError, Summary};

pub const TOOL_VERSION: &str = concat!("bitstorm ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("invalid campaign: {0}")]
    Invalid(String),
    #[error("the ground_truth metric needs a labelled dataset")]
    MissingLabels,
    #[error("target {target} at probability {probability} has no trials")]
    EmptyTrials { target: String, probability: f64 },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {reason}", path.display())]
    Summary { path: PathBuf, reason: String },
    #[error("campaign interrupted after {} of {} cells", partial.cells.len(), partial.expected_cells)]
    Aborted { partial: Box<CampaignResult> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignSpec {
    pub targets: TargetSelector,
    pub fault: FaultKind,
    pub probabilities: Vec<f64>,
    pub trials: u32,
    pub metric: Metric,
    pub seed: u64,
    pub convergence_window: usize,
    pub convergence_epsilon: f64,
}

impl CampaignSpec {
    /// A spec with default trials, metric and convergence settings.
    pub fn new(targets: TargetSelector, fault: FaultKind, probabilities: Vec<f64>, seed: u64) -> Self {
        Self {
            targets,
            fault,
            probabilities,
            trials: DEFAULT_TRIALS,
            metric: Metric::GoldenRun,
            seed,
            convergence_window: DEFAULT_WINDOW,
            convergence_epsilon: DEFAULT_EPSILON,
        }
    }

    pub fn from_config(config: &RunConfig) -> Self {
        Self {
            targets: config.target.clone(),
            fault: config.fault,
            probabilities: config.probabilities.clone(),
            trials: config.trials,
            metric: config.metric,
            seed: config.seed,
            convergence_window: config.convergence_window,
            convergence_epsilon: config.convergence_epsilon,
        }
    }

    pub fn is_layer_wise(&self) -> bool {
        matches!(self.targets, TargetSelector::AllLayers | TargetSelector::Layers(_))
    }

    fn validate(&self) -> Result<(), CampaignError> {
        check_probabilities(&self.probabilities).map_err(|r| CampaignError::Invalid(format!("probabilities: {r}")))?;
        if self.trials == 0 {
            return Err(CampaignError::Invalid("trials must be at least 1".into()));
        }
        if self.convergence_window < 2 {
            return Err(CampaignError::Invalid("convergence window must be at least 2".into()));
        }
        match &self.targets {
            TargetSelector::Layers(l) if l.is_empty() => Err(CampaignError::Invalid("empty layer list".into())),
            TargetSelector::OpSets(s) if s.is_empty() || s.iter().any(BTreeSet::is_empty) => {
                Err(CampaignError::Invalid("empty op kind set".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Execution settings that do not affect results.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Worker threads; 0 picks one per core.
    pub threads: usize,
    /// Memory budget for each activation cache.
    pub budget: u64,
    /// Directory holding one cache subdirectory per layer.
    pub cache_dir: PathBuf,
    /// Set to stop the run at the next sample boundary.
    pub cancel: Arc<AtomicBool>,
}

impl RunOptions {
    pub fn new(cache_dir: impl Into<PathBuf>) -> Self {
        Self {
            threads: 0,
            budget: DEFAULT_BUDGET,
            cache_dir: cache_dir.into(),
            cancel: Arc::new(AtomicBool::new(false)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetInfo {
    Layer {
        index: usize,
        name: String,
        layer_kind: String,
        /// Layer whose stream a pass-through layer shares.
        value_origin: usize,
    },
    Ops {
        ops: Vec<MicroOpKind>,
        executions_per_inference: usize,
    },
}

impl TargetInfo {
    pub fn label(&self) -> String {
        match self {
            TargetInfo::Layer { index, name, .. } => format!("layer{index}:{name}"),
            TargetInfo::Ops { ops, .. } => {
                let names: Vec<&str> = ops.iter().map(|k| k.as_str()).collect();
                format!("ops:{}", names.join("+"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tool: String,
    pub rng: String,
    pub seed: u64,
    pub experiment: String,
    pub fault: FaultKind,
    pub metric: Metric,
    pub trials: u32,
    pub probabilities: Vec<f64>,
    pub sample_count: usize,
    pub convergence_window: usize,
    pub convergence_epsilon: f64,
}

/// Statistics for one (target, probability) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub target: usize,
    pub label: String,
    pub probability: f64,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub cma: Vec<f64>,
    pub convergence: Convergence,
    /// Faults that landed, summed over trials.
    pub injections: u64,
}

/// One landed fault with its campaign coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CampaignRecord {
    pub target: usize,
    pub probability_index: usize,
    pub trial: u32,
    pub record: InjectionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignResult {
    pub header: Header,
    /// Accuracy of the fault-free model under the chosen metric.
    pub reference_accuracy: f64,
    /// False when the run was interrupted; `cells` then holds what finished.
    pub complete: bool,
    pub expected_cells: usize,
    pub targets: Vec<TargetInfo>,
    pub cells: Vec<Cell>,
    /// Every landed fault, in target, probability, trial, sample order.
    /// Written to `records.csv`, not to the summary.
    #[serde(skip)]
    pub records: Vec<CampaignRecord>,
}

impl CampaignResult {
    pub fn cell(&self, target: usize, probability: f64) -> Option<&Cell> {
        self.cells.iter().find(|c| c.target == target && c.probability == probability)
    }
}

fn resolve_targets<T: Scalar>(spec: &CampaignSpec, model: &Model<T>) -> Result<Vec<TargetInfo>, CampaignError> {
    let layer_info = |index: usize| -> Result<TargetInfo, CampaignError> {
        let layer = model.layers().get(index).ok_or_else(|| {
            CampaignError::Invalid(format!("layer {index} out of range for a model with {} layers", model.layer_count()))
        })?;
        Ok(TargetInfo::Layer {
            index,
            name: layer.name.clone(),
            layer_kind: layer.kind_name().into(),
            value_origin: model.value_origin(index),
        })
    };
    let op_sets: Vec<BTreeSet<MicroOpKind>> = match &spec.targets {
        TargetSelector::AllLayers => return (0..model.layer_count()).map(layer_info).collect(),
        TargetSelector::Layers(l) => return l.iter().map(|&i| layer_info(i)).collect(),
        TargetSelector::AllOps => {
            let micro = expand_prelu(model);
            MicroOpKind::ALL
                .iter()
                .filter(|k| micro.sites().iter().any(|s| s.kind == **k))
                .map(|&k| [k].into())
                .collect()
        }
        TargetSelector::OpSets(sets) => sets.clone(),
    };
    let micro = expand_prelu(model);
    if op_sets.is_empty() {
        return Err(CampaignError::Invalid("the model has no injectable operations".into()));
    }
    op_sets
        .into_iter()
        .map(|set| {
            crate::executor::check_op_targets(&micro, &set)?;
            Ok(TargetInfo::Ops {
                executions_per_inference: micro.count_kind(&set),
                ops: set.into_iter().collect(),
            })
        })
        .collect()
}

fn thread_pool(threads: usize) -> Result<rayon::ThreadPool, CampaignError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CampaignError::Invalid(format!("cannot start worker threads: {e}")))
}

/// Runs `trials` independent trials for every target and probability.
///
/// Trial `t` of probability index `i` uses stream trial id
/// `i * trials + t`, so each probability gets fresh draws. Results are
/// identical for any thread count.
pub fn run_stochastic<T: Scalar>(
    spec: &CampaignSpec,
    model: &Model<T>,
    dataset: &Dataset<T>,
    options: &RunOptions,
) -> Result<CampaignResult, CampaignError> {
    run(spec, model, dataset, options, "stochastic")
}

/// Per-layer experiments with every inference receiving exactly one fault:
/// probability fixed at 1 and layer targets only.
pub fn run_deterministic_100<T: Scalar>(
    spec: &CampaignSpec,
    model: &Model<T>,
    dataset: &Dataset<T>,
    options: &RunOptions,
) -> Result<CampaignResult, CampaignError> {
    if !spec.is_layer_wise() {
        return Err(CampaignError::Invalid("fixed-probability experiments are layer-wise".into()));
    }
    let spec = CampaignSpec {
        probabilities: vec![1.0],
        ..spec.clone()
    };
    run(&spec, model, dataset, options, "deterministic")
}

fn run<T: Scalar>(
    spec: &CampaignSpec,
    model: &Model<T>,
    dataset: &Dataset<T>,
    options: &RunOptions,
    experiment: &str,
) -> Result<CampaignResult, CampaignError> {
    spec.validate()?;
    spec.fault.validate::<T>().map_err(ExecError::from)?;
    dataset.check_model(model).map_err(ExecError::from)?;
    let targets = resolve_targets(spec, model)?;
    let labels = match spec.metric {
        Metric::GroundTruth => Some(dataset.labels().ok_or(CampaignError::MissingLabels)?),
        Metric::GoldenRun => None,
    };
    let pool = thread_pool(options.threads)?;
    pool.install(|| {
        let golden = golden_run(model, dataset)?.predictions;
        let reference = match labels {
            Some(l) => Reference::Labels(l),
            None => Reference::Predictions(&golden),
        };
        let mut result = CampaignResult {
            header: Header {
                tool: TOOL_VERSION.into(),
                rng: RNG_ALGORITHM.into(),
                seed: spec.seed,
                experiment: experiment.into(),
                fault: spec.fault,
                metric: spec.metric,
                trials: spec.trials,
                probabilities: spec.probabilities.clone(),
                sample_count: dataset.len(),
                convergence_window: spec.convergence_window,
                convergence_epsilon: spec.convergence_epsilon,
            },
            reference_accuracy: accuracy(&golden, reference)?,
            complete: false,
            expected_cells: targets.len() * spec.probabilities.len(),
            targets: targets.clone(),
            cells: Vec::new(),
            records: Vec::new(),
        };
        let trials = u64::from(spec.trials);
        let jobs: Vec<SweepJob> = spec
            .probabilities
            .iter()
            .enumerate()
            .flat_map(|(i, &p)| {
                (0..trials).map(move |t| SweepJob {
                    probability: p,
                    trial: i as u64 * trials + t,
                })
            })
            .collect();
        let micro = (!spec.is_layer_wise()).then(|| expand_prelu(model));

        for (target_index, target) in targets.iter().enumerate() {
            let outcomes = match target {
                TargetInfo::Layer { index, .. } => {
                    let dir = options.cache_dir.join(format!("layer_{index}"));
                    open_or_build_cache(model, dataset, *index, options.budget, &dir).and_then(|cache| {
                        layerwise_sweep(model, &cache, *index, spec.fault, spec.seed, &jobs, &golden, &options.cancel)
                    })
                }
                TargetInfo::Ops { ops, .. } => {
                    let set: BTreeSet<MicroOpKind> = ops.iter().copied().collect();
                    let micro = micro.as_ref().expect("op-wise campaign");
                    opwise_sweep(micro, dataset, &set, spec.fault, spec.seed, &jobs, &golden, &options.cancel)
                }
            };
            let outcomes = match outcomes {
                Ok(o) => o,
                Err(ExecError::Cancelled) => {
                    return Err(CampaignError::Aborted {
                        partial: Box::new(result),
                    })
                }
                Err(e) => return Err(e.into()),
            };
            add_target(&mut result, spec, target_index, &target.label(), outcomes, reference)?;
        }
        result.complete = true;
        Ok(result)
    })
}

fn add_target(
    result: &mut CampaignResult,
    spec: &CampaignSpec,
    target: usize,
    label: &str,
    outcomes: Vec<JobOutcome>,
    reference: Reference<'_>,
) -> Result<(), CampaignError> {
    let trials = spec.trials as usize;
    for (pi, (&probability, group)) in spec.probabilities.iter().zip(outcomes.chunks(trials)).enumerate() {
        let accuracies = group
            .iter()
            .map(|o| accuracy(&o.predictions, reference))
            .collect::<Result<Vec<_>, _>>()?;
        let summary = summarize(&accuracies)?;
        let series = cma(&accuracies)?;
        let convergence = converged(&series, spec.convergence_window, spec.convergence_epsilon)?;
        let mut injections = 0u64;
        for (t, outcome) in group.iter().enumerate() {
            injections += outcome.records.len() as u64;
            result.records.extend(outcome.records.iter().map(|&record| CampaignRecord {
                target,
                probability_index: pi,
                trial: t as u32,
                record,
            }));
        }
        result.cells.push(Cell {
            target,
            label: label.into(),
            probability,
            accuracies,
            mean: summary.mean,
            std: summary.std,
            min: summary.min,
            max: summary.max,
            cma: series,
            convergence,
            injections,
        });
    }
    Ok(())
}
