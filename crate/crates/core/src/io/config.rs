//! `config.json`: what to load, what to inject and how to sweep.
//!
//! Relative paths are resolved against the directory holding the config.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{parse_json, read_file, IoError};
use crate::fault::FaultKind;
use crate::microops::MicroOpKind;

/// Default memory budget for activation caches: 256 MiB.
pub const DEFAULT_BUDGET: u64 = 256 << 20;
pub const DEFAULT_TRIALS: u32 = 100;
pub const DEFAULT_WINDOW: usize = 20;
pub const DEFAULT_EPSILON: f64 = 0.002;

/// Bits in the on-disk word; configs always describe binary32 runs.
const FILE_WORD_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Op,
    Layer,
}

/// What an accuracy is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    GroundTruth,
    GoldenRun,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSelector {
    AllLayers,
    Layers(Vec<usize>),
    /// Every op kind present in the model, one target per kind.
    AllOps,
    /// One target per set; each set injects into all listed kinds at once.
    OpSets(Vec<BTreeSet<MicroOpKind>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: PathBuf,
    pub dataset: PathBuf,
    pub mode: Mode,
    pub target: TargetSelector,
    pub fault: FaultKind,
    pub probabilities: Vec<f64>,
    pub trials: u32,
    pub metric: Metric,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub budget: u64,
    pub convergence_window: usize,
    pub convergence_epsilon: f64,
    /// Defaults to `<out_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.out_dir.join("cache"))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    model: PathBuf,
    dataset: PathBuf,
    mode: Mode,
    target: Value,
    fault: String,
    #[serde(default)]
    bit: Option<u32>,
    probabilities: Vec<f64>,
    #[serde(default)]
    trials: Option<u32>,
    #[serde(default)]
    metric: Option<Metric>,
    seed: u64,
    #[serde(default)]
    out_dir: Option<PathBuf>,
    #[serde(default)]
    budget: Option<u64>,
    #[serde(default)]
    convergence_window: Option<usize>,
    #[serde(default)]
    convergence_epsilon: Option<f64>,
    #[serde(default)]
    cache_dir: Option<PathBuf>,
}

fn parse_fault(path: &Path, name: &str, bit: Option<u32>) -> Result<FaultKind, IoError> {
    let kind = match name {
        "zero" => FaultKind::Zero,
        "random_value" => FaultKind::RandomValue,
        "bit_flip_random" => FaultKind::BitFlipRandom,
        "bit_flip_specific" => {
            let bit = bit.ok_or_else(|| IoError::invalid(path, "bit", "required when fault is bit_flip_specific"))?;
            if bit >= FILE_WORD_BITS {
                return Err(IoError::invalid(path, "bit", format!("{bit} outside 0..{}", FILE_WORD_BITS - 1)));
            }
            return Ok(FaultKind::BitFlipSpecific(bit));
        }
        other => {
            return Err(IoError::invalid(
                path,
                "fault",
                format!("unknown fault kind {other:?}; expected zero, random_value, bit_flip_random or bit_flip_specific"),
            ))
        }
    };
    if bit.is_some() {
        return Err(IoError::invalid(path, "bit", "only allowed when fault is bit_flip_specific"));
    }
    Ok(kind)
}

fn parse_op_set(path: &Path, items: &[Value]) -> Result<BTreeSet<MicroOpKind>, IoError> {
    let set = items
        .iter()
        .map(|v| {
            v.as_str()
                .ok_or_else(|| IoError::invalid(path, "target", format!("expected an op kind name, found {v}")))?
                .parse::<MicroOpKind>()
                .map_err(|e| IoError::invalid(path, "target", e))
        })
        .collect::<Result<BTreeSet<_>, _>>()?;
    if set.is_empty() {
        return Err(IoError::invalid(path, "target", "empty op kind list"));
    }
    Ok(set)
}

fn parse_target(path: &Path, mode: Mode, value: &Value) -> Result<TargetSelector, IoError> {
    let bad = |reason: String| IoError::invalid(path, "target", reason);
    match (mode, value) {
        (Mode::Layer, Value::String(s)) if s == "all" => Ok(TargetSelector::AllLayers),
        (Mode::Op, Value::String(s)) if s == "all" => Ok(TargetSelector::AllOps),
        (Mode::Layer, Value::Number(n)) => n
            .as_u64()
            .map(|i| TargetSelector::Layers(vec![i as usize]))
            .ok_or_else(|| bad(format!("layer index must be a non-negative integer, found {n}"))),
        (Mode::Layer, Value::Array(items)) if !items.is_empty() => items
            .iter()
            .map(|v| {
                v.as_u64()
                    .map(|i| i as usize)
                    .ok_or_else(|| bad(format!("layer index must be a non-negative integer, found {v}")))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(TargetSelector::Layers),
        (Mode::Op, Value::String(_)) => Ok(TargetSelector::OpSets(vec![parse_op_set(path, std::slice::from_ref(value))?])),
        (Mode::Op, Value::Array(items)) if items.iter().all(Value::is_array) && !items.is_empty() => items
            .iter()
            .map(|set| parse_op_set(path, set.as_array().expect("checked")))
            .collect::<Result<Vec<_>, _>>()
            .map(TargetSelector::OpSets),
        (Mode::Op, Value::Array(items)) => Ok(TargetSelector::OpSets(vec![parse_op_set(path, items)?])),
        (Mode::Layer, other) => Err(bad(format!("expected \"all\", a layer index or a list of indices, found {other}"))),
        (Mode::Op, other) => Err(bad(format!("expected \"all\" or a list of op kinds, found {other}"))),
    }
}

/// Probabilities must lie in [0, 1], strictly increasing.
pub(crate) fn check_probabilities(probabilities: &[f64]) -> Result<(), String> {
    if probabilities.is_empty() {
        return Err("at least one probability is required".into());
    }
    if let Some(p) = probabilities.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(format!("{p} outside [0, 1]"));
    }
    if let Some(w) = probabilities.windows(2).find(|w| w[0] >= w[1]) {
        return Err(format!("must be sorted and unique, found {} before {}", w[0], w[1]));
    }
    Ok(())
}

/// Reads and validates a run configuration.
pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig, IoError> {
    let path = path.as_ref();
    let doc: ConfigDoc = parse_json(path, &read_file(path)?)?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };

    let fault = parse_fault(path, &doc.fault, doc.bit)?;
    let target = parse_target(path, doc.mode, &doc.target)?;
    check_probabilities(&doc.probabilities).map_err(|r| IoError::invalid(path, "probabilities", r))?;
    let trials = doc.trials.unwrap_or(DEFAULT_TRIALS);
    if trials == 0 {
        return Err(IoError::invalid(path, "trials", "must be at least 1"));
    }
    let window = doc.convergence_window.unwrap_or(DEFAULT_WINDOW);
    if window < 2 {
        return Err(IoError::invalid(path, "convergence_window", "must be at least 2"));
    }
    let epsilon = doc.convergence_epsilon.unwrap_or(DEFAULT_EPSILON);
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(IoError::invalid(path, "convergence_epsilon", "must be a finite non-negative number"));
    }

    Ok(RunConfig {
        model: resolve(doc.model),
        dataset: resolve(doc.dataset),
        mode: doc.mode,
        target,
        fault,
        probabilities: doc.probabilities,
        trials,
        metric: doc.metric.unwrap_or(Metric::GoldenRun),
        seed: doc.seed,
        out_dir: resolve(doc.out_dir.unwrap_or_else(|| PathBuf::from("out"))),
        budget: doc.budget.unwrap_or(DEFAULT_BUDGET),
        convergence_window: window,
        convergence_epsilon: epsilon,
        cache_dir: doc.cache_dir.map(resolve),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn load(doc: Value) -> Result<RunConfig, IoError> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, serde_json::to_vec(&doc).unwrap()).unwrap();
        load_config(&path)
    }

    fn base() -> Value {
        json!({
            "model": "model.json",
            "dataset": "data",
            "mode": "layer",
            "target": 3,
            "fault": "bit_flip_random",
            "probabilities": [0.0, 0.5, 1.0],
            "seed": 7
        })
    }

    fn with(mut doc: Value, key: &str, value: Value) -> Value {
        doc[key] = value;
        doc
    }

    #[test]
    fn defaults_and_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, serde_json::to_vec(&base()).unwrap()).unwrap();
        let cfg = load_config(&path).unwrap();
        assert_eq!(cfg.model, dir.path().join("model.json"));
        assert_eq!(cfg.trials, 100);
        assert_eq!(cfg.metric, Metric::GoldenRun);
        assert_eq!(cfg.target, TargetSelector::Layers(vec![3]));
        assert_eq!(cfg.convergence_window, 20);
        assert_eq!(cfg.cache_dir(), dir.path().join("out").join("cache"));
    }

    #[test]
    fn probability_above_one_is_rejected() {
        let err = load(with(base(), "probabilities", json!([0.5, 1.5]))).unwrap_err();
        assert!(err.to_string().contains("1.5 outside [0, 1]"), "{err}");
    }

    #[test]
    fn specific_bit_31_is_valid() {
        let doc = with(with(base(), "fault", json!("bit_flip_specific")), "bit", json!(31));
        assert_eq!(load(doc).unwrap().fault, FaultKind::BitFlipSpecific(31));
    }

    #[test]
    fn bit_rules() {
        let specific = with(base(), "fault", json!("bit_flip_specific"));
        assert!(load(specific.clone()).unwrap_err().to_string().contains("required"));
        assert!(load(with(specific, "bit", json!(32))).unwrap_err().to_string().contains("outside 0..31"));
        assert!(load(with(base(), "bit", json!(3))).unwrap_err().to_string().contains("only allowed"));
    }

    #[test]
    fn add_sub_mul_is_a_valid_op_spec() {
        let doc = with(with(base(), "mode", json!("op")), "target", json!(["Add", "Sub", "Mul"]));
        let cfg = load(doc).unwrap();
        let set: BTreeSet<_> = [MicroOpKind::Add, MicroOpKind::Sub, MicroOpKind::Mul].into();
        assert_eq!(cfg.target, TargetSelector::OpSets(vec![set]));
    }

    #[test]
    fn target_forms() {
        let op = with(base(), "mode", json!("op"));
        assert_eq!(load(with(op.clone(), "target", json!("all"))).unwrap().target, TargetSelector::AllOps);
        let nested = load(with(op.clone(), "target", json!([["Add"], ["relu"]]))).unwrap().target;
        assert_eq!(
            nested,
            TargetSelector::OpSets(vec![[MicroOpKind::Add].into(), [MicroOpKind::Relu].into()])
        );
        assert!(load(with(op, "target", json!(3))).is_err());
        assert_eq!(load(with(base(), "target", json!("all"))).unwrap().target, TargetSelector::AllLayers);
        assert_eq!(load(with(base(), "target", json!([1, 4]))).unwrap().target, TargetSelector::Layers(vec![1, 4]));
        assert!(load(with(base(), "target", json!(["Add"]))).is_err());
    }

    #[test]
    fn other_rejections() {
        assert!(load(with(base(), "fault", json!("stuck_at_one"))).unwrap_err().to_string().contains("unknown fault kind"));
        assert!(load(with(base(), "probabilities", json!([0.5, 0.25]))).unwrap_err().to_string().contains("sorted"));
        assert!(load(with(base(), "probabilities", json!([]))).is_err());
        assert!(load(with(base(), "trials", json!(0))).is_err());
        assert!(load(with(base(), "colour", json!("red"))).is_err());
    }
}
