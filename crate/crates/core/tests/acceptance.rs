//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails. Run with
//! `cargo test -p bitstorm-core --test acceptance -- --nocapture`.

mod common;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use bitstorm_core::campaign::{emit_report, run_stochastic, CampaignResult, CampaignSpec, RunOptions, TargetInfo};
use bitstorm_core::campaign::stats::{accuracy, cma, converged, Reference};
use bitstorm_core::executor::{build_cache, golden_run, run_injected_layerwise};
use bitstorm_core::fault::{flip_bit, maybe_inject};
use bitstorm_core::io::{Metric, TargetSelector};
use bitstorm_core::layers::LayerKind;
use bitstorm_core::microops::expand_prelu;
use bitstorm_core::model::predict;
use bitstorm_core::stream::derive_stream;
use bitstorm_core::toy::{generate_toy, Toy};
use bitstorm_core::{FaultKind, FaultSpec, MicroOpKind, Tensor32};
use rand_chacha::rand_core::RngCore;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const TOY_SEED: u64 = 42;
const TOY_SAMPLES: usize = 256;
const TOY_CLASSES: usize = 10;
const SWEEP: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
const SWEEP_TRIALS: u32 = 100;
const SWEEP_SEED: u64 = 2024;

type Verdict = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, limit: Duration, detail: String) -> Verdict {
    ensure(elapsed < limit, || format!("took {elapsed:.2?}, limit {limit:?}"))?;
    Ok(format!("{detail}; {elapsed:.2?}"))
}

fn bit_flip_algebra() -> Verdict {
    let start = Instant::now();
    ensure(flip_bit(1.5f32, 31) == -1.5, || "sign bit does not negate".into())?;
    ensure(flip_bit(-0.0f32, 31).to_bits() == 0, || "sign bit of -0.0".into())?;
    ensure(flip_bit(1.0f32, 23) == 0.5, || "exponent bit 23 of 1.0 is not 0.5".into())?;
    ensure(flip_bit(0.0f32, 30) == 2.0, || "bit 30 of 0.0 is not 2.0".into())?;
    let mut rng = common::rng(1);
    let pairs = 100_000;
    let mut failures = 0;
    for _ in 0..pairs {
        let word = rng.next_u32();
        let bit = common::below(&mut rng, 32);
        let x = f32::from_bits(word);
        let once = flip_bit(x, bit);
        let twice = flip_bit(once, bit);
        if twice.to_bits() != word || (once.to_bits() ^ word) != 1 << bit {
            failures += 1;
        }
    }
    ensure(failures == 0, || format!("{failures} of {pairs} random pairs failed"))?;
    within(start.elapsed(), Duration::from_secs(1), format!("{pairs} random pairs, 0 failures"))
}

fn split_execution(toy: &Toy) -> Verdict {
    let start = Instant::now();
    let model = &toy.cnn;
    let inputs = common::random_inputs(&mut common::rng(2), model, 100);
    let full: Vec<Tensor32> = inputs.samples().iter().map(|x| model.forward(x).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    for layer in 0..model.layer_count() {
        // A budget of seven activations spreads the cache over several chunks.
        let sample_bytes = model.output_shape(layer).unwrap().iter().product::<usize>() as u64 * 4;
        let cache = build_cache(model, &inputs, layer, 7 * sample_bytes, dir.path().join(layer.to_string()))
            .map_err(|e| format!("layer {layer}: {e}"))?;
        let mut sample = 0;
        for chunk in 0..cache.chunk_count() {
            for activation in cache.load_chunk::<f32>(chunk).unwrap() {
                let scores = model.tail_scores(layer, &activation).unwrap();
                ensure(scores.bit_identical(&full[sample]), || {
                    format!("layer {layer} sample {sample}: tail scores differ from full forward")
                })?;
                ensure(
                    model.run_tail(layer, &activation).unwrap() == predict(&full[sample]).unwrap(),
                    || format!("layer {layer} sample {sample}: prediction differs"),
                )?;
                sample += 1;
            }
        }
        ensure(sample == 100, || format!("layer {layer}: cache replayed {sample} samples"))?;
    }
    within(
        start.elapsed(),
        Duration::from_secs(30),
        format!("{} layers x 100 inputs bit-identical", model.layer_count()),
    )
}

fn zero_probability(toy: &Toy) -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let golden = golden_run(&toy.cnn, &toy.dataset).unwrap().predictions;
    let prelu_golden = golden_run(&toy.prelu_cnn, &toy.dataset).unwrap().predictions;
    let labels = toy.dataset.labels().unwrap();
    let mut cells = 0;
    for metric in [Metric::GoldenRun, Metric::GroundTruth] {
        for (targets, model, preds) in [
            (TargetSelector::AllLayers, &toy.cnn, &golden),
            (TargetSelector::AllOps, &toy.prelu_cnn, &prelu_golden),
        ] {
            let expected = match metric {
                Metric::GoldenRun => 1.0,
                Metric::GroundTruth => accuracy(preds, Reference::Labels(labels)).unwrap(),
            };
            let spec = CampaignSpec {
                metric,
                trials: 100,
                ..CampaignSpec::new(targets.clone(), FaultKind::BitFlipRandom, vec![0.0], 7)
            };
            let result = run_stochastic(&spec, model, &toy.dataset, &RunOptions::new(dir.path())).unwrap();
            ensure(result.reference_accuracy == expected, || {
                format!("{metric:?}: reference {} vs golden {expected}", result.reference_accuracy)
            })?;
            for cell in &result.cells {
                ensure(cell.accuracies.iter().all(|&a| a == expected) && cell.std == 0.0, || {
                    format!("{metric:?} {}: mean {} std {}", cell.label, cell.mean, cell.std)
                })?;
                ensure(cell.injections == 0, || format!("{}: {} injections at p=0", cell.label, cell.injections))?;
            }
            cells += result.cells.len();
        }
    }
    within(
        start.elapsed(),
        Duration::from_secs(10),
        format!("{cells} cells over both modes and metrics, std 0"),
    )
}

fn prelu_expansion(toy: &Toy) -> Verdict {
    let start = Instant::now();
    let model = &toy.prelu_cnn;
    let micro = expand_prelu(model);
    let inputs = common::random_inputs(&mut common::rng(4), model, 1000);
    for (i, x) in inputs.samples().iter().enumerate() {
        let a = model.forward(x).unwrap();
        let b = micro.forward(x).unwrap();
        ensure(a.bit_identical(&b), || format!("input {i}: scores differ"))?;
        ensure(predict(&a).unwrap() == predict(&b).unwrap(), || format!("input {i}: prediction differs"))?;
    }
    Ok(format!("1000 random inputs bit-identical; {:.2?}", start.elapsed()))
}

fn pass_through(toy: &Toy) -> Verdict {
    let start = Instant::now();
    let model = &toy.cnn;
    let dir = tempfile::tempdir().unwrap();
    let pairs: Vec<(usize, usize)> = (0..model.layer_count())
        .filter(|&l| matches!(model.layers()[l].kind, LayerKind::Flatten | LayerKind::Dropout { .. }))
        .map(|l| (l, model.value_origin(l)))
        .collect();
    ensure(pairs.len() == 4, || format!("expected 4 pass-through layers, found {pairs:?}"))?;
    let mut trials = 0;
    for &(pass, origin) in &pairs {
        ensure(origin < pass, || format!("layer {pass} maps to {origin}"))?;
        let cache = |l: usize| build_cache(model, &toy.dataset, l, 1 << 26, dir.path().join(l.to_string())).unwrap();
        let (pc, oc) = (cache(pass), cache(origin));
        for p in [0.3, 1.0] {
            for trial in 0..25 {
                let run = |layer, c| {
                    let spec = FaultSpec::layer_wise(layer, FaultKind::BitFlipRandom, p, 11).unwrap();
                    run_injected_layerwise(model, c, &spec, trial).unwrap()
                };
                let (pa, ra) = run(pass, &pc);
                let (pb, rb) = run(origin, &oc);
                ensure(pa.predictions == pb.predictions, || {
                    format!("layer {pass} vs {origin}, p={p}, trial {trial}: predictions differ")
                })?;
                let faults = |r: &[bitstorm_core::InjectionRecord]| {
                    r.iter().map(|r| (r.sample, r.corruption)).collect::<Vec<_>>()
                };
                ensure(faults(&ra) == faults(&rb), || {
                    format!("layer {pass} vs {origin}, p={p}, trial {trial}: faults differ")
                })?;
                trials += 1;
            }
        }
    }
    Ok(format!(
        "pairs {pairs:?}, {trials} trials identical; {:.2?}",
        start.elapsed()
    ))
}

fn sweep(toy: &Toy, threads: usize, cache: &Path) -> (CampaignResult, Duration) {
    let spec = CampaignSpec {
        trials: SWEEP_TRIALS,
        metric: Metric::GoldenRun,
        ..CampaignSpec::new(TargetSelector::AllLayers, FaultKind::BitFlipRandom, SWEEP.to_vec(), SWEEP_SEED)
    };
    let mut options = RunOptions::new(cache);
    options.threads = threads;
    let start = Instant::now();
    let result = run_stochastic(&spec, &toy.cnn, &toy.dataset, &options).unwrap();
    (result, start.elapsed())
}

fn by_layer(result: &CampaignResult) -> BTreeMap<usize, Vec<f64>> {
    let mut out: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for cell in &result.cells {
        out.entry(cell.target).or_default().push(cell.mean);
    }
    out
}

fn monotone_degradation(result: &CampaignResult, elapsed: Duration) -> Verdict {
    ensure(result.cells.len() == 12 * SWEEP.len(), || format!("{} cells", result.cells.len()))?;
    let layers = by_layer(result);
    let mut dropped = Vec::new();
    for (layer, means) in &layers {
        for (i, w) in means.windows(2).enumerate() {
            ensure(w[1] <= w[0] + 0.01, || {
                format!("layer {layer}: mean rises from {} at p={} to {} at p={}", w[0], SWEEP[i], w[1], SWEEP[i + 1])
            })?;
        }
        if means[SWEEP.len() - 1] < means[0] {
            dropped.push(*layer);
        }
    }
    ensure(!dropped.is_empty(), || "no layer loses accuracy at p=1".into())?;
    let worst = layers
        .iter()
        .map(|(l, m)| (*l, m[SWEEP.len() - 1]))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    within(
        elapsed,
        Duration::from_secs(300),
        format!(
            "{} layers non-increasing, {} drop at p=1, lowest layer {} at {:.4}",
            layers.len(),
            dropped.len(),
            worst.0,
            worst.1
        ),
    )
}

fn cma_and_convergence(result: &CampaignResult) -> Verdict {
    let mut rng = common::rng(7);
    let ulp = |x: f64| f64::from_bits(x.to_bits() + 1) - x;
    for series in 0..10_000 {
        let len = 1 + common::below(&mut rng, 300) as usize;
        if series % 2 == 0 {
            // Accuracy-like values k/256: the exact mean is sum(k) / (256 n).
            let ks: Vec<u32> = (0..len).map(|_| common::below(&mut rng, 257)).collect();
            let values: Vec<f64> = ks.iter().map(|&k| k as f64 / 256.0).collect();
            let exact = ks.iter().map(|&k| u64::from(k)).sum::<u64>() as f64 / (256.0 * len as f64);
            let last = *cma(&values).unwrap().last().unwrap();
            ensure((last - exact).abs() <= ulp(exact), || {
                format!("series {series}: cma {last} vs exact mean {exact}")
            })?;
        } else {
            let values: Vec<f64> = (0..len).map(|_| common::uniform(&mut rng, 0.0, 1.0) as f64).collect();
            let mean = values.iter().sum::<f64>() / len as f64;
            let last = *cma(&values).unwrap().last().unwrap();
            ensure((last - mean).abs() <= ulp(mean), || format!("series {series}: cma {last} vs mean {mean}"))?;
        }
    }
    let mut widest: f64 = 0.0;
    for cell in &result.cells {
        let c = converged(&cell.cma, 20, 0.002).unwrap();
        ensure(c.converged, || format!("{} p={} did not converge", cell.label, cell.probability))?;
        let tail = &cell.cma[cell.cma.len() - 20..];
        let span = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - tail.iter().cloned().fold(f64::INFINITY, f64::min);
        widest = widest.max(span);
    }
    Ok(format!(
        "10000 series within 1 ulp; {} cells converged, widest window span {widest:.5}",
        result.cells.len()
    ))
}

fn thread_independence(toy: &Toy, single: &CampaignResult) -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let (parallel, elapsed) = sweep(toy, 8, &dir.path().join("cache8"));
    let (a, b) = (dir.path().join("t1"), dir.path().join("t8"));
    emit_report(single, &a).unwrap();
    emit_report(&parallel, &b).unwrap();
    for file in ["summary.json", "accuracy.csv", "records.csv"] {
        let x = std::fs::read(a.join(file)).unwrap();
        let y = std::fs::read(b.join(file)).unwrap();
        ensure(x == y, || format!("{file} differs between 1 and 8 workers"))?;
    }
    let records = std::fs::read_to_string(a.join("records.csv")).unwrap().lines().count() - 2;
    Ok(format!(
        "summary.json, accuracy.csv, records.csv identical ({records} records); 8 workers {elapsed:.2?}"
    ))
}

fn p_value(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    ChiSquared::new((counts.len() - 1) as f64).unwrap().sf(stat)
}

fn injection_statistics() -> Verdict {
    let calls = 10_000u64;
    let len = 37;
    let spec = FaultSpec::layer_wise(0, FaultKind::BitFlipRandom, 0.5, 99).unwrap();
    let mut elements = vec![0u64; len];
    let mut bits = vec![0u64; 32];
    let mut landed = 0u64;
    for call in 0..calls {
        let mut tensor = Tensor32::filled(vec![len], 1.0).unwrap();
        let mut stream = derive_stream(spec.seed, call / 100, call % 100, 0);
        if let Some(c) = maybe_inject(&mut tensor, &spec, &mut stream) {
            landed += 1;
            elements[c.element] += 1;
            bits[c.bit.unwrap() as usize] += 1;
        }
    }
    let (mean, sigma) = (calls as f64 * 0.5, (calls as f64 * 0.25).sqrt());
    ensure((landed as f64 - mean).abs() <= 3.0 * sigma, || {
        format!("{landed} injections, expected {mean} +- {:.0}", 3.0 * sigma)
    })?;
    let (pe, pb) = (p_value(&elements), p_value(&bits));
    ensure(pe > 0.001, || format!("element chi-square p-value {pe:.2e}"))?;
    ensure(pb > 0.001, || format!("bit chi-square p-value {pb:.2e}"))?;
    Ok(format!(
        "{landed} of {calls} injected (3 sigma = {:.0}); element p {pe:.3}, bit p {pb:.3}",
        3.0 * sigma
    ))
}

fn opwise_multiplicity(toy: &Toy) -> Verdict {
    let prelu_layers = toy
        .prelu_cnn
        .layers()
        .iter()
        .filter(|l| matches!(l.kind, LayerKind::PRelu { .. }))
        .count();
    let trials = 10;
    let spec = CampaignSpec {
        trials,
        ..CampaignSpec::new(
            TargetSelector::OpSets(vec![[MicroOpKind::Add].into()]),
            FaultKind::BitFlipRandom,
            vec![1.0],
            5,
        )
    };
    let dir = tempfile::tempdir().unwrap();
    let result = run_stochastic(&spec, &toy.prelu_cnn, &toy.dataset, &RunOptions::new(dir.path())).unwrap();
    let executions = match &result.targets[0] {
        TargetInfo::Ops {
            executions_per_inference,
            ..
        } => *executions_per_inference,
        other => return Err(format!("unexpected target {other:?}")),
    };
    ensure(executions == prelu_layers, || {
        format!("{executions} Add executions per inference, model has {prelu_layers} PReLU layers")
    })?;
    let expected = prelu_layers * toy.dataset.len();
    for trial in 0..trials {
        let n = result.records.iter().filter(|r| r.trial == trial).count();
        ensure(n == expected, || format!("trial {trial}: {n} records, expected {expected}"))?;
    }
    Ok(format!("{trials} trials x {expected} records ({prelu_layers} Adds x {} samples)", toy.dataset.len()))
}

fn run(number: usize, name: &str, check: impl FnOnce() -> Verdict) -> bool {
    let verdict = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
        let msg = panic
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    match &verdict {
        Ok(detail) => println!("criterion {number:>2} PASS  {name}: {detail}"),
        Err(reason) => println!("criterion {number:>2} FAIL  {name}: {reason}"),
    }
    verdict.is_ok()
}

#[test]
fn acceptance_criteria() {
    let toy = generate_toy(TOY_SEED, TOY_SAMPLES, TOY_CLASSES);
    let cache = tempfile::tempdir().unwrap();
    let (single, elapsed) = sweep(&toy, 1, cache.path());

    let results = [
        run(1, "bit-flip algebra", bit_flip_algebra),
        run(2, "split execution", || split_execution(&toy)),
        run(3, "zero-probability purity", || zero_probability(&toy)),
        run(4, "PReLU micro-op fidelity", || prelu_expansion(&toy)),
        run(5, "pass-through equivalence", || pass_through(&toy)),
        run(6, "monotone degradation", || monotone_degradation(&single, elapsed)),
        run(7, "running mean and convergence", || cma_and_convergence(&single)),
        run(8, "thread-count independence", || thread_independence(&toy, &single)),
        run(9, "injection statistics", injection_statistics),
        run(10, "operation-wise multiplicity", || opwise_multiplicity(&toy)),
    ];
    let failed: Vec<usize> = (1..=results.len()).filter(|&i| !results[i - 1]).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
