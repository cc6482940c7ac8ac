use std::collections::BTreeMap;
use std::thread;

use serde::{Deserialize, Serialize};

use super::{zero_kernels, AblationResult, AblationSpec, MetricName, Protocol, TrivialityReport};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::{fingerprint, partition_layer_blocks, LayerAddress, Model, UnitSlot};
use crate::train::evaluate;

/// Every kernel except the head, in forward order.
pub fn sweepable_addresses(model: &Model) -> Vec<LayerAddress> {
    model
        .layers()
        .into_iter()
        .map(|l| l.address)
        .filter(|a| !a.is_head())
        .collect()
}

/// Metric of `model` with `spec` zeroed.
pub fn evaluate_spec(model: &Model, data: &LabeledDataset, spec: &AblationSpec) -> Result<f64> {
    evaluate(&zero_kernels(model, spec)?, data)
}

/// Evaluates each spec on its own model copy; results keep the input order.
fn evaluate_all(model: &Model, data: &LabeledDataset, specs: &[AblationSpec]) -> Result<Vec<f64>> {
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(specs.len());
    if workers <= 1 {
        return specs.iter().map(|s| evaluate_spec(model, data, s)).collect();
    }
    let chunk = specs.len().div_ceil(workers);
    thread::scope(|scope| {
        let handles: Vec<_> = specs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().map(|s| evaluate_spec(model, data, s)).collect::<Vec<_>>()))
            .collect();
        let mut out = Vec::with_capacity(specs.len());
        for h in handles {
            for r in h.join().expect("ablation worker panicked") {
                out.push(r?);
            }
        }
        Ok(out)
    })
}

fn report(
    model: &Model,
    data: &LabeledDataset,
    protocol: Protocol,
    tau: f64,
    baseline: f64,
    results: Vec<AblationResult>,
    notes: Vec<String>,
) -> Result<TrivialityReport> {
    Ok(TrivialityReport {
        fingerprint: fingerprint(model)?,
        task: model.config.task,
        metric: MetricName::for_task(model.config.task),
        protocol,
        baseline,
        tau,
        results,
        seed: model.config.seed,
        dataset: data.descriptor.clone(),
        notes,
    })
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::config(format!("tau must be positive, got {tau}")))
    }
}

/// Zeroes each non-head kernel on its own, stem and projections included.
pub fn run_protocol_e1(model: &Model, data: &LabeledDataset, tau: f64) -> Result<TrivialityReport> {
    check_tau(tau)?;
    let metric = MetricName::for_task(model.config.task);
    let baseline = evaluate(model, data)?;
    let addrs = sweepable_addresses(model);
    let specs: Vec<AblationSpec> = addrs.iter().map(|&a| AblationSpec::single(a, Protocol::E1)).collect();
    let scores = evaluate_all(model, data, &specs)?;
    let results = addrs
        .iter()
        .zip(specs)
        .zip(scores)
        .map(|((a, spec), ablated)| AblationResult::new(a.to_string(), spec, metric, baseline, ablated, tau))
        .collect::<Result<_>>()?;
    let notes = vec![
        "stem kernel swept".to_string(),
        "head kernels excluded".to_string(),
    ];
    report(model, data, Protocol::E1, tau, baseline, results, notes)
}

/// Kernels E2 zeroes in `stage`: conv1 and conv2 of every unit after the first.
pub fn e2_spec(model: &Model, stage: usize) -> AblationSpec {
    let units = model.stages.get(stage).map_or(0, Vec::len);
    AblationSpec::new(
        (1..units).flat_map(|u| {
            [
                LayerAddress::unit(stage, u, UnitSlot::Conv1),
                LayerAddress::unit(stage, u, UnitSlot::Conv2),
            ]
        }),
        Protocol::E2,
    )
}

/// One result per stage, keeping the stage's first unit intact. A stage with
/// a single unit has nothing to zero and is recorded as a no-op.
pub fn run_protocol_e2(model: &Model, data: &LabeledDataset, tau: f64) -> Result<TrivialityReport> {
    check_tau(tau)?;
    let metric = MetricName::for_task(model.config.task);
    let baseline = evaluate(model, data)?;
    let blocks = partition_layer_blocks(model);
    let specs: Vec<AblationSpec> = blocks.iter().map(|b| e2_spec(model, b.stage)).collect();
    let active: Vec<AblationSpec> = specs.iter().filter(|s| !s.targets.is_empty()).cloned().collect();
    let mut scores = evaluate_all(model, data, &active)?.into_iter();
    let mut results = Vec::with_capacity(blocks.len());
    for (block, spec) in blocks.iter().zip(specs) {
        let noop = spec.targets.is_empty();
        let ablated = if noop {
            baseline
        } else {
            scores.next().expect("one score per active spec")
        };
        let mut r = AblationResult::new(block.label(), spec, metric, baseline, ablated, tau)?;
        r.noop = noop;
        results.push(r);
    }
    let notes = vec!["first unit of every block kept: feature-decomposition conv, its projection and the adjacent conv2".to_string()];
    report(model, data, Protocol::E2, tau, baseline, results, notes)
}

/// Zeroes the projection shortcut of each stage after the first.
pub fn run_protocol_e3(model: &Model, data: &LabeledDataset, tau: f64) -> Result<TrivialityReport> {
    check_tau(tau)?;
    let metric = MetricName::for_task(model.config.task);
    let baseline = evaluate(model, data)?;
    let blocks: Vec<_> = partition_layer_blocks(model).into_iter().filter(|b| b.stage > 0).collect();
    let specs: Vec<AblationSpec> = blocks
        .iter()
        .map(|b| AblationSpec::single(LayerAddress::unit(b.stage, 0, UnitSlot::Proj), Protocol::E3))
        .collect();
    let scores = evaluate_all(model, data, &specs)?;
    let results = blocks
        .iter()
        .zip(specs)
        .zip(scores)
        .map(|((b, spec), ablated)| AblationResult::new(b.label(), spec, metric, baseline, ablated, tau))
        .collect::<Result<_>>()?;
    report(model, data, Protocol::E3, tau, baseline, results, Vec::new())
}

pub fn run_protocol(model: &Model, data: &LabeledDataset, protocol: Protocol, tau: f64) -> Result<TrivialityReport> {
    match protocol {
        Protocol::E1 => run_protocol_e1(model, data, tau),
        Protocol::E2 => run_protocol_e2(model, data, tau),
        Protocol::E3 => run_protocol_e3(model, data, tau),
        Protocol::Custom => Err(Error::config("custom specs are evaluated with evaluate_spec")),
    }
}

/// Reports of one model keyed by protocol.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReportSet(pub BTreeMap<Protocol, TrivialityReport>);
