//! Kernel zeroing, sweep protocols, the closed-form collapse of zeroed
//! kernels, triviality verdicts and fold-based pruning.

mod oracle;
mod protocol;
mod prune;

pub use oracle::analytic_ablated_forward;
pub use protocol::{
    e2_spec, evaluate_spec, run_protocol, run_protocol_e1, run_protocol_e2, run_protocol_e3, sweepable_addresses,
    ReportSet,
};
pub use prune::fold_and_prune;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::DatasetDescriptor;
use crate::error::{Error, Result};
use crate::model::{LayerAddress, Model, Task};

pub const DEFAULT_TAU: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    /// Each kernel on its own.
    E1,
    /// Non-leading units of one stage at a time.
    E2,
    /// Each projection shortcut on its own.
    E3,
    Custom,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::E1 => "e1",
            Protocol::E2 => "e2",
            Protocol::E3 => "e3",
            Protocol::Custom => "custom",
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e1" => Ok(Protocol::E1),
            "e2" => Ok(Protocol::E2),
            "e3" => Ok(Protocol::E3),
            "custom" => Ok(Protocol::Custom),
            _ => Err(Error::config(format!("unknown protocol {s:?}"))),
        }
    }
}

/// Set of kernels zeroed together.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub targets: BTreeSet<LayerAddress>,
    pub protocol: Protocol,
}

impl AblationSpec {
    pub fn new(targets: impl IntoIterator<Item = LayerAddress>, protocol: Protocol) -> Self {
        Self {
            targets: targets.into_iter().collect(),
            protocol,
        }
    }

    pub fn single(target: LayerAddress, protocol: Protocol) -> Self {
        Self::new([target], protocol)
    }

    /// Non-empty, every address present, no head kernels.
    pub fn validate(&self, model: &Model) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::config("ablation spec has no targets"));
        }
        for &a in &self.targets {
            if a.is_head() {
                return Err(Error::config(format!("{a} is a head kernel and cannot be ablated")));
            }
            if model.kernel(a).is_none() {
                return Err(Error::config(format!("{a} is not a kernel of this model")));
            }
        }
        Ok(())
    }
}

/// Copy of `model` with every targeted kernel set to exact zeros.
pub fn zero_kernels(model: &Model, spec: &AblationSpec) -> Result<Model> {
    spec.validate(model)?;
    let mut out = model.clone();
    for &a in &spec.targets {
        out.kernel_mut(a).expect("validated").zero_out();
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Trivial,
    NonTrivial,
}

impl Verdict {
    pub fn is_trivial(self) -> bool {
        self == Verdict::Trivial
    }
}

/// Trivial when the metric moves by at most `tau` in either direction.
pub fn classify_triviality(baseline: f64, ablated: f64, tau: f64) -> Result<Verdict> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config(format!("tau must be positive, got {tau}")));
    }
    Ok(if (baseline - ablated).abs() <= tau {
        Verdict::Trivial
    } else {
        Verdict::NonTrivial
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricName {
    Accuracy,
    Dice,
}

impl MetricName {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Classify => MetricName::Accuracy,
            Task::Segment => MetricName::Dice,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    /// Address for single-kernel results, block label for block results.
    pub label: String,
    pub spec: AblationSpec,
    pub metric: MetricName,
    pub baseline: f64,
    pub ablated: f64,
    pub delta: f64,
    pub trivial: bool,
    pub tau: f64,
    /// Set when the protocol had nothing to zero for this position.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub noop: bool,
}

impl AblationResult {
    pub fn new(label: String, spec: AblationSpec, metric: MetricName, baseline: f64, ablated: f64, tau: f64) -> Result<Self> {
        let verdict = classify_triviality(baseline, ablated, tau)?;
        Ok(Self {
            label,
            spec,
            metric,
            baseline,
            ablated,
            delta: baseline - ablated,
            trivial: verdict.is_trivial(),
            tau,
            noop: false,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrivialityReport {
    pub fingerprint: String,
    pub task: Task,
    pub metric: MetricName,
    pub protocol: Protocol,
    pub baseline: f64,
    pub tau: f64,
    pub results: Vec<AblationResult>,
    pub seed: u64,
    pub dataset: DatasetDescriptor,
    /// Scope notes: which kernels the sweep covers and which it leaves out.
    pub notes: Vec<String>,
}

impl TrivialityReport {
    pub fn trivial_addresses(&self) -> BTreeSet<LayerAddress> {
        self.results
            .iter()
            .filter(|r| r.trivial && !r.noop)
            .flat_map(|r| r.spec.targets.iter().copied())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ResNetConfig, UnitSlot};
    use crate::tensor::Tensor;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small(seed: u64) -> Model {
        Model::build(&ResNetConfig {
            stage_widths: vec![4, 8],
            units_per_stage: vec![1, 2],
            input_size: 8,
            // live branches, so zeroing a kernel changes the output
            zero_init_residual: false,
            ..ResNetConfig::desk_classifier(seed)
        })
        .unwrap()
    }

    #[test]
    fn zeroing_is_idempotent_and_local() {
        let m = small(0);
        let a = LayerAddress::unit(0, 0, UnitSlot::Conv1);
        let spec = AblationSpec::single(a, Protocol::Custom);
        let z = zero_kernels(&m, &spec).unwrap();
        assert_eq!(zero_kernels(&z, &spec).unwrap(), z);
        for l in m.layers() {
            if l.address == a {
                assert!(z.kernel(a).unwrap().weights.iter().all(|&w| w == 0.0));
                assert!(z.kernel(a).unwrap().zeroed);
            } else {
                assert_eq!(z.kernel(l.address).map(|k| &k.weights), m.kernel(l.address).map(|k| &k.weights));
            }
        }
        assert_eq!(z.conv_bn(a).unwrap().bn, m.conv_bn(a).unwrap().bn);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_fn(m.input_shape(2), |_| rng.gen_range(-1.0..1.0));
        assert_ne!(m.forward_eval(&x).unwrap(), z.forward_eval(&x).unwrap());
    }

    #[test]
    fn invalid_specs() {
        let m = small(0);
        let empty = AblationSpec::new([], Protocol::Custom);
        assert!(matches!(zero_kernels(&m, &empty), Err(Error::Config(_))));
        let missing = AblationSpec::single(LayerAddress::unit(0, 0, UnitSlot::Proj), Protocol::Custom);
        assert!(matches!(zero_kernels(&m, &missing), Err(Error::Config(_))));
        let head = AblationSpec::single(LayerAddress::Head(0), Protocol::Custom);
        assert!(matches!(zero_kernels(&m, &head), Err(Error::Config(_))));
    }

    #[test]
    fn verdict_examples() {
        assert_eq!(classify_triviality(0.84, 0.84, 0.01).unwrap(), Verdict::Trivial);
        assert_eq!(classify_triviality(0.84, 0.16, 0.01).unwrap(), Verdict::NonTrivial);
        assert!(classify_triviality(0.5, 0.5, 0.0).is_err());
    }

    #[test]
    fn protocol_round_trip() {
        for p in [Protocol::E1, Protocol::E2, Protocol::E3, Protocol::Custom] {
            assert_eq!(p.as_str().parse::<Protocol>().unwrap(), p);
        }
        assert!("e4".parse::<Protocol>().is_err());
    }

    proptest! {
        #[test]
        fn triviality_monotone_in_tau(b in 0.0f64..1.0, a in 0.0f64..1.0, t in 1e-6f64..1.0, extra in 0.0f64..1.0) {
            if classify_triviality(b, a, t).unwrap().is_trivial() {
                prop_assert!(classify_triviality(b, a, t + extra).unwrap().is_trivial());
            }
        }

        #[test]
        fn identical_metrics_are_trivial(x in 0.0f64..1.0, t in 1e-9f64..1.0) {
            prop_assert!(classify_triviality(x, x, t).unwrap().is_trivial());
        }
    }
}
