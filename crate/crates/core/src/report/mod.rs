//! Rendering of ablation reports and comparison against published block tables.

mod svg;
pub mod xml;

pub use svg::render_svg;

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::ablation::{classify_triviality, Protocol, ReportSet, TrivialityReport};
use crate::error::{Error, Result};
use crate::model::checkpoint::write_atomic;

/// Block-level values from a published results table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferencePattern {
    pub id: &'static str,
    pub source: &'static str,
    pub protocol: Protocol,
    pub baseline: f64,
    pub rows: &'static [(&'static str, f64)],
}

pub const REFERENCE_PATTERNS: &[ReferencePattern] = &[
    ReferencePattern {
        id: "cifar10-e2",
        source: "CIFAR-10, zeroing all but the first unit of one block",
        protocol: Protocol::E2,
        baseline: 0.84,
        rows: &[
            ("Layer block 1", 0.51),
            ("Layer block 2", 0.61),
            ("Layer block 3", 0.83),
            ("Layer block 4", 0.84),
        ],
    },
    ReferencePattern {
        id: "cifar10-e3",
        source: "CIFAR-10, zeroing one projection shortcut",
        protocol: Protocol::E3,
        baseline: 0.84,
        rows: &[("Layer block 2", 0.28), ("Layer block 3", 0.33), ("Layer block 4", 0.16)],
    },
    ReferencePattern {
        id: "t1-e2",
        source: "T1 segmentation (Dice), zeroing all but the first unit of one block",
        protocol: Protocol::E2,
        baseline: 0.87,
        rows: &[
            ("Layer block 1", 0.82),
            ("Layer block 2", 0.86),
            ("Layer block 3", 0.82),
            ("Layer block 4", 0.00),
        ],
    },
    ReferencePattern {
        id: "t1-e3",
        source: "T1 segmentation (Dice), zeroing one projection shortcut",
        protocol: Protocol::E3,
        baseline: 0.87,
        rows: &[("Layer block 2", 0.00), ("Layer block 3", 0.00), ("Layer block 4", 0.00)],
    },
];

pub fn reference_pattern(id: &str) -> Result<&'static ReferencePattern> {
    REFERENCE_PATTERNS.iter().find(|r| r.id == id).ok_or_else(|| {
        let ids: Vec<&str> = REFERENCE_PATTERNS.iter().map(|r| r.id).collect();
        Error::config(format!("unknown reference {id:?}; known: {}", ids.join(", ")))
    })
}

/// Table values carry two decimals, so a drop of exactly tau must not flip on rounding.
const REFERENCE_SLACK: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub label: String,
    pub desk: Option<f64>,
    pub desk_trivial: Option<bool>,
    pub reference: f64,
    pub reference_trivial: bool,
    pub agree: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub reference: String,
    pub desk_baseline: f64,
    pub reference_baseline: f64,
    pub tau: f64,
    pub rows: Vec<ComparisonRow>,
}

impl Comparison {
    /// Same verdict at every reference position.
    pub fn qualitative_match(&self) -> bool {
        self.rows.iter().all(|r| r.agree)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "reference {} (tau {})", self.reference, self.tau);
        let _ = writeln!(
            s,
            "{:<16}{:>10}{:>14}{:>10}{:>14}  match",
            "position", "desk", "verdict", "ref", "verdict"
        );
        let _ = writeln!(
            s,
            "{:<16}{:>10.4}{:>14}{:>10.4}{:>14}",
            "baseline", self.desk_baseline, "", self.reference_baseline, ""
        );
        for r in &self.rows {
            let desk = r.desk.map_or("-".to_string(), |v| format!("{v:.4}"));
            let dv = r.desk_trivial.map_or("-", verdict_word);
            let _ = writeln!(
                s,
                "{:<16}{:>10}{:>14}{:>10.4}{:>14}  {}",
                r.label,
                desk,
                dv,
                r.reference,
                verdict_word(r.reference_trivial),
                if r.agree { "yes" } else { "no" }
            );
        }
        let _ = writeln!(
            s,
            "qualitative match: {}",
            if self.qualitative_match() { "yes" } else { "no" }
        );
        s
    }
}

fn verdict_word(trivial: bool) -> &'static str {
    if trivial {
        "trivial"
    } else {
        "non-trivial"
    }
}

/// Lines up report results with a reference table by block label and applies
/// the report's tau to both columns.
pub fn compare(report: &TrivialityReport, reference: &ReferencePattern) -> Result<Comparison> {
    if report.protocol != reference.protocol {
        return Err(Error::config(format!(
            "reference {} is a {} table but the report is {}",
            reference.id, reference.protocol, report.protocol
        )));
    }
    let mut rows = Vec::with_capacity(reference.rows.len());
    for &(label, value) in reference.rows {
        let reference_trivial = classify_triviality(reference.baseline, value, report.tau + REFERENCE_SLACK)?.is_trivial();
        let hit = report.results.iter().find(|r| r.label == label);
        let desk_trivial = hit.map(|r| r.trivial);
        rows.push(ComparisonRow {
            label: label.to_string(),
            desk: hit.map(|r| r.ablated),
            desk_trivial,
            reference: value,
            reference_trivial,
            agree: desk_trivial == Some(reference_trivial),
        });
    }
    Ok(Comparison {
        reference: reference.id.to_string(),
        desk_baseline: report.baseline,
        reference_baseline: reference.baseline,
        tau: report.tau,
        rows,
    })
}

fn targets_text(r: &crate::ablation::AblationResult) -> String {
    r.spec.targets.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(" ")
}

pub fn render_text(report: &TrivialityReport) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{} on model {} ({:?}, {:?} baseline {:.4}, tau {})",
        report.protocol, report.fingerprint, report.task, report.metric, report.baseline, report.tau
    );
    for n in &report.notes {
        let _ = writeln!(s, "  note: {n}");
    }
    let _ = writeln!(s, "{:<16}{:>10}{:>10}  {:<12} targets", "position", "ablated", "delta", "verdict");
    for r in &report.results {
        let verdict = if r.noop { "no-op" } else { verdict_word(r.trivial) };
        let _ = writeln!(
            s,
            "{:<16}{:>10.4}{:>10.4}  {:<12} {}",
            r.label,
            r.ablated,
            r.delta,
            verdict,
            targets_text(r)
        );
    }
    s
}

/// Header plus one row per result.
pub fn render_csv(report: &TrivialityReport) -> String {
    let mut s = String::from("protocol,position,targets,metric,baseline,ablated,delta,tau,trivial,noop\n");
    for r in &report.results {
        let metric = serde_json::to_value(r.metric).expect("unit enum");
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            report.protocol,
            r.label,
            targets_text(r),
            metric.as_str().unwrap_or_default(),
            r.baseline,
            r.ablated,
            r.delta,
            r.tau,
            r.trivial,
            r.noop
        );
    }
    s
}

/// Canonical serialized form: pretty JSON with fields in declaration order.
pub fn emit_reports(set: &ReportSet) -> String {
    let mut s = serde_json::to_string_pretty(set).expect("reports serialize");
    s.push('\n');
    s
}

pub fn parse_reports(text: &str) -> Result<ReportSet> {
    serde_json::from_str(text).map_err(|e| Error::format(format!("malformed report: {e}")))
}

pub fn save_reports(set: &ReportSet, path: &Path) -> Result<()> {
    write_atomic(path, emit_reports(set).as_bytes())
}

pub fn load_reports(path: &Path) -> Result<ReportSet> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_reports(&text)
}
