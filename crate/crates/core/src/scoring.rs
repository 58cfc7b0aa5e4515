//! Row scoring and aggregate tables.
//!
//! A generation is scored purely against its probe: the final action is
//! canonicalized (trace `final_action` when present, raw output otherwise),
//! compared to the hidden post-manipulation label, and flagged for needless
//! switches on irrelevant-cue rows. Per-component binding subtracts the
//! irrelevant-cue false-positive rate from the matched target-condition hit
//! rate, so a coupler that reacts to everything earns nothing. Alignment
//! scoring reads only the trace and its provenance tags.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::guard::GuardDecision;
use crate::ontology::{canonicalize, ActionCode, ConditionName};
use crate::probes::ControlTag;
use crate::records::{
    ConditionClass, GenerationRecord, Keyed, ParseStatus, ProbeRecord, RecordKey, SourceTag,
    TraceBundle,
};

#[derive(Debug, thiserror::Error)]
pub enum ScoreError {
    #[error("generation key {generation} does not match probe key {probe}")]
    KeyMismatch { generation: String, probe: String },
}

// ── Per-row scoring ──────────────────────────────────────────────────────────

/// Alignment terms, each in {0, 0.5, 1}; `value` is their mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AfciTerms {
    pub reason: f64,
    pub memory: f64,
    pub veto: f64,
    pub self_state: f64,
    pub value: f64,
}

impl AfciTerms {
    pub fn new(reason: f64, memory: f64, veto: f64, self_state: f64) -> AfciTerms {
        AfciTerms {
            reason,
            memory,
            veto,
            self_state,
            value: (reason + memory + veto + self_state) / 4.0,
        }
    }
}

/// Scalar trace diagnostics, each in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceMetricValues {
    /// Mean of the two self-state weights.
    pub sci: f64,
    /// 1 when a populated reason graph accompanies a change of action
    /// relative to the first impulse, at canonical-action level.
    pub rsi: f64,
    /// 1 when the veto gate fired.
    pub vei: f64,
    /// Memory depth, saturating at the configured ceiling.
    pub aci: f64,
}

/// One fully scored row; the unit every aggregate consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub key: RecordKey,
    pub condition_class: ConditionClass,
    pub control: ControlTag,
    pub canonical_action: ActionCode,
    pub correct: bool,
    pub unnecessary_change: bool,
    pub changed_from_before: bool,
    pub unmapped: bool,
    pub parse_error: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub afci: Option<AfciTerms>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceMetricValues>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guard: Option<GuardDecision>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

impl Keyed for ScoredRecord {
    fn key(&self) -> &RecordKey {
        &self.key
    }
}

/// Scores one generation against its probe.
pub fn score_behavior(
    generation: &GenerationRecord,
    probe: &ProbeRecord,
) -> Result<ScoredRecord, ScoreError> {
    if generation.key != probe.key {
        return Err(ScoreError::KeyMismatch {
            generation: generation.key.to_string(),
            probe: probe.key.to_string(),
        });
    }
    let parse_error = generation.parse_status != ParseStatus::Ok;
    let canonical_action = if parse_error {
        ActionCode::InvalidOrUnmapped
    } else {
        let final_text = generation
            .trace_fields
            .as_ref()
            .map(|t| t.final_action.as_str())
            .filter(|t| !t.is_empty())
            .unwrap_or(&generation.raw_output);
        canonicalize(final_text)
    };
    let correct = canonical_action == probe.expected_after;
    let changed_from_before = canonical_action != probe.expected_before;
    let unnecessary_change =
        probe.condition_class == ConditionClass::Irrelevant && changed_from_before;
    let unmapped = !parse_error && canonical_action == ActionCode::InvalidOrUnmapped;
    let afci = generation.trace_fields.as_ref().map(alignment_terms);
    let trace = generation.trace_fields.as_ref().map(trace_metrics);
    Ok(ScoredRecord {
        key: generation.key.clone(),
        condition_class: probe.condition_class,
        control: probe.control,
        canonical_action,
        correct,
        unnecessary_change,
        changed_from_before,
        unmapped,
        parse_error,
        afci,
        trace,
        guard: None,
        extra: BTreeMap::new(),
    })
}

/// 1.0 when some node names the chosen action, 0.0 when some node names a
/// different real action, 0.5 when nodes exist but none maps, 0.0 when empty.
/// Any provenance other than `generated` forfeits the term.
fn node_alignment(nodes: &[String], provenance: SourceTag, chosen: ActionCode) -> f64 {
    if provenance != SourceTag::Generated || nodes.is_empty() {
        return 0.0;
    }
    let mut any_other = false;
    let mut any_match = false;
    for node in nodes {
        let code = canonicalize(node);
        if code == ActionCode::InvalidOrUnmapped {
            continue;
        }
        if code == chosen {
            any_match = true;
        } else {
            any_other = true;
        }
    }
    if any_match {
        1.0
    } else if any_other {
        0.0
    } else {
        0.5
    }
}

/// Alignment terms for one trace.
pub fn alignment_terms(trace: &TraceBundle) -> AfciTerms {
    let chosen = canonicalize(&trace.final_action);
    let reason = node_alignment(&trace.reason_graph, trace.provenance_of("reason_graph"), chosen);
    let memory = node_alignment(&trace.memory_trace, trace.provenance_of("memory_trace"), chosen);
    let veto = if trace.provenance_of("veto_state") == SourceTag::Generated
        && trace.veto_state.applied == (chosen == ActionCode::Veto)
    {
        1.0
    } else {
        0.0
    };
    let self_state = if trace.provenance_of("self_state") == SourceTag::Generated {
        match &trace.self_state.commitment {
            None => 0.0,
            Some(text) => {
                let code = canonicalize(text);
                if code == chosen && code != ActionCode::InvalidOrUnmapped {
                    1.0
                } else if code != ActionCode::InvalidOrUnmapped {
                    0.0
                } else {
                    0.5
                }
            }
        }
    } else {
        0.0
    };
    AfciTerms::new(reason, memory, veto, self_state)
}

/// Memory depth at which [`trace_metrics`] saturates.
pub const DEFAULT_MAX_DEPTH: usize = 10;

pub fn trace_metrics(trace: &TraceBundle) -> TraceMetricValues {
    trace_metrics_with_max_depth(trace, DEFAULT_MAX_DEPTH)
}

pub fn trace_metrics_with_max_depth(trace: &TraceBundle, max_depth: usize) -> TraceMetricValues {
    let sci = (trace.self_state.identity_weight + trace.self_state.continuity_weight) / 2.0;
    let changed = canonicalize(&trace.final_action) != canonicalize(&trace.first_impulse);
    let rsi = if !trace.reason_graph.is_empty() && changed { 1.0 } else { 0.0 };
    let vei = if trace.veto_state.applied { 1.0 } else { 0.0 };
    let aci = if max_depth == 0 {
        1.0
    } else {
        (trace.memory_trace.len() as f64 / max_depth as f64).min(1.0)
    };
    TraceMetricValues { sci, rsi, vei, aci }
}

// ── Component tables ─────────────────────────────────────────────────────────

/// The four lesionable components, each probed by one matched condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentKind {
    #[serde(rename = "RSI")]
    Rsi,
    #[serde(rename = "MCI")]
    Mci,
    #[serde(rename = "VEI")]
    Vei,
    #[serde(rename = "SCI")]
    Sci,
}

impl ComponentKind {
    pub const ALL: [ComponentKind; 4] =
        [ComponentKind::Rsi, ComponentKind::Mci, ComponentKind::Vei, ComponentKind::Sci];

    pub fn as_str(&self) -> &'static str {
        match self {
            ComponentKind::Rsi => "RSI",
            ComponentKind::Mci => "MCI",
            ComponentKind::Vei => "VEI",
            ComponentKind::Sci => "SCI",
        }
    }

    /// The target condition whose hit rate feeds this component.
    pub fn condition(&self) -> ConditionName {
        match self {
            ComponentKind::Rsi => ConditionName::ReasonFlip,
            ComponentKind::Mci => ConditionName::MemoryConflict,
            ComponentKind::Vei => ConditionName::VetoCue,
            ComponentKind::Sci => ConditionName::SelfContinuity,
        }
    }
}

impl std::fmt::Display for ComponentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One component's binding score and its two ingredients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentScore {
    pub component: ComponentKind,
    /// Target hit rate minus irrelevant-cue false-positive rate.
    pub value: f64,
    pub target_rate: f64,
    pub irrelevant_fp_rate: f64,
    pub target_rows: usize,
    pub irrelevant_rows: usize,
}

/// Component scores for one (dataset, variant) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentTable {
    pub dataset: String,
    pub variant: String,
    pub scores: Vec<ComponentScore>,
    /// Components that could not be computed, with the reason.
    pub omitted: Vec<(ComponentKind, String)>,
    /// Mean of the four components; absent when any is omitted.
    pub composite: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Mean of per-component binding values.
pub fn behavioral_composite(values: &[f64]) -> Option<f64> {
    mean(values.iter().copied())
}

/// Builds the component table for one (dataset, variant) cell. Rows from
/// other cells are ignored, so callers may pass the whole run.
pub fn component_scores(rows: &[ScoredRecord], dataset: &str, variant: &str) -> ComponentTable {
    let cell: Vec<&ScoredRecord> = rows
        .iter()
        .filter(|r| r.key.dataset == dataset && r.key.variant == variant)
        .collect();
    let irrelevant: Vec<&&ScoredRecord> =
        cell.iter().filter(|r| r.condition_class == ConditionClass::Irrelevant).collect();
    let irrelevant_rows = irrelevant.len();
    let fp_rate = if irrelevant_rows == 0 {
        None
    } else {
        Some(
            irrelevant.iter().filter(|r| r.unnecessary_change).count() as f64
                / irrelevant_rows as f64,
        )
    };
    let mut scores = Vec::new();
    let mut omitted = Vec::new();
    for kind in ComponentKind::ALL {
        let condition = kind.condition().as_str();
        let targets: Vec<&&ScoredRecord> = cell
            .iter()
            .filter(|r| {
                r.key.condition == condition && r.condition_class == ConditionClass::Target
            })
            .collect();
        if targets.is_empty() {
            omitted.push((kind, format!("no target rows for condition {condition}")));
            continue;
        }
        let Some(fp) = fp_rate else {
            omitted.push((kind, "no irrelevant-cue rows to anchor the false-positive rate".into()));
            continue;
        };
        let target_rate =
            targets.iter().filter(|r| r.correct).count() as f64 / targets.len() as f64;
        scores.push(ComponentScore {
            component: kind,
            value: target_rate - fp,
            target_rate,
            irrelevant_fp_rate: fp,
            target_rows: targets.len(),
            irrelevant_rows,
        });
    }
    let composite = if omitted.is_empty() {
        behavioral_composite(&scores.iter().map(|s| s.value).collect::<Vec<f64>>())
    } else {
        None
    };
    ComponentTable { dataset: dataset.to_string(), variant: variant.to_string(), scores, omitted, composite }
}

/// Mean alignment value over a (dataset, variant) cell's traced rows.
pub fn mean_alignment(rows: &[ScoredRecord], dataset: &str, variant: &str) -> Option<f64> {
    mean(
        rows.iter()
            .filter(|r| r.key.dataset == dataset && r.key.variant == variant)
            .filter_map(|r| r.afci.as_ref().map(|a| a.value)),
    )
}

// ── Run summary and gates ────────────────────────────────────────────────────

/// Cross-dataset facts the gate ledger and report consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub datasets: Vec<String>,
    pub structured_variant: String,
    pub stochastic_variant: String,
    /// dataset -> variant -> behavioral composite.
    pub composites: BTreeMap<String, BTreeMap<String, Option<f64>>>,
    pub parse_rate: f64,
    pub unmapped_rate: f64,
    /// Needless-switch rate of the structured variant on irrelevant-cue rows.
    pub structured_irrelevant_fp: f64,
    /// Datasets where the structured composite strictly beats the stochastic.
    pub directional_count: usize,
    pub directional_total: usize,
    pub directional_required: usize,
    /// Lower confidence bound on the pooled structured-minus-stochastic gap.
    pub bootstrap_lower: f64,
    /// dataset/variant cells with no computable composite.
    pub missing_cells: Vec<String>,
}

impl ReportSummary {
    pub fn build(
        rows: &[ScoredRecord],
        datasets: &[String],
        structured_variant: &str,
        stochastic_variant: &str,
        bootstrap_lower: f64,
    ) -> ReportSummary {
        let total = rows.len().max(1) as f64;
        let parse_rate = rows.iter().filter(|r| r.parse_error).count() as f64 / total;
        let unmapped_rate = rows.iter().filter(|r| r.unmapped).count() as f64 / total;
        let structured_irrelevant: Vec<&ScoredRecord> = rows
            .iter()
            .filter(|r| {
                r.key.variant == structured_variant
                    && r.condition_class == ConditionClass::Irrelevant
            })
            .collect();
        let structured_irrelevant_fp = if structured_irrelevant.is_empty() {
            1.0
        } else {
            structured_irrelevant.iter().filter(|r| r.unnecessary_change).count() as f64
                / structured_irrelevant.len() as f64
        };

        let mut composites: BTreeMap<String, BTreeMap<String, Option<f64>>> = BTreeMap::new();
        let mut missing_cells = Vec::new();
        let mut directional_count = 0usize;
        let mut directional_total = 0usize;
        for dataset in datasets {
            let mut per_variant = BTreeMap::new();
            for variant in [structured_variant, stochastic_variant] {
                let table = component_scores(rows, dataset, variant);
                if table.composite.is_none() {
                    missing_cells.push(format!("{dataset}/{variant}"));
                }
                per_variant.insert(variant.to_string(), table.composite);
            }
            let structured = per_variant.get(structured_variant).copied().flatten();
            let stochastic = per_variant.get(stochastic_variant).copied().flatten();
            if let (Some(s), Some(r)) = (structured, stochastic) {
                directional_total += 1;
                if s > r {
                    directional_count += 1;
                }
            }
            composites.insert(dataset.clone(), per_variant);
        }
        ReportSummary {
            datasets: datasets.to_vec(),
            structured_variant: structured_variant.to_string(),
            stochastic_variant: stochastic_variant.to_string(),
            composites,
            parse_rate,
            unmapped_rate,
            structured_irrelevant_fp,
            directional_count,
            directional_total,
            directional_required: datasets.len().saturating_sub(1).max(1),
            bootstrap_lower,
            missing_cells,
        }
    }
}

/// One validity gate: observed value against its threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateCheck {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
    pub detail: String,
}

/// All validity gates; the run is reportable only when every gate passes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateLedger {
    pub checks: Vec<GateCheck>,
    pub pass: bool,
}

impl GateLedger {
    pub fn check(&self, name: &str) -> Option<&GateCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Evaluates the run-validity gates against a summary.
pub fn gate_check(summary: &ReportSummary) -> GateLedger {
    let mut checks = Vec::new();
    checks.push(GateCheck {
        name: "parse_rate".to_string(),
        value: summary.parse_rate,
        threshold: 0.02,
        pass: summary.parse_rate < 0.02,
        detail: "fraction of rows whose output failed to parse".to_string(),
    });
    checks.push(GateCheck {
        name: "unmapped_rate".to_string(),
        value: summary.unmapped_rate,
        threshold: 0.02,
        pass: summary.unmapped_rate < 0.02,
        detail: "fraction of parsed rows canonicalizing to the sink code".to_string(),
    });
    checks.push(GateCheck {
        name: "structured_irrelevant_fp".to_string(),
        value: summary.structured_irrelevant_fp,
        threshold: 0.15,
        pass: summary.structured_irrelevant_fp < 0.15,
        detail: "needless-switch rate of the structured variant on irrelevant cues".to_string(),
    });
    let directional_detail = if summary.missing_cells.is_empty() {
        format!(
            "structured beats stochastic on {} of {} datasets (need {})",
            summary.directional_count, summary.directional_total, summary.directional_required
        )
    } else {
        format!("missing composite cells: {}", summary.missing_cells.join(", "))
    };
    checks.push(GateCheck {
        name: "directional".to_string(),
        value: summary.directional_count as f64,
        threshold: summary.directional_required as f64,
        pass: summary.missing_cells.is_empty()
            && summary.directional_count >= summary.directional_required,
        detail: directional_detail,
    });
    checks.push(GateCheck {
        name: "bootstrap_lower".to_string(),
        value: summary.bootstrap_lower,
        threshold: 0.0,
        pass: summary.bootstrap_lower > 0.0,
        detail: "lower confidence bound of the pooled composite gap".to_string(),
    });
    let pass = checks.iter().all(|c| c.pass);
    GateLedger { checks, pass }
}
