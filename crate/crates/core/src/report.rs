//! Markdown report rendering: gate banner, per-dataset component tables as
//! embedded CSV blocks, text contrast forests, entropy layers, wrapper and
//! hygiene summaries, and optional recovery/predictor sections.
//!
//! Rendering is pure string formatting over already-computed artifacts, with
//! stable ordering and fixed-precision numbers, so one run's report is
//! byte-identical across re-renders.

use serde::{Deserialize, Serialize};

use crate::pipeline::{AnalysisOutput, RecoveryRow, RunPlan, WrapperSummary};
use crate::probes::LeakageReport;
use crate::scoring::ComponentKind;
use crate::stats::{ContrastTable, DeltaAucReport, ThresholdPoint};

/// Out-of-fold predictor results rendered into the report when a feature
/// table was supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorSummary {
    pub table_rows: usize,
    pub groups: usize,
    pub baseline_features: Vec<String>,
    pub augmented_features: Vec<String>,
    pub delta: DeltaAucReport,
    pub thresholds: Vec<ThresholdPoint>,
}

/// Everything the renderer may draw on; absent pieces are listed instead of
/// silently skipped.
#[derive(Debug, Clone, Default)]
pub struct ReportInputs {
    pub plan: Option<RunPlan>,
    pub analysis: Option<AnalysisOutput>,
    pub wrapper: Option<WrapperSummary>,
    pub hygiene: Option<LeakageReport>,
    pub predictor: Option<PredictorSummary>,
    /// Artifact names that were expected but not found.
    pub missing: Vec<String>,
}

fn num(value: f64) -> String {
    format!("{value:.6}")
}

fn opt_num(value: Option<f64>) -> String {
    value.map(num).unwrap_or_else(|| "n/a".to_string())
}

fn pass_word(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn push_csv(out: &mut String, header: &str, rows: &[String]) {
    out.push_str("```csv\n");
    out.push_str(header);
    out.push('\n');
    for row in rows {
        out.push_str(row);
        out.push('\n');
    }
    out.push_str("```\n\n");
}

fn forest(out: &mut String, table: &ContrastTable) {
    out.push_str(&format!(
        "**{} vs {}** mean delta {}, min {}\n\n",
        table.metric,
        table.comparator,
        num(table.mean),
        num(table.min),
    ));
    let width = table.datasets.iter().map(|d| d.len()).max().unwrap_or(0);
    let scale = table.deltas.iter().map(|d| d.abs()).fold(0.0f64, f64::max);
    out.push_str("```text\n");
    for (dataset, delta) in table.datasets.iter().zip(&table.deltas) {
        let bar_len = if scale > 0.0 { ((delta.abs() / scale) * 32.0).round() as usize } else { 0 };
        let bar: String = std::iter::repeat('#').take(bar_len).collect();
        let sign = if *delta < 0.0 { "-" } else { "+" };
        out.push_str(&format!("{dataset:<width$}  {:>+10.6}  {sign}|{bar}\n", delta));
    }
    out.push_str("```\n\n");
    if let Some(p) = table.sign_test_p {
        out.push_str(&format!("- one-sided sign test p = {}\n", num(p)));
    } else if table.degenerate_sign_test {
        out.push_str("- sign test degenerate (all deltas tied at zero)\n");
    }
    out.push_str(&format!(
        "- cluster bootstrap lower bound ({} draws): {}\n",
        table.bootstrap_draws,
        num(table.bootstrap_lower),
    ));
    out.push_str(&format!("- leave-one-dataset-out minimum mean: {}\n", {
        let mut lodo = table.lodo_means.clone();
        lodo.sort_by(|a, b| a.partial_cmp(b).expect("finite lodo means"));
        lodo.first().map(|v| num(*v)).unwrap_or_else(|| "n/a".to_string())
    }));
    if let Some(trimmed) = table.top_effect_removed {
        out.push_str(&format!("- mean with largest effect removed: {}\n", num(trimmed)));
    }
    out.push('\n');
}

fn summary_section(out: &mut String, analysis: &AnalysisOutput) {
    let summary = &analysis.summary;
    let gates = &analysis.gates;
    out.push_str(&format!("## Overall gates: {}\n\n", pass_word(gates.pass)));
    for check in &gates.checks {
        out.push_str(&format!(
            "- {} [{}]: value {} vs threshold {} ({})\n",
            check.name,
            pass_word(check.pass),
            num(check.value),
            num(check.threshold),
            check.detail,
        ));
    }
    out.push('\n');
    if !summary.missing_cells.is_empty() {
        out.push_str("Datasets missing a structured/stochastic composite pair:\n");
        for cell in &summary.missing_cells {
            out.push_str(&format!("- {cell}\n"));
        }
        out.push('\n');
    }
}

fn component_section(out: &mut String, analysis: &AnalysisOutput) {
    out.push_str("## Component tables\n\n");
    let mut datasets: Vec<&str> = analysis.components.iter().map(|t| t.dataset.as_str()).collect();
    datasets.dedup();
    for dataset in datasets {
        out.push_str(&format!("### {dataset}\n\n"));
        let mut rows = Vec::new();
        let mut notes = Vec::new();
        for table in analysis.components.iter().filter(|t| t.dataset == dataset) {
            let mut cells = vec![table.variant.clone()];
            for kind in ComponentKind::ALL {
                let cell = table
                    .scores
                    .iter()
                    .find(|s| s.component == kind)
                    .map(|s| num(s.value))
                    .unwrap_or_default();
                cells.push(cell);
            }
            cells.push(table.composite.map(num).unwrap_or_default());
            rows.push(cells.join(","));
            for (kind, why) in &table.omitted {
                notes.push(format!("- {} {}: {}", table.variant, kind, why));
            }
        }
        push_csv(out, "variant,RSI,MCI,VEI,SCI,composite", &rows);
        if !notes.is_empty() {
            out.push_str("Omitted components:\n");
            for note in notes {
                out.push_str(&note);
                out.push('\n');
            }
            out.push('\n');
        }
    }
}

fn entropy_section(out: &mut String, analysis: &AnalysisOutput) {
    out.push_str("## Output entropy by description layer\n\n");
    let mut rows = Vec::new();
    for report in &analysis.entropy.layers {
        for cell in &report.cells {
            rows.push(format!(
                "{},{},{},{},{}",
                report.layer,
                cell.dataset,
                cell.variant,
                num(cell.entropy_bits),
                cell.rows,
            ));
        }
    }
    push_csv(out, "layer,dataset,variant,entropy_bits,rows", &rows);
    if let Some(gap) = &analysis.entropy.calibration {
        out.push_str(&format!(
            "Calibration gap for {} against {}: max layer gap {} ({})\n\n",
            gap.candidate,
            gap.reference,
            num(gap.gamma),
            pass_word(gap.pass),
        ));
        for (layer, value) in &gap.per_layer {
            out.push_str(&format!("- {layer}: {}\n", num(*value)));
        }
        out.push('\n');
    }
    if let Some(matching) = &analysis.matching {
        out.push_str(&format!(
            "Budget-matching diagnostic: {}\n\n",
            pass_word(matching.pass)
        ));
        for check in &matching.checks {
            out.push_str(&format!(
                "- {} [{}]: {} (allowed {})\n",
                check.name,
                pass_word(check.pass),
                num(check.value),
                check.bound,
            ));
        }
        out.push('\n');
    }
}

fn hygiene_section(out: &mut String, hygiene: &LeakageReport) {
    out.push_str(&format!("## Prompt hygiene: {}\n\n", pass_word(hygiene.pass)));
    out.push_str(&format!(
        "- rows audited: {}\n- serialized prompts containing the scorer target key: {}\n",
        hygiene.rows, hygiene.target_key_hits,
    ));
    out.push_str(&format!(
        "- scrambled rows: {} (foreign decisive field on all: {})\n\n",
        hygiene.scrambled_rows,
        if hygiene.scrambled_rows == hygiene.scrambled_foreign { "yes" } else { "no" },
    ));
}

fn wrapper_section(out: &mut String, wrapper: &WrapperSummary) {
    out.push_str("## Wrapper\n\n");
    let visibility = serde_json::to_value(wrapper.visibility)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default();
    out.push_str(&format!("- visibility: {visibility}\n"));
    out.push_str(&format!(
        "- scrambled rows: {} (foreign-following raw {} | wrapped {})\n",
        wrapper.scrambled_rows,
        opt_num(wrapper.raw_following_rate),
        opt_num(wrapper.wrapped_following_rate),
    ));
    if wrapper.irrelevant_rows == 0 {
        out.push_str("- irrelevant set empty: accuracy preservation not checkable\n");
    } else {
        out.push_str(&format!(
            "- irrelevant-cue rows: {} (accuracy raw {} | wrapped {})\n",
            wrapper.irrelevant_rows,
            opt_num(wrapper.raw_irrelevant_accuracy),
            opt_num(wrapper.wrapped_irrelevant_accuracy),
        ));
    }
    let mut rows = Vec::new();
    for (verdict, count) in &wrapper.verdict_counts {
        rows.push(format!("{verdict},{count}"));
    }
    out.push('\n');
    push_csv(out, "verdict,rows", &rows);
}

fn recovery_section(out: &mut String, rows: &[RecoveryRow]) {
    if rows.is_empty() {
        return;
    }
    out.push_str("## Single-field recovery\n\n");
    let mut lines = Vec::new();
    for row in rows {
        lines.push(format!(
            "{},{},{},{},{}",
            row.dataset,
            num(row.full_rate),
            num(row.only_rate),
            num(row.control_rate),
            row.fraction.map(num).unwrap_or_default(),
        ));
    }
    push_csv(out, "dataset,full_state,only_decisive,lesioned,recovered_fraction", &lines);
    for row in rows {
        if let Some(note) = &row.note {
            out.push_str(&format!("- {}: {}\n", row.dataset, note));
        }
    }
    out.push('\n');
}

fn predictor_section(out: &mut String, predictor: &PredictorSummary) {
    out.push_str("## Violation predictor\n\n");
    out.push_str(&format!(
        "- rows {} across {} groups; baseline features {:?}, augmented {:?}\n",
        predictor.table_rows,
        predictor.groups,
        predictor.baseline_features,
        predictor.augmented_features,
    ));
    out.push_str(&format!(
        "- out-of-fold AUC: baseline {}, augmented {}, delta {} (cluster lower {})\n\n",
        num(predictor.delta.baseline_auc),
        num(predictor.delta.augmented_auc),
        num(predictor.delta.delta),
        opt_num(predictor.delta.cluster_lower),
    ));
    let mut rows = Vec::new();
    for point in &predictor.thresholds {
        rows.push(format!(
            "{},{},{},{},{},{}",
            num(point.threshold),
            num(point.accepted_fraction),
            num(point.accepted_hit_rate),
            num(point.accepted_violation_rate),
            num(point.net_benefit),
            point.empty_acceptance,
        ));
    }
    push_csv(
        out,
        "threshold,accepted_fraction,accepted_hit_rate,accepted_violation_rate,net_benefit,empty_acceptance",
        &rows,
    );
}

/// Full-run renderer used by the pipeline's report stage.
pub fn render_report(
    plan: &RunPlan,
    analysis: &AnalysisOutput,
    wrapper: &WrapperSummary,
    hygiene: &LeakageReport,
) -> String {
    render_inputs(&ReportInputs {
        plan: Some(plan.clone()),
        analysis: Some(analysis.clone()),
        wrapper: Some(wrapper.clone()),
        hygiene: Some(hygiene.clone()),
        predictor: None,
        missing: Vec::new(),
    })
}

/// Renders whatever is available; everything listed in `missing` is
/// enumerated so a partial directory yields a truthful partial report.
pub fn render_inputs(inputs: &ReportInputs) -> String {
    let mut out = String::from("# State-binding run report\n\n");
    if let Some(plan) = &inputs.plan {
        out.push_str(&format!(
            "Grid: {} datasets x {} conditions x {} arms x {} replicates = {} scored rows.\n\n",
            plan.datasets.len(),
            plan.conditions.len(),
            plan.arms.len(),
            plan.replicates,
            plan.scored_rows,
        ));
        out.push_str(&format!("- datasets: {}\n", plan.datasets.join(", ")));
        out.push_str(&format!("- arms: {}\n\n", plan.arms.join(", ")));
    }
    if let Some(analysis) = &inputs.analysis {
        summary_section(&mut out, analysis);
        component_section(&mut out, analysis);
        out.push_str("## Contrasts\n\n");
        if analysis.contrasts.is_empty() {
            out.push_str("No comparison arms were run.\n\n");
        }
        for table in &analysis.contrasts {
            forest(&mut out, table);
        }
        entropy_section(&mut out, analysis);
        recovery_section(&mut out, &analysis.recovery);
    }
    if let Some(hygiene) = &inputs.hygiene {
        hygiene_section(&mut out, hygiene);
    }
    if let Some(wrapper) = &inputs.wrapper {
        wrapper_section(&mut out, wrapper);
    }
    if let Some(predictor) = &inputs.predictor {
        predictor_section(&mut out, predictor);
    }
    if !inputs.missing.is_empty() {
        out.push_str("## Missing artifacts\n\n");
        for name in &inputs.missing {
            out.push_str(&format!("- {name}\n"));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::{run, RunConfig};

    fn rendered_small_run() -> String {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig {
            families: Some(vec!["synth_choice_a".to_string()]),
            events_per_family: Some(6),
            replicates: 1,
            bootstrap_draws: 200,
            ..RunConfig::default()
        };
        run(&config, dir.path()).unwrap();
        std::fs::read_to_string(dir.path().join("report.md")).unwrap()
    }

    #[test]
    fn report_carries_banner_components_and_wrapper() {
        let text = rendered_small_run();
        assert!(text.contains("## Overall gates: PASS"), "{text}");
        assert!(text.contains("variant,RSI,MCI,VEI,SCI,composite"));
        assert!(text.contains("## Contrasts"));
        assert!(text.contains("layer,dataset,variant,entropy_bits,rows"));
        assert!(text.contains("## Wrapper"));
        assert!(text.contains("## Prompt hygiene: PASS"));
        // Five named sub-gates appear with values.
        for gate in [
            "parse_rate",
            "unmapped_rate",
            "structured_irrelevant_fp",
            "directional",
            "bootstrap_lower",
        ] {
            assert!(text.contains(gate), "missing gate {gate}");
        }
    }

    #[test]
    fn missing_artifacts_are_enumerated() {
        let inputs = ReportInputs {
            missing: vec!["scored.jsonl".to_string(), "gates.json".to_string()],
            ..ReportInputs::default()
        };
        let text = render_inputs(&inputs);
        assert!(text.contains("## Missing artifacts"));
        assert!(text.contains("- scored.jsonl"));
        assert!(text.contains("- gates.json"));
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = rendered_small_run();
        let b = rendered_small_run();
        assert_eq!(a, b);
    }
}
