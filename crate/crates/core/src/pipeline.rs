//! Staged run orchestration: plan, probe construction, agent fan-out,
//! scoring, analysis, wrapper application, and report rendering, with a
//! SHA-256 manifest after every stage.
//!
//! All randomness derives from the run config's master seed, artifacts are
//! written with stable field order and relative paths, and the serialized
//! config excludes the output directory, so re-running one config reproduces
//! byte-identical artifacts (simulated backend) wherever the run lands. A
//! partially completed directory resumes: stages whose artifacts verify
//! against the manifest are loaded instead of recomputed.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agents::{
    simulated_agent_with_policy, AgentError, AgentResponse, EndpointConfig, RemoteAgent,
    SimPolicy, VariantSpec,
};
use crate::guard::{wrap_with_visibility, GuardVisibility};
use crate::ontology::{canonicalize, default_lexicon, ActionCode, ConditionName, OntologyError};
use crate::probes::{
    apply_control, builtin_families, calibration_split, fit_action_prior, generate_events,
    leakage_audit, ActionPrior, CalibrationSplit, ControlTag, LeakageReport, ProbeError,
    TaskFamily,
};
use crate::records::{
    append_jsonl, read_jsonl, sha256_hex, ConditionClass, GenerationRecord, Manifest, ProbeRecord,
    RecordError,
};
use crate::report::render_report;
use crate::scoring::{
    component_scores, gate_check, mean_alignment, score_behavior, ComponentTable, GateLedger,
    ReportSummary, ScoreError, ScoredRecord,
};
use crate::seeds::derive_seed;
use crate::stats::{
    calibration_gap, cluster_bootstrap_lower, entropy_layers, matching_gate, recovery_fraction,
    shannon_entropy, CalibrationGap, ContrastTable, EntropyLayerReport, LabeledOutput,
    MatchingGateReport, StatsError, TokenRow,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Probe(#[from] ProbeError),
    #[error(transparent)]
    Ontology(#[from] OntologyError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error(transparent)]
    Stats(#[from] StatsError),
    #[error("io at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config serialization: {0}")]
    TomlSer(#[from] toml::ser::Error),
    #[error("config parse: {0}")]
    TomlDe(#[from] toml::de::Error),
    #[error("invalid run plan: {0}")]
    Plan(String),
    #[error(
        "the run directory holds artifacts from a different config; \
         refusing to mix (delete the directory or match the config)"
    )]
    ConfigMismatch,
    #[error("artifact {0} is missing; run the earlier stages first")]
    MissingArtifact(String),
}

fn io_err(path: &Path, source: std::io::Error) -> PipelineError {
    PipelineError::Io { path: path.display().to_string(), source }
}

// ── Config ───────────────────────────────────────────────────────────────────

/// Which generator answers the probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Backend {
    Simulated { policy: SimPolicy },
    Remote { endpoint: EndpointConfig },
}

/// Everything a run depends on. The output directory is deliberately not a
/// field: it is runtime placement, and keeping it out of the serialized form
/// lets two directories produced from one config hash identically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub master_seed: u64,
    /// Task-family TSV; built-in families when absent.
    pub family_file: Option<PathBuf>,
    /// Restrict to these family ids; all loaded families when absent.
    pub families: Option<Vec<String>>,
    pub conditions: Vec<ConditionName>,
    pub variants: Vec<VariantSpec>,
    /// Extra control arms cloned from the first non-stochastic variant.
    pub controls: Vec<ControlTag>,
    pub replicates: u32,
    /// Overrides every family's event count when present.
    pub events_per_family: Option<usize>,
    pub backend: Backend,
    pub guard_visibility: GuardVisibility,
    pub bootstrap_draws: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            master_seed: 17,
            family_file: None,
            families: None,
            conditions: ConditionName::ALL.to_vec(),
            variants: vec![
                VariantSpec::structured("structured"),
                VariantSpec::no_reason("no_reason"),
                VariantSpec::no_veto("no_veto"),
                VariantSpec::stochastic("stochastic"),
            ],
            controls: Vec::new(),
            replicates: 3,
            events_per_family: None,
            backend: Backend::Simulated { policy: SimPolicy::default() },
            guard_visibility: GuardVisibility::Full,
            bootstrap_draws: crate::stats::BOOTSTRAP_DRAWS,
        }
    }
}

impl RunConfig {
    pub fn to_toml(&self) -> Result<String, PipelineError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn from_toml(text: &str) -> Result<RunConfig, PipelineError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<RunConfig, PipelineError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        RunConfig::from_toml(&text)
    }
}

/// The expanded variant arms: the configured variants plus one clone of the
/// first non-stochastic variant per extra control tag, id-suffixed with `@`.
pub fn variant_arms(config: &RunConfig) -> Result<Vec<VariantSpec>, PipelineError> {
    if config.variants.is_empty() {
        return Err(PipelineError::Plan("at least one variant is required".to_string()));
    }
    let mut arms = config.variants.clone();
    for tag in &config.controls {
        let base = config
            .variants
            .iter()
            .find(|v| !v.is_stochastic())
            .ok_or_else(|| {
                PipelineError::Plan(
                    "extra control arms need a non-stochastic base variant".to_string(),
                )
            })?;
        let mut arm = base.clone();
        arm.control = *tag;
        arm.variant_id = format!("{}@{}", base.variant_id, tag.as_str());
        arms.push(arm);
    }
    let mut seen = std::collections::BTreeSet::new();
    for arm in &arms {
        arm.validate()?;
        if !seen.insert(arm.variant_id.clone()) {
            return Err(PipelineError::Plan(format!("duplicate variant id {:?}", arm.variant_id)));
        }
    }
    Ok(arms)
}

// ── Plan ─────────────────────────────────────────────────────────────────────

/// Grid dimensions and row counts a config expands to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunPlan {
    pub datasets: Vec<String>,
    pub events_per_dataset: BTreeMap<String, usize>,
    pub conditions: Vec<ConditionName>,
    pub arms: Vec<String>,
    pub replicates: u32,
    /// One probe row per scored row: events x conditions x arms x replicates.
    pub scored_rows: usize,
    pub needs_priors: bool,
}

fn load_families(config: &RunConfig) -> Result<Vec<TaskFamily>, PipelineError> {
    let mut families = match &config.family_file {
        Some(path) => TaskFamily::load_file(path)?,
        None => builtin_families(),
    };
    if let Some(keep) = &config.families {
        families.retain(|f| keep.contains(&f.family_id));
        if families.len() != keep.len() {
            let loaded: Vec<&str> = families.iter().map(|f| f.family_id.as_str()).collect();
            return Err(PipelineError::Plan(format!(
                "requested families {keep:?}, found only {loaded:?}"
            )));
        }
    }
    if let Some(events) = config.events_per_family {
        if events == 0 {
            return Err(PipelineError::Plan("events_per_family must be positive".to_string()));
        }
        for family in &mut families {
            family.event_count = events;
        }
    }
    if families.is_empty() {
        return Err(PipelineError::Plan("no task families selected".to_string()));
    }
    Ok(families)
}

/// Expands a config into its grid summary without generating anything.
pub fn plan(config: &RunConfig) -> Result<RunPlan, PipelineError> {
    if config.conditions.is_empty() {
        return Err(PipelineError::Plan("at least one condition is required".to_string()));
    }
    if config.replicates == 0 {
        return Err(PipelineError::Plan("replicates must be positive".to_string()));
    }
    if config.bootstrap_draws == 0 {
        return Err(PipelineError::Plan("bootstrap_draws must be positive".to_string()));
    }
    let families = load_families(config)?;
    let arms = variant_arms(config)?;
    let mut events_per_dataset = BTreeMap::new();
    let mut scored_rows = 0usize;
    for family in &families {
        events_per_dataset.insert(family.family_id.clone(), family.event_count);
        scored_rows += family.event_count
            * config.conditions.len()
            * arms.len()
            * config.replicates as usize;
    }
    Ok(RunPlan {
        datasets: families.iter().map(|f| f.family_id.clone()).collect(),
        events_per_dataset,
        conditions: config.conditions.clone(),
        arms: arms.iter().map(|a| a.variant_id.clone()).collect(),
        replicates: config.replicates,
        scored_rows,
        needs_priors: arms.iter().any(|a| a.control.needs_prior()),
    })
}

// ── Stages ───────────────────────────────────────────────────────────────────

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Probes,
    Generations,
    Scored,
    Analysis,
    Guard,
    Report,
}

impl Stage {
    fn files(&self) -> &'static [&'static str] {
        match self {
            Stage::Probes => &["probes.jsonl", "hygiene.json", "priors.json"],
            Stage::Generations => &["generations.jsonl"],
            Stage::Scored => &["scored.jsonl"],
            Stage::Analysis => &[
                "components.json",
                "summary.json",
                "gates.json",
                "contrasts.json",
                "entropy.json",
                "matching.json",
                "recovery.json",
            ],
            Stage::Guard => &["guarded.jsonl", "wrapper.json"],
            Stage::Report => &["report.md"],
        }
    }
}

/// Wrapper-stage aggregates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WrapperSummary {
    pub visibility: GuardVisibility,
    pub scrambled_rows: usize,
    /// Fraction of scrambled rows whose raw action followed the foreign field.
    pub raw_following_rate: Option<f64>,
    /// Same fraction after wrapping.
    pub wrapped_following_rate: Option<f64>,
    /// Irrelevant-cue accuracy of the first non-stochastic variant's rows.
    pub irrelevant_rows: usize,
    pub raw_irrelevant_accuracy: Option<f64>,
    pub wrapped_irrelevant_accuracy: Option<f64>,
    pub verdict_counts: BTreeMap<String, usize>,
}

/// Entropy artifact: the four layers plus the candidate-versus-reference gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyArtifact {
    pub layers: Vec<EntropyLayerReport>,
    pub calibration: Option<CalibrationGap>,
}

/// Per-dataset single-field recovery, present when the run includes
/// full-state, only-decisive-field, and lesion arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub dataset: String,
    pub full_rate: f64,
    pub only_rate: f64,
    pub control_rate: f64,
    /// Absent when undefined (full-state rate at or below the lesion rate);
    /// the note says so and the division is never taken.
    pub fraction: Option<f64>,
    pub note: Option<String>,
}

/// Everything the analysis stage writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisOutput {
    pub components: Vec<ComponentTable>,
    pub summary: ReportSummary,
    pub gates: GateLedger,
    pub contrasts: Vec<ContrastTable>,
    pub entropy: EntropyArtifact,
    pub matching: Option<MatchingGateReport>,
    pub recovery: Vec<RecoveryRow>,
}

/// Completed-run handle.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub out_dir: PathBuf,
    pub plan: RunPlan,
    pub summary: ReportSummary,
    pub gates: GateLedger,
    pub wrapper: Option<WrapperSummary>,
    pub hygiene: LeakageReport,
    /// SHA-256 of manifest.json after the final stage.
    pub manifest_sha256: String,
    /// Stages loaded from existing verified artifacts instead of recomputed.
    pub resumed: Vec<String>,
}

fn write_json<T: Serialize>(
    dir: &Path,
    manifest: &mut Manifest,
    name: &str,
    value: &T,
    rows: usize,
) -> Result<(), PipelineError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| PipelineError::Plan(format!("serializing {name}: {e}")))?;
    bytes.push(b'\n');
    let path = dir.join(name);
    std::fs::write(&path, &bytes).map_err(|e| io_err(&path, e))?;
    manifest.upsert(name, rows, sha256_hex(&bytes));
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(dir: &Path, name: &str) -> Result<T, PipelineError> {
    let path = dir.join(name);
    let bytes = std::fs::read(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| PipelineError::Plan(format!("parsing artifact {name}: {e}")))
}

fn write_jsonl<T: Serialize>(
    dir: &Path,
    manifest: &mut Manifest,
    name: &str,
    rows: &[T],
) -> Result<(), PipelineError> {
    let path = dir.join(name);
    // append_jsonl appends; stage writers own the whole file.
    if path.exists() {
        std::fs::remove_file(&path).map_err(|e| io_err(&path, e))?;
    }
    let receipt = append_jsonl(&path, rows)?;
    manifest.upsert(name, receipt.count, receipt.sha256);
    Ok(())
}

fn stage_done(dir: &Path, manifest: &Manifest, stage: Stage) -> bool {
    stage.files().iter().all(|name| {
        manifest.get(name).is_some_and(|entry| {
            crate::records::sha256_file(&dir.join(name))
                .map(|sha| sha == entry.sha256)
                .unwrap_or(false)
        })
    })
}

struct BackendState {
    kind: BackendKind,
}

enum BackendKind {
    Simulated(SimPolicy),
    Remote(Box<RemoteAgent>),
}

impl BackendState {
    fn new(config: &RunConfig) -> Result<BackendState, PipelineError> {
        let kind = match &config.backend {
            Backend::Simulated { policy } => BackendKind::Simulated(policy.clone()),
            // Credential resolution happens here, before any generation.
            Backend::Remote { endpoint } => {
                BackendKind::Remote(Box::new(RemoteAgent::new(endpoint.clone())?))
            }
        };
        Ok(BackendState { kind })
    }

    fn generate(
        &self,
        probe: &ProbeRecord,
        variant: &VariantSpec,
        master_seed: u64,
    ) -> Result<AgentResponse, PipelineError> {
        let seed = derive_seed(master_seed, &["agent", &probe.key.to_string()]);
        match &self.kind {
            BackendKind::Simulated(policy) => {
                Ok(simulated_agent_with_policy(probe, variant, policy, seed)?)
            }
            BackendKind::Remote(agent) => Ok(agent.generate(probe, seed)),
        }
    }
}

fn generation_record(key: &ProbeRecord, response: AgentResponse) -> GenerationRecord {
    GenerationRecord {
        key: key.key.clone(),
        raw_output: response.raw_output,
        parse_status: response.parse_status,
        trace_fields: response.trace,
        provider_meta: Some(response.meta),
        diagnostic: response.diagnostic,
        extra: BTreeMap::new(),
    }
}

/// Runs every stage. See [`run_until`] for partial execution.
pub fn run(config: &RunConfig, out_dir: &Path) -> Result<RunOutcome, PipelineError> {
    run_until(config, out_dir, Stage::Report)
}

/// Executes stages in order up to and including `last`, resuming any stage
/// whose artifacts already verify against the directory's manifest.
pub fn run_until(
    config: &RunConfig,
    out_dir: &Path,
    last: Stage,
) -> Result<RunOutcome, PipelineError> {
    let run_plan = plan(config)?;
    std::fs::create_dir_all(out_dir).map_err(|e| io_err(out_dir, e))?;

    // Stage 0: config and lexicon snapshot. A mismatched existing config is a
    // hard error; silently mixing grids would poison every later stage.
    let config_text = config.to_toml()?;
    let config_path = out_dir.join("config.toml");
    if config_path.exists() {
        let existing = std::fs::read_to_string(&config_path).map_err(|e| io_err(&config_path, e))?;
        if existing != config_text {
            return Err(PipelineError::ConfigMismatch);
        }
    } else {
        std::fs::write(&config_path, &config_text).map_err(|e| io_err(&config_path, e))?;
    }
    let manifest_path = out_dir.join("manifest.json");
    let mut manifest =
        if manifest_path.exists() { Manifest::read(&manifest_path)? } else { Manifest::default() };
    manifest.upsert("config.toml", 1, sha256_hex(config_text.as_bytes()));
    let lexicon = default_lexicon();
    let lexicon_path = out_dir.join("lexicon.tsv");
    std::fs::write(&lexicon_path, crate::ontology::BUILTIN_LEXICON)
        .map_err(|e| io_err(&lexicon_path, e))?;
    manifest.upsert("lexicon.tsv", lexicon.rule_count(), lexicon.sha256().to_string());

    let families = load_families(config)?;
    let arms = variant_arms(config)?;
    let arm_of: BTreeMap<&str, &VariantSpec> =
        arms.iter().map(|a| (a.variant_id.as_str(), a)).collect();
    let mut resumed = Vec::new();

    // Stage 1: probes (and priors when any arm needs them).
    let backend = BackendState::new(config)?;
    let (probes, hygiene) = if stage_done(out_dir, &manifest, Stage::Probes) {
        resumed.push("probes".to_string());
        let probes: Vec<ProbeRecord> = read_jsonl(&out_dir.join("probes.jsonl"))?;
        let hygiene: LeakageReport = read_json(out_dir, "hygiene.json")?;
        (probes, hygiene)
    } else {
        let mut priors: BTreeMap<String, ActionPrior> = BTreeMap::new();
        if run_plan.needs_priors {
            priors = fit_priors(config, &families, &arms, &backend)?;
        }
        let mut probes = Vec::with_capacity(run_plan.scored_rows);
        for family in &families {
            let pool = generate_events(family, &config.conditions, config.master_seed)?;
            let prior = priors.get(&family.family_id);
            for arm in &arms {
                for base in &pool {
                    for replicate in 0..config.replicates {
                        let mut keyed = base.clone();
                        keyed.key = base.key.with_cell(&arm.variant_id, replicate);
                        probes.push(apply_control(
                            &keyed,
                            arm.control,
                            &pool,
                            prior,
                            config.master_seed,
                        )?);
                    }
                }
            }
        }
        let hygiene = leakage_audit(&probes);
        write_jsonl(out_dir, &mut manifest, "probes.jsonl", &probes)?;
        write_json(out_dir, &mut manifest, "hygiene.json", &hygiene, 1)?;
        write_json(out_dir, &mut manifest, "priors.json", &priors, priors.len())?;
        manifest.write(&manifest_path)?;
        (probes, hygiene)
    };
    if last == Stage::Probes {
        return finish(out_dir, run_plan, None, None, hygiene, resumed, &manifest, &manifest_path);
    }

    // Stage 2: generations.
    let generations = if stage_done(out_dir, &manifest, Stage::Generations) {
        resumed.push("generations".to_string());
        read_jsonl::<GenerationRecord>(&out_dir.join("generations.jsonl"))?
    } else {
        let mut generations = Vec::with_capacity(probes.len());
        for probe in &probes {
            let variant = arm_of.get(probe.key.variant.as_str()).ok_or_else(|| {
                PipelineError::Plan(format!("probe variant {:?} not in plan", probe.key.variant))
            })?;
            let response = backend.generate(probe, variant, config.master_seed)?;
            generations.push(generation_record(probe, response));
        }
        write_jsonl(out_dir, &mut manifest, "generations.jsonl", &generations)?;
        manifest.write(&manifest_path)?;
        generations
    };
    if last == Stage::Generations {
        return finish(out_dir, run_plan, None, None, hygiene, resumed, &manifest, &manifest_path);
    }

    // Stage 3: scoring.
    let scored = if stage_done(out_dir, &manifest, Stage::Scored) {
        resumed.push("scored".to_string());
        read_jsonl::<ScoredRecord>(&out_dir.join("scored.jsonl"))?
    } else {
        let probe_of: BTreeMap<String, &ProbeRecord> =
            probes.iter().map(|p| (p.key.to_string(), p)).collect();
        let mut scored = Vec::with_capacity(generations.len());
        for generation in &generations {
            let probe = probe_of
                .get(&generation.key.to_string())
                .ok_or_else(|| PipelineError::MissingArtifact(generation.key.to_string()))?;
            scored.push(score_behavior(generation, probe)?);
        }
        write_jsonl(out_dir, &mut manifest, "scored.jsonl", &scored)?;
        manifest.write(&manifest_path)?;
        scored
    };
    if last == Stage::Scored {
        return finish(out_dir, run_plan, None, None, hygiene, resumed, &manifest, &manifest_path);
    }

    // Stage 4: analysis.
    let analysis = if stage_done(out_dir, &manifest, Stage::Analysis) {
        resumed.push("analysis".to_string());
        AnalysisOutput {
            components: read_json(out_dir, "components.json")?,
            summary: read_json(out_dir, "summary.json")?,
            gates: read_json(out_dir, "gates.json")?,
            contrasts: read_json(out_dir, "contrasts.json")?,
            entropy: read_json(out_dir, "entropy.json")?,
            matching: read_json(out_dir, "matching.json")?,
            recovery: read_json(out_dir, "recovery.json")?,
        }
    } else {
        let analysis = analyze(config, &run_plan, &arms, &probes, &generations, &scored)?;
        write_json(out_dir, &mut manifest, "components.json", &analysis.components, analysis.components.len())?;
        write_json(out_dir, &mut manifest, "summary.json", &analysis.summary, 1)?;
        write_json(out_dir, &mut manifest, "gates.json", &analysis.gates, analysis.gates.checks.len())?;
        write_json(out_dir, &mut manifest, "contrasts.json", &analysis.contrasts, analysis.contrasts.len())?;
        write_json(out_dir, &mut manifest, "entropy.json", &analysis.entropy, 1)?;
        write_json(out_dir, &mut manifest, "matching.json", &analysis.matching, 1)?;
        write_json(out_dir, &mut manifest, "recovery.json", &analysis.recovery, analysis.recovery.len())?;
        manifest.write(&manifest_path)?;
        analysis
    };
    if last == Stage::Analysis {
        return finish(
            out_dir,
            run_plan,
            Some(analysis),
            None,
            hygiene,
            resumed,
            &manifest,
            &manifest_path,
        );
    }

    // Stage 5: wrapper.
    let (guarded, wrapper) = if stage_done(out_dir, &manifest, Stage::Guard) {
        resumed.push("guard".to_string());
        (
            read_jsonl::<ScoredRecord>(&out_dir.join("guarded.jsonl"))?,
            read_json::<WrapperSummary>(out_dir, "wrapper.json")?,
        )
    } else {
        let probe_of: BTreeMap<String, &ProbeRecord> =
            probes.iter().map(|p| (p.key.to_string(), p)).collect();
        let (guarded, wrapper) = apply_guard(config, &arms, &probe_of, &scored)?;
        write_jsonl(out_dir, &mut manifest, "guarded.jsonl", &guarded)?;
        write_json(out_dir, &mut manifest, "wrapper.json", &wrapper, 1)?;
        manifest.write(&manifest_path)?;
        (guarded, wrapper)
    };
    let _ = &guarded;
    if last == Stage::Guard {
        return finish(
            out_dir,
            run_plan,
            Some(analysis),
            Some(wrapper),
            hygiene,
            resumed,
            &manifest,
            &manifest_path,
        );
    }

    // Stage 6: report.
    if stage_done(out_dir, &manifest, Stage::Report) {
        resumed.push("report".to_string());
    } else {
        let text = render_report(&run_plan, &analysis, &wrapper, &hygiene);
        let path = out_dir.join("report.md");
        std::fs::write(&path, text.as_bytes()).map_err(|e| io_err(&path, e))?;
        manifest.upsert("report.md", 1, sha256_hex(text.as_bytes()));
        manifest.write(&manifest_path)?;
    }
    finish(
        out_dir,
        run_plan,
        Some(analysis),
        Some(wrapper),
        hygiene,
        resumed,
        &manifest,
        &manifest_path,
    )
}

#[allow(clippy::too_many_arguments)]
fn finish(
    out_dir: &Path,
    run_plan: RunPlan,
    analysis: Option<AnalysisOutput>,
    wrapper: Option<WrapperSummary>,
    hygiene: LeakageReport,
    resumed: Vec<String>,
    manifest: &Manifest,
    manifest_path: &Path,
) -> Result<RunOutcome, PipelineError> {
    manifest.verify(out_dir)?;
    let manifest_sha256 = crate::records::sha256_file(manifest_path)?;
    let (summary, gates) = match analysis {
        Some(a) => (a.summary, a.gates),
        // Early stages carry an empty summary; gates fail closed.
        None => {
            let summary = ReportSummary::build(&[], &run_plan.datasets, "", "", -1.0);
            let gates = gate_check(&summary);
            (summary, gates)
        }
    };
    Ok(RunOutcome {
        out_dir: out_dir.to_path_buf(),
        plan: run_plan,
        summary,
        gates,
        wrapper,
        hygiene,
        manifest_sha256,
        resumed,
    })
}

/// Generates and scores the calibration split of each family on the first
/// non-stochastic variant, then freezes one empirical action prior per
/// family. Runs before the main grid so prior-based arms can be constructed.
fn fit_priors(
    config: &RunConfig,
    families: &[TaskFamily],
    arms: &[VariantSpec],
    backend: &BackendState,
) -> Result<BTreeMap<String, ActionPrior>, PipelineError> {
    let reference = arms
        .iter()
        .find(|a| !a.is_stochastic() && !a.control.needs_prior())
        .ok_or_else(|| {
            PipelineError::Plan(
                "prior-based controls need a non-stochastic, prior-free reference variant"
                    .to_string(),
            )
        })?;
    let mut priors = BTreeMap::new();
    for family in families {
        let pool = generate_events(family, &config.conditions, config.master_seed)?;
        let mut scored = Vec::new();
        for base in &pool {
            if calibration_split(&base.key.base_event, config.master_seed)
                != CalibrationSplit::Calibration
            {
                continue;
            }
            for replicate in 0..config.replicates {
                let mut keyed = base.clone();
                keyed.key = base.key.with_cell(&reference.variant_id, replicate);
                let probe =
                    apply_control(&keyed, reference.control, &pool, None, config.master_seed)?;
                let response = backend.generate(&probe, reference, config.master_seed)?;
                let generation = generation_record(&probe, response);
                scored.push(score_behavior(&generation, &probe)?);
            }
        }
        if scored.is_empty() {
            return Err(PipelineError::Plan(format!(
                "family {} has no calibration events to fit a prior",
                family.family_id
            )));
        }
        let prior = fit_action_prior(&scored, &family.family_id)?;
        prior.validate()?;
        priors.insert(family.family_id.clone(), prior);
    }
    Ok(priors)
}

fn analyze(
    config: &RunConfig,
    run_plan: &RunPlan,
    arms: &[VariantSpec],
    _probes: &[ProbeRecord],
    generations: &[GenerationRecord],
    scored: &[ScoredRecord],
) -> Result<AnalysisOutput, PipelineError> {
    let structured_id = arms
        .iter()
        .find(|a| !a.is_stochastic())
        .map(|a| a.variant_id.clone())
        .unwrap_or_default();
    let stochastic_id = arms
        .iter()
        .find(|a| a.is_stochastic())
        .map(|a| a.variant_id.clone())
        .unwrap_or_default();

    let mut components = Vec::new();
    for dataset in &run_plan.datasets {
        for arm in arms {
            components.push(component_scores(scored, dataset, &arm.variant_id));
        }
    }
    let composite_of = |dataset: &str, variant: &str| -> Option<f64> {
        components
            .iter()
            .find(|t| t.dataset == dataset && t.variant == variant)
            .and_then(|t| t.composite)
    };

    // Pooled composite gap, bootstrapped over dataset clusters.
    let deltas: Vec<(String, f64)> = run_plan
        .datasets
        .iter()
        .filter_map(|d| {
            match (composite_of(d, &structured_id), composite_of(d, &stochastic_id)) {
                (Some(s), Some(r)) => Some((d.clone(), s - r)),
                _ => None,
            }
        })
        .collect();
    let bootstrap_lower = if deltas.is_empty() {
        -1.0
    } else {
        let values: Vec<f64> = deltas.iter().map(|(_, v)| *v).collect();
        cluster_bootstrap_lower(&values, config.bootstrap_draws, config.master_seed)?
    };
    let summary = ReportSummary::build(
        scored,
        &run_plan.datasets,
        &structured_id,
        &stochastic_id,
        bootstrap_lower,
    );
    let gates = gate_check(&summary);

    // Contrast tables: reference variant minus each other arm, once for the
    // behavioral composite and once for mean trace alignment.
    let mut contrasts = Vec::new();
    for arm in arms.iter().filter(|a| a.variant_id != structured_id) {
        let composite_pairs: Vec<(String, f64)> = run_plan
            .datasets
            .iter()
            .filter_map(|d| {
                match (composite_of(d, &structured_id), composite_of(d, &arm.variant_id)) {
                    (Some(a), Some(b)) => Some((d.clone(), a - b)),
                    _ => None,
                }
            })
            .collect();
        if !composite_pairs.is_empty() {
            contrasts.push(ContrastTable::build(
                "behavioral_composite",
                &arm.variant_id,
                &composite_pairs,
                config.bootstrap_draws,
                config.master_seed,
            )?);
        }
        let alignment_pairs: Vec<(String, f64)> = run_plan
            .datasets
            .iter()
            .filter_map(|d| {
                let a = mean_alignment(scored, d, &structured_id)?;
                let b = mean_alignment(scored, d, &arm.variant_id)?;
                Some((d.clone(), a - b))
            })
            .collect();
        if !alignment_pairs.is_empty() {
            contrasts.push(ContrastTable::build(
                "trace_alignment",
                &arm.variant_id,
                &alignment_pairs,
                config.bootstrap_draws,
                config.master_seed,
            )?);
        }
    }

    // Entropy layers over every (dataset, arm) cell, plus the calibration gap
    // between the stochastic candidate and the structured reference.
    let score_of: BTreeMap<String, &ScoredRecord> =
        scored.iter().map(|s| (s.key.to_string(), s)).collect();
    let labeled: Vec<LabeledOutput> = generations
        .iter()
        .filter_map(|g| {
            score_of.get(&g.key.to_string()).map(|s| LabeledOutput {
                dataset: g.key.dataset.clone(),
                variant: g.key.variant.clone(),
                raw_text: g.raw_output.clone(),
                code: s.canonical_action,
            })
        })
        .collect();
    let layers = entropy_layers(&labeled)?;
    let calibration = if !structured_id.is_empty() && !stochastic_id.is_empty() {
        Some(calibration_gap(&stochastic_id, &structured_id, &layers)?)
    } else {
        None
    };

    // Budget-matching diagnostic between the same two arms, paired event-wise
    // on (dataset, event) with token sums and latency totals per side.
    let matching = if !structured_id.is_empty() && !stochastic_id.is_empty() {
        let rows_for = |variant: &str| -> Vec<TokenRow> {
            let mut by_event: BTreeMap<String, TokenRow> = BTreeMap::new();
            for g in generations.iter().filter(|g| g.key.variant == variant) {
                let meta = g.provider_meta.clone().unwrap_or_default();
                let entry = by_event
                    .entry(format!("{}/{}", g.key.dataset, g.key.base_event))
                    .or_insert_with_key(|k| TokenRow {
                        event: k.clone(),
                        prompt_tokens: 0,
                        completion_tokens: 0,
                        total_tokens: 0,
                        latency_ms: 0.0,
                    });
                entry.prompt_tokens += meta.prompt_tokens.unwrap_or(0);
                entry.completion_tokens += meta.completion_tokens.unwrap_or(0);
                entry.total_tokens += meta.total_tokens.unwrap_or(0);
                entry.latency_ms += meta.latency_ms.unwrap_or(0.0);
            }
            by_event.into_values().collect()
        };
        let entropy_of = |variant: &str| -> Result<f64, StatsError> {
            let labels: Vec<&str> = scored
                .iter()
                .filter(|s| s.key.variant == variant)
                .map(|s| s.canonical_action.as_str())
                .collect();
            shannon_entropy(&labels)
        };
        let a = rows_for(&structured_id);
        let b = rows_for(&stochastic_id);
        if a.is_empty() || b.is_empty() {
            None
        } else {
            Some(matching_gate(&a, &b, (entropy_of(&structured_id)?, entropy_of(&stochastic_id)?))?)
        }
    } else {
        None
    };

    // Single-field recovery when the run carries all three ablation arms:
    // full visibility, decisive field alone, and the lesioned control.
    let arm_with = |tag: ControlTag| {
        arms.iter().find(|a| a.control == tag).map(|a| a.variant_id.clone())
    };
    let lesion_id = arm_with(ControlTag::TargetLesion)
        .or_else(|| arm_with(ControlTag::StrictTargetLesion));
    let mut recovery = Vec::new();
    if let (Some(full_id), Some(only_id), Some(control_id)) =
        (arm_with(ControlTag::FullState), arm_with(ControlTag::OnlyDecisiveField), lesion_id)
    {
        for dataset in &run_plan.datasets {
            let rate_of = |variant: &str| -> Option<f64> {
                let rows: Vec<&ScoredRecord> = scored
                    .iter()
                    .filter(|s| {
                        s.key.dataset == *dataset
                            && s.key.variant == variant
                            && s.condition_class == ConditionClass::Target
                    })
                    .collect();
                (!rows.is_empty())
                    .then(|| rows.iter().filter(|s| s.correct).count() as f64 / rows.len() as f64)
            };
            let (Some(full), Some(only), Some(control)) =
                (rate_of(&full_id), rate_of(&only_id), rate_of(&control_id))
            else {
                continue;
            };
            let (fraction, note) = match recovery_fraction(full, only, control) {
                Ok(f) => (Some(f), None),
                Err(err) => (None, Some(err.to_string())),
            };
            recovery.push(RecoveryRow {
                dataset: dataset.clone(),
                full_rate: full,
                only_rate: only,
                control_rate: control,
                fraction,
                note,
            });
        }
    }

    Ok(AnalysisOutput {
        components,
        summary,
        gates,
        contrasts,
        entropy: EntropyArtifact { layers, calibration },
        matching,
        recovery,
    })
}

fn apply_guard(
    config: &RunConfig,
    arms: &[VariantSpec],
    probe_of: &BTreeMap<String, &ProbeRecord>,
    scored: &[ScoredRecord],
) -> Result<(Vec<ScoredRecord>, WrapperSummary), PipelineError> {
    let reference_id = arms
        .iter()
        .find(|a| !a.is_stochastic())
        .map(|a| a.variant_id.clone())
        .unwrap_or_default();
    let mut guarded = Vec::with_capacity(scored.len());
    let mut verdict_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut scrambled_rows = 0usize;
    let mut raw_followed = 0usize;
    let mut wrapped_followed = 0usize;
    let mut irrelevant_rows = 0usize;
    let mut raw_irrelevant_correct = 0usize;
    let mut wrapped_irrelevant_correct = 0usize;
    for row in scored {
        let probe = probe_of
            .get(&row.key.to_string())
            .ok_or_else(|| PipelineError::MissingArtifact(row.key.to_string()))?;
        let decision =
            wrap_with_visibility(row.canonical_action, probe, config.guard_visibility);
        let verdict = serde_json::to_value(decision.verdict)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        *verdict_counts.entry(verdict).or_insert(0) += 1;
        if row.control.is_scrambled() {
            if let Some(foreign) = probe
                .decisive_field
                .as_ref()
                .map(|f| canonicalize(&f.text))
                .filter(|c| *c != ActionCode::InvalidOrUnmapped)
            {
                scrambled_rows += 1;
                if row.canonical_action == foreign {
                    raw_followed += 1;
                }
                if decision.action_out == foreign {
                    wrapped_followed += 1;
                }
            }
        }
        if row.condition_class == ConditionClass::Irrelevant && row.key.variant == reference_id {
            irrelevant_rows += 1;
            if row.canonical_action == probe.expected_after {
                raw_irrelevant_correct += 1;
            }
            if decision.action_out == probe.expected_after {
                wrapped_irrelevant_correct += 1;
            }
        }
        let mut out = row.clone();
        out.guard = Some(decision);
        guarded.push(out);
    }
    let rate = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
    let wrapper = WrapperSummary {
        visibility: config.guard_visibility,
        scrambled_rows,
        raw_following_rate: rate(raw_followed, scrambled_rows),
        wrapped_following_rate: rate(wrapped_followed, scrambled_rows),
        irrelevant_rows,
        raw_irrelevant_accuracy: rate(raw_irrelevant_correct, irrelevant_rows),
        wrapped_irrelevant_accuracy: rate(wrapped_irrelevant_correct, irrelevant_rows),
        verdict_counts,
    };
    Ok((guarded, wrapper))
}
