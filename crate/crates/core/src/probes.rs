//! Probe generation and matched-control construction.
//!
//! A task family expands into events; each event crosses the condition table
//! into base probes whose decisive field implies the hidden target action.
//! Controls then transform base probes without ever touching the hidden
//! labels: stripping fields, lesioning the decisive payload, swapping it in
//! from a different event by derangement, or replacing context with a frozen
//! action prior. Every transformation is a pure function of (probe, tag,
//! pool, prior, master seed).

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ontology::{ConditionName, ConditionSpec, ActionCode};
use crate::records::{
    ConditionClass, FieldPayload, ProbeRecord, PromptPayload, RecordKey, RecordError,
    SCORER_TARGET_KEY,
};
use crate::scoring::ScoredRecord;
use crate::seeds::{derive_rng, derive_seed};

#[derive(Debug, thiserror::Error)]
pub enum ProbeError {
    #[error("family {family}: template slot {{{slot}}} has no parameter bank")]
    TemplateParameter { family: String, slot: String },
    #[error("family file {path}:{line}: {detail}")]
    FamilyFile { path: String, line: usize, detail: String },
    #[error("scramble pool needs at least 2 events, found {events}")]
    ScramblePool { events: usize },
    #[error("probe {key} not found in the scramble pool")]
    NotInPool { key: String },
    #[error("control {tag} needs an action prior and none was supplied")]
    MissingPrior { tag: ControlTag },
    #[error("action prior invalid: {detail}")]
    PriorInvalid { detail: String },
    #[error("no scored rows for family {family}; cannot fit an action prior")]
    EmptyPriorSource { family: String },
    #[error("probe key: {0}")]
    Key(#[from] RecordError),
    #[error("unknown condition in record key: {0}")]
    Condition(#[from] crate::ontology::OntologyError),
}

// ── Task families ────────────────────────────────────────────────────────────

/// Construct a family's surface text leans on. Conditions are still crossed
/// in full; the axis flavors wording and names the family's home construct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeAxis {
    Reason,
    Memory,
    Veto,
    SelfContinuity,
    Irrelevant,
    AdversarialRandomness,
}

impl ProbeAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            ProbeAxis::Reason => "reason",
            ProbeAxis::Memory => "memory",
            ProbeAxis::Veto => "veto",
            ProbeAxis::SelfContinuity => "self_continuity",
            ProbeAxis::Irrelevant => "irrelevant",
            ProbeAxis::AdversarialRandomness => "adversarial_randomness",
        }
    }
}

impl FromStr for ProbeAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [
            ProbeAxis::Reason,
            ProbeAxis::Memory,
            ProbeAxis::Veto,
            ProbeAxis::SelfContinuity,
            ProbeAxis::Irrelevant,
            ProbeAxis::AdversarialRandomness,
        ]
        .into_iter()
        .find(|a| a.as_str() == s)
        .ok_or_else(|| format!("unknown probe axis {s:?}"))
    }
}

/// One synthetic dataset: an id (doubling as the dataset namespace), a surface
/// template with `{slot}` parameters, and an event budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFamily {
    pub family_id: String,
    pub probe_axis: ProbeAxis,
    pub surface_template: String,
    pub event_count: usize,
}

impl TaskFamily {
    /// Loads families from a line-oriented file:
    /// `family_id<TAB>axis<TAB>event_count<TAB>surface_template`, `#` comments.
    pub fn load_file(path: &Path) -> Result<Vec<TaskFamily>, ProbeError> {
        let text = std::fs::read_to_string(path).map_err(|e| ProbeError::FamilyFile {
            path: path.display().to_string(),
            line: 0,
            detail: e.to_string(),
        })?;
        let mut families = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.splitn(4, '\t').collect();
            let [id, axis, count, template] = fields.as_slice() else {
                return Err(ProbeError::FamilyFile {
                    path: path.display().to_string(),
                    line: idx + 1,
                    detail: "want family_id<TAB>axis<TAB>event_count<TAB>template".into(),
                });
            };
            let probe_axis = ProbeAxis::from_str(axis).map_err(|detail| {
                ProbeError::FamilyFile { path: path.display().to_string(), line: idx + 1, detail }
            })?;
            let event_count: usize = count.parse().map_err(|_| ProbeError::FamilyFile {
                path: path.display().to_string(),
                line: idx + 1,
                detail: format!("bad event_count {count:?}"),
            })?;
            families.push(TaskFamily {
                family_id: id.to_string(),
                probe_axis,
                surface_template: template.to_string(),
                event_count,
            });
        }
        Ok(families)
    }
}

/// Default desk-scale family set: seven synthetic datasets spanning the probe
/// axes, twenty events each.
pub fn builtin_families() -> Vec<TaskFamily> {
    let mk = |id: &str, axis: ProbeAxis, template: &str| TaskFamily {
        family_id: id.to_string(),
        probe_axis: axis,
        surface_template: template.to_string(),
        event_count: 20,
    };
    vec![
        mk(
            "synth_narrative",
            ProbeAxis::Reason,
            "As {actor}, you are steering {scenario} toward its next checkpoint at {site}.",
        ),
        mk(
            "synth_self_loop_a",
            ProbeAxis::SelfContinuity,
            "You keep a long-running practice of {practice} while coordinating {scenario}.",
        ),
        mk(
            "synth_self_loop_b",
            ProbeAxis::SelfContinuity,
            "Midway through {scenario}, you revisit how {practice} shapes your next step.",
        ),
        mk(
            "synth_choice_a",
            ProbeAxis::Reason,
            "You are allocating {artifact} between two plans during {scenario}.",
        ),
        mk(
            "synth_choice_b",
            ProbeAxis::Veto,
            "You supervise {scenario} at {site} with standing authority over its continuation.",
        ),
        mk(
            "synth_uncertainty",
            ProbeAxis::AdversarialRandomness,
            "Signals during {scenario} at {site} arrive noisy and out of order.",
        ),
        mk(
            "synth_recall",
            ProbeAxis::Memory,
            "You resume {scenario} after a handover note about {artifact}.",
        ),
    ]
}

const SLOT_BANKS: [(&str, &[&str]); 5] = [
    (
        "actor",
        &["the duty coordinator", "the relay operator", "the field planner", "the shift lead"],
    ),
    (
        "scenario",
        &[
            "a supply relay",
            "an archive migration",
            "a survey rollout",
            "a cache handover",
            "an escort detail",
            "a beacon calibration",
        ],
    ),
    (
        "practice",
        &[
            "journaling each decision",
            "double-checking handoffs",
            "rotating the checklists",
            "reviewing the morning ledger",
        ],
    ),
    ("site", &["the north depot", "the river station", "the annex", "the east yard"]),
    (
        "artifact",
        &["the signal ledger", "the spare batteries", "the courier pouch", "the route map"],
    ),
];

const CONTEXT_BANK: [&str; 4] = [
    "Routine log: schedules are unchanged.",
    "Inventory check completed without findings.",
    "No incidents were reported on the previous shift.",
    "Weather along the route is within normal bounds.",
];

fn fill_template(
    family: &TaskFamily,
    rng: &mut impl Rng,
) -> Result<String, ProbeError> {
    let template = &family.surface_template;
    let mut out = String::with_capacity(template.len());
    let mut rest = template.as_str();
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        let Some(end) = after.find('}') else {
            return Err(ProbeError::TemplateParameter {
                family: family.family_id.clone(),
                slot: after.to_string(),
            });
        };
        let slot = &after[..end];
        let bank = SLOT_BANKS
            .iter()
            .find(|(name, _)| *name == slot)
            .map(|(_, bank)| *bank)
            .ok_or_else(|| ProbeError::TemplateParameter {
                family: family.family_id.clone(),
                slot: slot.to_string(),
            })?;
        out.push_str(bank[rng.gen_range(0..bank.len())]);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

// ── Control tags ─────────────────────────────────────────────────────────────

/// Prompt-construction transformation applied to a probe. Exactly one tag per
/// probe row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlTag {
    Structured,
    StochasticFull,
    NoFields,
    ScrambledContext,
    DistributionMatchedPrior,
    TargetLesion,
    StrictTargetLesion,
    EntropyPriorNoField,
    FullState,
    OnlyDecisiveField,
    SurfaceOnly,
    ActionPriorOnly,
    ScrambledDecisiveField,
    IrrelevantCueAdded,
}

impl ControlTag {
    pub const ALL: [ControlTag; 14] = [
        ControlTag::Structured,
        ControlTag::StochasticFull,
        ControlTag::NoFields,
        ControlTag::ScrambledContext,
        ControlTag::DistributionMatchedPrior,
        ControlTag::TargetLesion,
        ControlTag::StrictTargetLesion,
        ControlTag::EntropyPriorNoField,
        ControlTag::FullState,
        ControlTag::OnlyDecisiveField,
        ControlTag::SurfaceOnly,
        ControlTag::ActionPriorOnly,
        ControlTag::ScrambledDecisiveField,
        ControlTag::IrrelevantCueAdded,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ControlTag::Structured => "structured",
            ControlTag::StochasticFull => "stochastic_full",
            ControlTag::NoFields => "no_fields",
            ControlTag::ScrambledContext => "scrambled_context",
            ControlTag::DistributionMatchedPrior => "distribution_matched_prior",
            ControlTag::TargetLesion => "target_lesion",
            ControlTag::StrictTargetLesion => "strict_target_lesion",
            ControlTag::EntropyPriorNoField => "entropy_prior_no_field",
            ControlTag::FullState => "full_state",
            ControlTag::OnlyDecisiveField => "only_decisive_field",
            ControlTag::SurfaceOnly => "surface_only",
            ControlTag::ActionPriorOnly => "action_prior_only",
            ControlTag::ScrambledDecisiveField => "scrambled_decisive_field",
            ControlTag::IrrelevantCueAdded => "irrelevant_cue_added",
        }
    }

    /// Tags that swap the decisive field in from a foreign event.
    pub fn is_scrambled(self) -> bool {
        matches!(self, ControlTag::ScrambledContext | ControlTag::ScrambledDecisiveField)
    }

    /// Tags that expose a sampled action prior and therefore need one fitted.
    pub fn needs_prior(self) -> bool {
        matches!(
            self,
            ControlTag::DistributionMatchedPrior
                | ControlTag::EntropyPriorNoField
                | ControlTag::ActionPriorOnly
        )
    }
}

impl fmt::Display for ControlTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControlTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| format!("unknown control tag {s:?}"))
    }
}

// ── Action priors ────────────────────────────────────────────────────────────

/// Empirical final-action distribution of a family's structured calibration
/// rows. Raw frequencies, no smoothing; sums to 1 within 1e-12.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionPrior {
    pub family_id: String,
    /// Probabilities indexed by [`ActionCode::ALL`] order.
    pub probs: [f64; 6],
}

pub const PRIOR_SUM_TOLERANCE: f64 = 1e-12;

impl ActionPrior {
    pub fn from_counts(family_id: &str, counts: [u64; 6]) -> Result<ActionPrior, ProbeError> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(ProbeError::EmptyPriorSource { family: family_id.to_string() });
        }
        let probs =
            std::array::from_fn(|i| counts[i] as f64 / total as f64);
        let prior = ActionPrior { family_id: family_id.to_string(), probs };
        prior.validate()?;
        Ok(prior)
    }

    pub fn validate(&self) -> Result<(), ProbeError> {
        if self.probs.iter().any(|p| *p < 0.0 || !p.is_finite()) {
            return Err(ProbeError::PriorInvalid { detail: "negative or non-finite mass".into() });
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > PRIOR_SUM_TOLERANCE {
            return Err(ProbeError::PriorInvalid { detail: format!("mass sums to {sum}") });
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut impl Rng) -> ActionCode {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (i, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return ActionCode::ALL[i];
            }
        }
        // Rounding tail lands on the last code with mass.
        ActionCode::ALL[self.probs.iter().rposition(|p| *p > 0.0).unwrap_or(5)]
    }
}

/// Which half of the event split a record belongs to. Priors are fit on the
/// calibration half only and frozen before any holdout row is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationSplit {
    Calibration,
    Holdout,
}

/// Event-level split by seeded hash parity.
pub fn calibration_split(event_id: &str, seed: u64) -> CalibrationSplit {
    if derive_seed(seed, &["calsplit", event_id]) & 1 == 0 {
        CalibrationSplit::Calibration
    } else {
        CalibrationSplit::Holdout
    }
}

/// Fits a family's action prior from already-scored rows (caller filters to
/// the structured variant's calibration split).
pub fn fit_action_prior(rows: &[ScoredRecord], family_id: &str) -> Result<ActionPrior, ProbeError> {
    let mut counts = [0u64; 6];
    for row in rows.iter().filter(|r| r.key.dataset == family_id) {
        counts[row.canonical_action.index()] += 1;
    }
    ActionPrior::from_counts(family_id, counts)
}

// ── Probe generation ─────────────────────────────────────────────────────────

fn decisive_field_for(condition: ConditionName, event_id: &str) -> FieldPayload {
    let (label, text) = match condition {
        ConditionName::Baseline | ConditionName::IrrelevantCue => (
            "reason",
            format!("Standing evidence for event {event_id}: the calibrated evidence selects option A."),
        ),
        ConditionName::ReasonFlip => (
            "reason",
            format!("Updated decisive reason for event {event_id}: the calibrated evidence now selects option B."),
        ),
        ConditionName::MemoryConflict => (
            "memory",
            format!("Corrected record for event {event_id}: honor the prior commitment; recall it before acting."),
        ),
        ConditionName::VetoCue => (
            "constraint",
            format!("Hard constraint for event {event_id}: the pending step violates policy. Stop: veto it."),
        ),
        ConditionName::SelfContinuity => (
            "self_state",
            format!("Persistent self-state for event {event_id}: identity and continuity favor staying with option A."),
        ),
    };
    FieldPayload { label: label.to_string(), text }
}

fn manipulation_for(condition: ConditionName) -> Option<String> {
    let text = match condition {
        ConditionName::Baseline => return None,
        ConditionName::ReasonFlip => "The decisive reason was updated after the standing context was written.",
        ConditionName::MemoryConflict => "A correction to the stored record arrived for this event.",
        ConditionName::VetoCue => "A constraint record arrived for this event.",
        ConditionName::SelfContinuity => "A persistent self-state record is attached to this event.",
        ConditionName::IrrelevantCue => "An incidental note was attached to this event.",
    };
    Some(text.to_string())
}

const CUE_BANK_AGAINST_A: [&str; 3] = [
    "Incidental note: a bystander praised option B earlier today.",
    "Margin note: option B polled well in an unrelated survey.",
    "Sticky note found on the desk: option B looks nicer.",
];

const CUE_BANK_AGAINST_B: [&str; 3] = [
    "Incidental note: a bystander praised option A earlier today.",
    "Margin note: option A polled well in an unrelated survey.",
    "Sticky note found on the desk: option A looks nicer.",
];

/// Misleading surface cue pulling away from the hidden target.
fn irrelevant_cue_for(expected_after: ActionCode, rng: &mut impl Rng) -> String {
    let bank = if expected_after == ActionCode::ActionB {
        &CUE_BANK_AGAINST_B
    } else {
        &CUE_BANK_AGAINST_A
    };
    bank[rng.gen_range(0..bank.len())].to_string()
}

fn condition_class_for(condition: ConditionName) -> ConditionClass {
    match condition {
        ConditionName::Baseline => ConditionClass::Placebo,
        ConditionName::IrrelevantCue => ConditionClass::Irrelevant,
        _ => ConditionClass::Target,
    }
}

/// Placeholder variant used on base probes before the run plan re-keys them.
pub const BASE_VARIANT: &str = "base";

/// Expands a family into base probes: one per (event, condition), keyed with
/// the placeholder variant and replicate 0. Bytes are fully determined by
/// (family, conditions, seed).
pub fn generate_events(
    family: &TaskFamily,
    conditions: &[ConditionName],
    master_seed: u64,
) -> Result<Vec<ProbeRecord>, ProbeError> {
    let mut probes = Vec::with_capacity(family.event_count * conditions.len());
    for event_idx in 0..family.event_count {
        let event_id = format!("ev{event_idx:03}");
        for &condition in conditions {
            let mut rng = derive_rng(
                master_seed,
                &["probe", &family.family_id, &event_id, condition.as_str()],
            );
            let spec = ConditionSpec::for_name(condition);
            let surface = fill_template(family, &mut rng)?;
            let context_line = CONTEXT_BANK[rng.gen_range(0..CONTEXT_BANK.len())].to_string();
            let irrelevant_note = (condition == ConditionName::IrrelevantCue)
                .then(|| irrelevant_cue_for(spec.expected_after, &mut rng));
            let key = RecordKey::new(
                family.family_id.clone(),
                event_id.clone(),
                condition.as_str(),
                BASE_VARIANT,
                0,
            )?;
            probes.push(ProbeRecord {
                key,
                visible_prompt: PromptPayload {
                    surface,
                    context_lines: vec![context_line],
                    manipulation: manipulation_for(condition),
                    prior_hint: None,
                    irrelevant_note,
                    allowed: spec.valid_codes.clone(),
                },
                expected_before: spec.expected_before,
                expected_after: spec.expected_after,
                decisive_field: Some(decisive_field_for(condition, &event_id)),
                field_event_id: Some(event_id.clone()),
                condition_class: condition_class_for(condition),
                control: ControlTag::Structured,
                extra: Default::default(),
            });
        }
    }
    Ok(probes)
}

// ── Control application ──────────────────────────────────────────────────────

const NEUTRAL_STUB: &str =
    "A decisive field exists for this event, but its content is unavailable.";
const GENERIC_SURFACE: &str = "Select the next action for this event.";

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Derangement offset over an event-major pool: any shift of at least one
/// event block in both directions maps every probe to a foreign event.
fn scramble_offset(pool_len: usize, block: usize, master_seed: u64, dataset: &str) -> usize {
    let lo = block;
    let hi = pool_len - block;
    debug_assert!(lo <= hi);
    let span = hi - lo + 1;
    let mut rng = derive_rng(master_seed, &["scramble", dataset]);
    let start = lo + rng.gen_range(0..span);
    // Prefer an offset coprime to the pool size for better mixing; any offset
    // in [lo, hi] already guarantees the foreign-event property.
    for step in 0..span {
        let k = lo + (start - lo + step) % span;
        if gcd(k, pool_len) == 1 {
            return k;
        }
    }
    start
}

/// Applies one control transformation. Hidden labels, condition, and class
/// never change; only the visible payload and field metadata do.
///
/// `pool` is the event-major list of base probes for the probe's dataset
/// (used by scrambling); `prior` is the family's frozen action prior (needed
/// by prior-based tags).
pub fn apply_control(
    probe: &ProbeRecord,
    tag: ControlTag,
    pool: &[ProbeRecord],
    prior: Option<&ActionPrior>,
    master_seed: u64,
) -> Result<ProbeRecord, ProbeError> {
    let mut out = probe.clone();
    out.control = tag;
    match tag {
        ControlTag::Structured | ControlTag::StochasticFull | ControlTag::FullState => {}
        ControlTag::NoFields | ControlTag::SurfaceOnly => {
            out.decisive_field = None;
            out.field_event_id = None;
            out.visible_prompt.context_lines.clear();
            out.visible_prompt.manipulation = None;
            out.visible_prompt.prior_hint = None;
        }
        ControlTag::StrictTargetLesion => {
            // Full removal of the decisive field; non-decisive context stays.
            out.decisive_field = None;
            out.field_event_id = None;
        }
        ControlTag::TargetLesion => {
            // Truncation to a neutral stub; the field stays present and
            // current but carries no mappable action.
            if let Some(field) = &mut out.decisive_field {
                field.text = NEUTRAL_STUB.to_string();
            }
        }
        ControlTag::ScrambledContext | ControlTag::ScrambledDecisiveField => {
            // The foreign-event guarantee needs an event-major pool with equal
            // per-event blocks; anything else is a wiring defect.
            let mut runs: Vec<(&str, usize)> = Vec::new();
            for p in pool {
                match runs.last_mut() {
                    Some((ev, n)) if *ev == p.key.base_event.as_str() => *n += 1,
                    _ => runs.push((p.key.base_event.as_str(), 1)),
                }
            }
            let distinct = runs.len();
            let uniform = runs.windows(2).all(|w| w[0].1 == w[1].1)
                && runs.iter().map(|(ev, _)| ev).collect::<std::collections::HashSet<_>>().len()
                    == distinct;
            if distinct < 2 || !uniform {
                return Err(ProbeError::ScramblePool { events: distinct });
            }
            let block = pool.len() / distinct;
            let idx = pool
                .iter()
                .position(|p| {
                    p.key.base_event == probe.key.base_event
                        && p.key.condition == probe.key.condition
                })
                .ok_or_else(|| ProbeError::NotInPool { key: probe.key.to_string() })?;
            let offset =
                scramble_offset(pool.len(), block, master_seed, &probe.key.dataset);
            let foreign = &pool[(idx + offset) % pool.len()];
            debug_assert_ne!(foreign.key.base_event, probe.key.base_event);
            out.decisive_field = foreign.decisive_field.clone();
            out.field_event_id = Some(foreign.key.base_event.clone());
        }
        ControlTag::DistributionMatchedPrior | ControlTag::EntropyPriorNoField => {
            let prior = prior.ok_or(ProbeError::MissingPrior { tag })?;
            let mut rng =
                derive_rng(master_seed, &["control", tag.as_str(), &probe.key.to_string()]);
            let sampled = prior.sample(&mut rng);
            out.decisive_field = None;
            out.field_event_id = None;
            out.visible_prompt.context_lines.clear();
            out.visible_prompt.manipulation = None;
            out.visible_prompt.prior_hint =
                Some(format!("Family final-action prior sample: {sampled}"));
        }
        ControlTag::ActionPriorOnly => {
            let prior = prior.ok_or(ProbeError::MissingPrior { tag })?;
            let mut rng =
                derive_rng(master_seed, &["control", tag.as_str(), &probe.key.to_string()]);
            let sampled = prior.sample(&mut rng);
            out.decisive_field = None;
            out.field_event_id = None;
            out.visible_prompt.surface = GENERIC_SURFACE.to_string();
            out.visible_prompt.context_lines.clear();
            out.visible_prompt.manipulation = None;
            out.visible_prompt.irrelevant_note = None;
            out.visible_prompt.prior_hint =
                Some(format!("Family final-action prior sample: {sampled}"));
        }
        ControlTag::OnlyDecisiveField => {
            out.visible_prompt.surface = GENERIC_SURFACE.to_string();
            out.visible_prompt.context_lines.clear();
            out.visible_prompt.manipulation = None;
            out.visible_prompt.irrelevant_note = None;
            out.visible_prompt.prior_hint = None;
        }
        ControlTag::IrrelevantCueAdded => {
            let mut rng =
                derive_rng(master_seed, &["control", tag.as_str(), &probe.key.to_string()]);
            out.visible_prompt.irrelevant_note =
                Some(irrelevant_cue_for(probe.expected_after, &mut rng));
        }
    }
    Ok(out)
}

// ── Hygiene audit ────────────────────────────────────────────────────────────

/// Outcome of the hidden-target and scramble-metadata audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub rows: usize,
    /// Probe payloads containing the scorer-target key name.
    pub target_key_hits: usize,
    pub scrambled_rows: usize,
    /// Scrambled rows whose field provably came from a foreign event.
    pub scrambled_foreign: usize,
    pub pass: bool,
}

/// Scans every visible payload for the scorer-target key and verifies that
/// scrambled rows carry foreign field metadata.
pub fn leakage_audit(probes: &[ProbeRecord]) -> LeakageReport {
    let mut target_key_hits = 0usize;
    let mut scrambled_rows = 0usize;
    let mut scrambled_foreign = 0usize;
    for probe in probes {
        let mut visible = serde_json::to_string(&probe.visible_prompt).unwrap_or_default();
        if let Some(field) = &probe.decisive_field {
            visible.push_str(&serde_json::to_string(field).unwrap_or_default());
        }
        visible.push_str(&probe.render_prompt());
        if visible.contains(SCORER_TARGET_KEY) {
            target_key_hits += 1;
        }
        if probe.control.is_scrambled() {
            scrambled_rows += 1;
            if probe
                .field_event_id
                .as_ref()
                .is_some_and(|origin| *origin != probe.key.base_event)
            {
                scrambled_foreign += 1;
            }
        }
    }
    LeakageReport {
        rows: probes.len(),
        target_key_hits,
        scrambled_rows,
        scrambled_foreign,
        pass: target_key_hits == 0 && scrambled_foreign == scrambled_rows,
    }
}
