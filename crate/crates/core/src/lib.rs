//! Harness for measuring how tightly an agent's visible actions are bound to
//! decisive state, using hidden-target finite-action probes with matched
//! controls.
//!
//! The pipeline runs in stages: probe generation ([`probes`]), agent fan-out
//! ([`agents`]), behavioral and trace scoring ([`scoring`]), inference and
//! calibration checks ([`stats`]), and report assembly ([`pipeline`]).
//! A deterministic decision wrapper lives in [`guard`]. Every stage is a pure
//! function of its inputs plus a master seed, so a rerun from the same run
//! manifest reproduces byte-identical artifacts.

pub mod agents;
pub mod guard;
pub mod ontology;
pub mod pipeline;
pub mod probes;
pub mod records;
pub mod report;
pub mod scoring;
pub mod seeds;
pub mod stats;

pub use agents::{AgentResponse, DiagnosticCategory, EndpointConfig, SimPolicy, VariantSpec};
pub use guard::{GuardDecision, GuardVerdict, GuardVisibility};
pub use ontology::{ActionCode, Component, ConditionName, ConditionSpec, Lexicon};
pub use probes::{ActionPrior, ControlTag, ProbeAxis, TaskFamily};
pub use records::{
    ConditionClass, FieldPayload, GenerationRecord, Manifest, ParseStatus, ProbeRecord,
    PromptPayload, ProviderMeta, RecordKey, SourceTag, TraceBundle, WriteReceipt,
};
pub use scoring::{ComponentKind, ComponentTable, GateLedger, ReportSummary, ScoredRecord};
pub use stats::{ContrastTable, EntropyLayer, MatchingGateReport, SensitivitySummary};
