//! Deterministic decision wrapper.
//!
//! The wrapper re-derives the action a probe's decisive field implies and
//! reconciles the agent's proposal with it. It is a pure function of
//! (proposal, probe, visibility): no sampling, no IO, and its output action is
//! a fixed point, so wrapping twice changes nothing.

use serde::{Deserialize, Serialize};

use crate::ontology::{canonicalize, ActionCode};
use crate::records::ProbeRecord;

/// What the wrapper is allowed to inspect.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardVisibility {
    /// Field text plus its event-of-origin tag.
    Full,
    /// Field text only; provenance is invisible, foreign fields look local.
    PromptOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuardVerdict {
    /// Proposal already matches the field-implied action.
    Accepted,
    /// Proposal replaced by the field-implied action.
    Corrected,
    /// Field demonstrably belongs to another event; forced hold.
    Deferred,
    /// No decisive field, or its text maps to nothing; proposal untouched.
    UnchangedNoField,
}

/// Outcome of wrapping one proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuardDecision {
    pub action_in: ActionCode,
    pub action_out: ActionCode,
    pub verdict: GuardVerdict,
    pub reason: String,
}

/// Wraps with full visibility.
pub fn wrap(action: ActionCode, probe: &ProbeRecord) -> GuardDecision {
    wrap_with_visibility(action, probe, GuardVisibility::Full)
}

pub fn wrap_with_visibility(
    action: ActionCode,
    probe: &ProbeRecord,
    visibility: GuardVisibility,
) -> GuardDecision {
    let implied = probe
        .decisive_field
        .as_ref()
        .map(|f| canonicalize(&f.text))
        .filter(|c| *c != ActionCode::InvalidOrUnmapped);
    let Some(implied) = implied else {
        return GuardDecision {
            action_in: action,
            action_out: action,
            verdict: GuardVerdict::UnchangedNoField,
            reason: "no decisive field content to check against".to_string(),
        };
    };
    if visibility == GuardVisibility::Full && !probe.field_is_current() {
        return GuardDecision {
            action_in: action,
            action_out: ActionCode::Defer,
            verdict: GuardVerdict::Deferred,
            reason: format!(
                "decisive field originates from event {:?}, not this one",
                probe.field_event_id.as_deref().unwrap_or("<untagged>")
            ),
        };
    }
    if action == implied {
        GuardDecision {
            action_in: action,
            action_out: action,
            verdict: GuardVerdict::Accepted,
            reason: "proposal matches the field-implied action".to_string(),
        }
    } else {
        GuardDecision {
            action_in: action,
            action_out: implied,
            verdict: GuardVerdict::Corrected,
            reason: format!(
                "proposal {} contradicts field-implied action {}",
                action.as_str(),
                implied.as_str()
            ),
        }
    }
}
