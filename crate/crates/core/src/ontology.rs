//! Action ontology, probe-condition table, and the rule canonicalizer.
//!
//! Free-text agent output is collapsed onto a closed six-code set by a
//! versioned phrase lexicon. The mapping is total and deterministic: anything
//! the rules cannot place lands in [`ActionCode::InvalidOrUnmapped`], the
//! single sink code. Canonicalization is the only bridge between raw text and
//! every downstream score, so the lexicon file is hashed into run manifests.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Bytes of the built-in lexicon, compiled into the binary.
pub const BUILTIN_LEXICON: &str = include_str!("../data/lexicon.tsv");

#[derive(Debug, thiserror::Error)]
pub enum OntologyError {
    #[error("lexicon io at {path}: {source}")]
    LexiconIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("lexicon line {line}: expected FAMILY<TAB>phrase, got {text:?}")]
    LexiconFormat { line: usize, text: String },
    #[error("lexicon line {line}: {family:?} is not a mappable action family")]
    LexiconFamily { line: usize, family: String },
    #[error("unknown action code {0:?}")]
    UnknownCode(String),
    #[error("unknown condition {0:?}")]
    UnknownCondition(String),
}

// ── Action codes ─────────────────────────────────────────────────────────────

/// Closed action set shared by probes, agents, scoring, and the guard.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ActionCode {
    ActionA,
    ActionB,
    Veto,
    Defer,
    RecallPrior,
    InvalidOrUnmapped,
}

impl ActionCode {
    pub const ALL: [ActionCode; 6] = [
        ActionCode::ActionA,
        ActionCode::ActionB,
        ActionCode::Veto,
        ActionCode::Defer,
        ActionCode::RecallPrior,
        ActionCode::InvalidOrUnmapped,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ActionCode::ActionA => "ACTION_A",
            ActionCode::ActionB => "ACTION_B",
            ActionCode::Veto => "VETO",
            ActionCode::Defer => "DEFER",
            ActionCode::RecallPrior => "RECALL_PRIOR",
            ActionCode::InvalidOrUnmapped => "INVALID_OR_UNMAPPED",
        }
    }

    /// Stable position in [`ActionCode::ALL`]; used for prior vectors.
    pub fn index(self) -> usize {
        Self::ALL.iter().position(|c| *c == self).expect("member of ALL")
    }

    /// Coarse family used by the coarsest entropy layer: the two options fold
    /// together, as do the two withholding codes.
    pub fn family(self) -> &'static str {
        match self {
            ActionCode::ActionA | ActionCode::ActionB => "option",
            ActionCode::Veto | ActionCode::Defer => "withhold",
            ActionCode::RecallPrior => "recall",
            ActionCode::InvalidOrUnmapped => "invalid",
        }
    }
}

impl fmt::Display for ActionCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ActionCode {
    type Err = OntologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| OntologyError::UnknownCode(s.to_string()))
    }
}

// ── Conditions ───────────────────────────────────────────────────────────────

/// State component an agent variant can enable or lesion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Reason,
    Memory,
    Veto,
    SelfState,
}

/// Probe manipulations. Each condition fixes a pre-manipulation label, a
/// hidden post-manipulation target, and the valid answer set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionName {
    Baseline,
    ReasonFlip,
    MemoryConflict,
    VetoCue,
    SelfContinuity,
    IrrelevantCue,
}

impl ConditionName {
    pub const ALL: [ConditionName; 6] = [
        ConditionName::Baseline,
        ConditionName::ReasonFlip,
        ConditionName::MemoryConflict,
        ConditionName::VetoCue,
        ConditionName::SelfContinuity,
        ConditionName::IrrelevantCue,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionName::Baseline => "baseline",
            ConditionName::ReasonFlip => "reason_flip",
            ConditionName::MemoryConflict => "memory_conflict",
            ConditionName::VetoCue => "veto_cue",
            ConditionName::SelfContinuity => "self_continuity",
            ConditionName::IrrelevantCue => "irrelevant_cue",
        }
    }
}

impl fmt::Display for ConditionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionName {
    type Err = OntologyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .iter()
            .copied()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| OntologyError::UnknownCondition(s.to_string()))
    }
}

/// Full row of the condition table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub name: ConditionName,
    pub valid_codes: Vec<ActionCode>,
    pub expected_before: ActionCode,
    pub expected_after: ActionCode,
    /// Component whose lesion should collapse this condition's effect.
    pub required_component: Option<Component>,
}

impl ConditionSpec {
    pub fn for_name(name: ConditionName) -> ConditionSpec {
        use ActionCode::*;
        let (valid_codes, expected_before, expected_after, required_component) = match name {
            ConditionName::Baseline => (vec![ActionA, ActionB], ActionA, ActionA, None),
            ConditionName::ReasonFlip => {
                (vec![ActionA, ActionB], ActionA, ActionB, Some(Component::Reason))
            }
            ConditionName::MemoryConflict => (
                vec![ActionA, RecallPrior, Defer],
                ActionA,
                RecallPrior,
                Some(Component::Memory),
            ),
            ConditionName::VetoCue => {
                (vec![ActionA, Veto, Defer], ActionA, Veto, Some(Component::Veto))
            }
            ConditionName::SelfContinuity => (
                vec![ActionA, ActionB, Defer],
                ActionA,
                ActionA,
                Some(Component::SelfState),
            ),
            ConditionName::IrrelevantCue => (vec![ActionA, ActionB], ActionA, ActionA, None),
        };
        ConditionSpec { name, valid_codes, expected_before, expected_after, required_component }
    }
}

/// (pre-manipulation, post-manipulation) labels for a condition.
pub fn expected_labels(name: ConditionName) -> (ActionCode, ActionCode) {
    let spec = ConditionSpec::for_name(name);
    (spec.expected_before, spec.expected_after)
}

// ── Canonicalizer ────────────────────────────────────────────────────────────

/// Lowercased alphanumeric word runs; every other character is a boundary.
/// Underscores split too, so the literal code string "ACTION_A" and the prose
/// "option A" normalize the same way.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            current.extend(ch.to_lowercase());
        } else if !current.is_empty() {
            tokens.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        tokens.push(current);
    }
    tokens
}

/// Phrase rules mapping text onto the five mappable codes. The sink code has
/// no rules; it is what remains when nothing fires or options conflict.
#[derive(Debug, Clone)]
pub struct Lexicon {
    /// Token sequences per mappable family.
    phrases: BTreeMap<ActionCode, Vec<Vec<String>>>,
    version: String,
    sha256: String,
    line_count: usize,
}

impl Lexicon {
    pub fn parse(text: &str) -> Result<Lexicon, OntologyError> {
        let mut phrases: BTreeMap<ActionCode, Vec<Vec<String>>> = BTreeMap::new();
        let mut version = String::from("unversioned");
        let mut line_count = 0usize;
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("version:") {
                    version = v.trim().to_string();
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (family, phrase) = line
                .split_once('\t')
                .ok_or_else(|| OntologyError::LexiconFormat { line: line_no, text: line.into() })?;
            let code = ActionCode::from_str(family.trim()).map_err(|_| {
                OntologyError::LexiconFamily { line: line_no, family: family.into() }
            })?;
            if code == ActionCode::InvalidOrUnmapped {
                return Err(OntologyError::LexiconFamily { line: line_no, family: family.into() });
            }
            let tokens = tokenize(phrase);
            if tokens.is_empty() {
                return Err(OntologyError::LexiconFormat { line: line_no, text: line.into() });
            }
            phrases.entry(code).or_default().push(tokens);
            line_count += 1;
        }
        let sha256 = hex::encode(Sha256::digest(text.as_bytes()));
        Ok(Lexicon { phrases, version, sha256, line_count })
    }

    pub fn load(path: &Path) -> Result<Lexicon, OntologyError> {
        let text = std::fs::read_to_string(path).map_err(|source| OntologyError::LexiconIo {
            path: path.display().to_string(),
            source,
        })?;
        Lexicon::parse(&text)
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    /// Digest of the lexicon bytes; recorded in run manifests.
    pub fn sha256(&self) -> &str {
        &self.sha256
    }

    pub fn rule_count(&self) -> usize {
        self.line_count
    }

    /// Total map from free text to an action code.
    ///
    /// Withholding cues dominate: VETO, then RECALL_PRIOR, then DEFER, then an
    /// explicit option mention. A text that mentions both options without a
    /// dominating cue is unresolvable and maps to the sink, as does anything
    /// that fires no rule. Negation is not modeled.
    pub fn canonicalize(&self, raw: &str) -> ActionCode {
        let tokens = tokenize(raw);
        let fired = |code: ActionCode| -> bool {
            self.phrases
                .get(&code)
                .map(|ps| ps.iter().any(|p| contains_phrase(&tokens, p)))
                .unwrap_or(false)
        };
        if fired(ActionCode::Veto) {
            return ActionCode::Veto;
        }
        if fired(ActionCode::RecallPrior) {
            return ActionCode::RecallPrior;
        }
        if fired(ActionCode::Defer) {
            return ActionCode::Defer;
        }
        match (fired(ActionCode::ActionA), fired(ActionCode::ActionB)) {
            (true, false) => ActionCode::ActionA,
            (false, true) => ActionCode::ActionB,
            // Conflicting or absent option mentions both land in the sink.
            _ => ActionCode::InvalidOrUnmapped,
        }
    }
}

fn contains_phrase(tokens: &[String], phrase: &[String]) -> bool {
    if phrase.is_empty() || tokens.len() < phrase.len() {
        return false;
    }
    tokens.windows(phrase.len()).any(|w| w == phrase)
}

/// Built-in lexicon, parsed once.
pub fn default_lexicon() -> &'static Lexicon {
    static LEXICON: OnceLock<Lexicon> = OnceLock::new();
    LEXICON.get_or_init(|| Lexicon::parse(BUILTIN_LEXICON).expect("built-in lexicon parses"))
}

/// Canonicalize with the built-in lexicon.
pub fn canonicalize(raw: &str) -> ActionCode {
    default_lexicon().canonicalize(raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_round_trip_through_canonicalization() {
        for code in ActionCode::ALL {
            assert_eq!(canonicalize(code.as_str()), code, "code {code} must be idempotent");
        }
    }

    #[test]
    fn option_mentions_map_to_codes() {
        assert_eq!(canonicalize("After reflection I choose option A."), ActionCode::ActionA);
        assert_eq!(canonicalize("take OPTION B now"), ActionCode::ActionB);
    }

    #[test]
    fn conflicting_options_sink() {
        assert_eq!(
            canonicalize("I pick both option A and option B"),
            ActionCode::InvalidOrUnmapped
        );
    }

    #[test]
    fn withholding_outranks_options() {
        assert_eq!(canonicalize("stop; do not take option A"), ActionCode::Veto);
        assert_eq!(canonicalize("postpone option B"), ActionCode::Defer);
        assert_eq!(canonicalize("recall the prior commitment to option A"), ActionCode::RecallPrior);
        // VETO also dominates the other withholding families.
        assert_eq!(canonicalize("cancel the delay"), ActionCode::Veto);
    }

    #[test]
    fn word_boundaries_not_substrings() {
        // "awaits" must not fire the "wait" rule, "adoption" must not fire "option".
        assert_eq!(canonicalize("the plan awaits adoption"), ActionCode::InvalidOrUnmapped);
    }

    #[test]
    fn unmappable_text_sinks() {
        assert_eq!(canonicalize(""), ActionCode::InvalidOrUnmapped);
        assert_eq!(canonicalize("the weather is pleasant"), ActionCode::InvalidOrUnmapped);
        assert_eq!(canonicalize("\u{0}\u{1}\t\r\n"), ActionCode::InvalidOrUnmapped);
    }

    #[test]
    fn condition_table_labels() {
        use ActionCode::*;
        assert_eq!(expected_labels(ConditionName::Baseline), (ActionA, ActionA));
        assert_eq!(expected_labels(ConditionName::ReasonFlip), (ActionA, ActionB));
        assert_eq!(expected_labels(ConditionName::MemoryConflict), (ActionA, RecallPrior));
        assert_eq!(expected_labels(ConditionName::VetoCue), (ActionA, Veto));
        assert_eq!(expected_labels(ConditionName::SelfContinuity), (ActionA, ActionA));
        assert_eq!(expected_labels(ConditionName::IrrelevantCue), (ActionA, ActionA));
    }

    #[test]
    fn condition_valid_sets_contain_both_labels() {
        for name in ConditionName::ALL {
            let spec = ConditionSpec::for_name(name);
            assert!(spec.valid_codes.contains(&spec.expected_before), "{name}");
            assert!(spec.valid_codes.contains(&spec.expected_after), "{name}");
            assert!(!spec.valid_codes.contains(&ActionCode::InvalidOrUnmapped), "{name}");
        }
    }

    #[test]
    fn lexicon_metadata() {
        let lex = default_lexicon();
        assert_eq!(lex.version(), "lexicon-v1");
        assert_eq!(lex.sha256().len(), 64);
        assert!(lex.rule_count() > 20);
    }

    #[test]
    fn lexicon_rejects_sink_family_and_bad_lines() {
        assert!(Lexicon::parse("INVALID_OR_UNMAPPED\tanything").is_err());
        assert!(Lexicon::parse("no tab separator here").is_err());
        assert!(Lexicon::parse("NOT_A_FAMILY\tphrase").is_err());
    }

    #[test]
    fn serde_uses_wire_names() {
        let json = serde_json::to_string(&ActionCode::RecallPrior).unwrap();
        assert_eq!(json, "\"RECALL_PRIOR\"");
        let json = serde_json::to_string(&ConditionName::VetoCue).unwrap();
        assert_eq!(json, "\"veto_cue\"");
    }
}
