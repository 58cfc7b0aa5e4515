//! Agent backends: the simulated variant family and a remote HTTP adapter.
//!
//! The simulated family is the harness's falsifiability anchor. Its policy is
//! fully determined by (probe, variant flags, seed): structured variants read
//! the decisive field and answer the hidden target when the condition's
//! required component is enabled, fall back to the pre-manipulation label when
//! it is lesioned or the field is missing, and follow foreign fields on
//! scrambled rows. Stochastic variants sample uniformly over the valid set
//! with a small free-text noise channel. Lesions therefore collapse exactly
//! their own component's binding score and nothing else.
//!
//! The remote adapter speaks the common chat-completion shape, retries
//! transient failures with exponential backoff and full jitter, caches by
//! (prompt, endpoint, temperature, seed), and never persists credentials.

use std::path::PathBuf;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ontology::{canonicalize, ActionCode, Component, ConditionName, ConditionSpec};
use crate::probes::ControlTag;
use crate::records::{
    ParseStatus, ProbeRecord, ProviderMeta, SelfState, SourceTag, TraceBundle, VetoState,
    TRACE_FIELDS,
};
use crate::seeds::derive_rng;

/// Temperature at or above which a variant samples instead of deciding.
pub const STOCHASTIC_TEMPERATURE: f64 = 0.9;

#[derive(Debug, thiserror::Error)]
pub enum AgentError {
    #[error("agent configuration defect: {0}")]
    Config(String),
    #[error(
        "no credential found: set env var {env:?} or provide key file {file:?} (checked both)"
    )]
    Credentials { env: String, file: String },
    #[error("credential file {path}: {source}")]
    CredentialIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("response cache at {path}: {detail}")]
    Cache { path: String, detail: String },
    #[error("http client: {0}")]
    Client(String),
}

/// Failure category for non-ok generations, one per distinct failure mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosticCategory {
    Auth,
    Quota,
    Timeout,
    Transport,
    PayloadNotObject,
    MissingContent,
}

// ── Variants ─────────────────────────────────────────────────────────────────

/// One agent configuration: which state components are live, how hot the
/// sampler runs, and which prompt-construction control its rows get.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub variant_id: String,
    pub branch: bool,
    pub self_state: bool,
    pub memory: bool,
    pub reason: bool,
    pub veto: bool,
    pub temperature: f64,
    pub control: ControlTag,
}

impl VariantSpec {
    /// Full structured scaffold: every component live, cool sampler.
    pub fn structured(id: &str) -> VariantSpec {
        VariantSpec {
            variant_id: id.to_string(),
            branch: true,
            self_state: true,
            memory: true,
            reason: true,
            veto: true,
            temperature: 0.2,
            control: ControlTag::Structured,
        }
    }

    /// Structured scaffold with the reason component lesioned.
    pub fn no_reason(id: &str) -> VariantSpec {
        VariantSpec { reason: false, ..VariantSpec::structured(id) }
    }

    /// Structured scaffold with the veto component lesioned.
    pub fn no_veto(id: &str) -> VariantSpec {
        VariantSpec { veto: false, ..VariantSpec::structured(id) }
    }

    /// Branch-only hot sampler over the full context.
    pub fn stochastic(id: &str) -> VariantSpec {
        VariantSpec {
            variant_id: id.to_string(),
            branch: true,
            self_state: false,
            memory: false,
            reason: false,
            veto: false,
            temperature: STOCHASTIC_TEMPERATURE,
            control: ControlTag::StochasticFull,
        }
    }

    pub fn with_control(mut self, control: ControlTag) -> VariantSpec {
        self.control = control;
        self
    }

    pub fn enables(&self, component: Component) -> bool {
        match component {
            Component::Reason => self.reason,
            Component::Memory => self.memory,
            Component::Veto => self.veto,
            Component::SelfState => self.self_state,
        }
    }

    pub fn is_stochastic(&self) -> bool {
        self.temperature >= STOCHASTIC_TEMPERATURE
    }

    pub fn validate(&self) -> Result<(), AgentError> {
        if !self.temperature.is_finite() || !(0.0..=2.0).contains(&self.temperature) {
            return Err(AgentError::Config(format!(
                "variant {}: temperature {} out of range",
                self.variant_id, self.temperature
            )));
        }
        if self.variant_id.is_empty() || self.variant_id.contains('/') {
            return Err(AgentError::Config(format!(
                "variant id {:?} is empty or contains '/'",
                self.variant_id
            )));
        }
        Ok(())
    }
}

/// Built-in variant grid by id.
pub fn builtin_variant(id: &str) -> Option<VariantSpec> {
    match id {
        "structured" => Some(VariantSpec::structured(id)),
        "no_reason" => Some(VariantSpec::no_reason(id)),
        "no_veto" => Some(VariantSpec::no_veto(id)),
        "stochastic" => Some(VariantSpec::stochastic(id)),
        _ => None,
    }
}

/// Ids accepted by [`builtin_variant`].
pub const BUILTIN_VARIANTS: [&str; 4] = ["structured", "no_reason", "no_veto", "stochastic"];

// ── Simulated family ─────────────────────────────────────────────────────────

/// Knobs of the simulated policy that are not component flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPolicy {
    /// Probability a structured variant follows a foreign decisive field.
    pub follow_foreign: f64,
    /// Probability a stochastic variant emits off-ontology free text.
    pub unmapped_noise: f64,
}

impl SimPolicy {
    /// Follows foreign fields unconditionally.
    pub fn credulous() -> SimPolicy {
        SimPolicy { follow_foreign: 1.0, unmapped_noise: 0.02 }
    }

    /// Follows foreign fields half the time, else falls back.
    pub fn skeptical() -> SimPolicy {
        SimPolicy { follow_foreign: 0.5, unmapped_noise: 0.02 }
    }

    pub fn by_name(name: &str) -> Option<SimPolicy> {
        match name {
            "credulous" => Some(SimPolicy::credulous()),
            "skeptical" => Some(SimPolicy::skeptical()),
            _ => None,
        }
    }
}

impl Default for SimPolicy {
    fn default() -> SimPolicy {
        SimPolicy::credulous()
    }
}

/// One agent reply plus transport facts; scoring happens elsewhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentResponse {
    pub raw_output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trace: Option<TraceBundle>,
    pub meta: ProviderMeta,
    pub parse_status: ParseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<DiagnosticCategory>,
}

/// Phrasings per action code; every entry must canonicalize back to its code.
fn phrasings(code: ActionCode) -> &'static [&'static str] {
    match code {
        ActionCode::ActionA => {
            &["ACTION_A", "I choose option A.", "Take option A.", "Staying with option A."]
        }
        ActionCode::ActionB => {
            &["ACTION_B", "I choose option B.", "Take option B.", "Switching to option B."]
        }
        ActionCode::Veto => &[
            "VETO",
            "I must stop and veto this.",
            "Cancel the pending step.",
            "Withhold the action entirely.",
        ],
        ActionCode::Defer => {
            &["DEFER", "Let me postpone this.", "I will wait on this one.", "Delay the decision."]
        }
        ActionCode::RecallPrior => &[
            "RECALL_PRIOR",
            "I recall the prior commitment.",
            "Honor the prior commitment.",
            "Recall what was committed earlier.",
        ],
        ActionCode::InvalidOrUnmapped => &["INVALID_OR_UNMAPPED"],
    }
}

/// Off-ontology free text; none of it may fire a lexicon rule.
const NOISE_BANK: [&str; 4] = [
    "The weather seems pleasant today.",
    "Let us talk about something else entirely.",
    "Forty-two.",
    "No comment on the matter.",
];

const MEMORY_BANK: [&str; 4] = [
    "logged the standing commitment",
    "archived the previous handover",
    "re-read the event ledger",
    "noted the correction window",
];

fn word_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

/// Simulated agent with the default (credulous) policy.
pub fn simulated_agent(
    probe: &ProbeRecord,
    variant: &VariantSpec,
    seed: u64,
) -> Result<AgentResponse, AgentError> {
    simulated_agent_with_policy(probe, variant, &SimPolicy::default(), seed)
}

/// Simulated agent: a pure function of (probe, variant, policy, seed).
pub fn simulated_agent_with_policy(
    probe: &ProbeRecord,
    variant: &VariantSpec,
    policy: &SimPolicy,
    seed: u64,
) -> Result<AgentResponse, AgentError> {
    variant.validate()?;
    let condition = ConditionName::from_str(&probe.key.condition)
        .map_err(|e| AgentError::Config(e.to_string()))?;
    let spec = ConditionSpec::for_name(condition);
    let mut rng = derive_rng(seed, &["sim", &probe.key.to_string(), &variant.variant_id]);

    // Decide the final action.
    let mut noise_text: Option<&str> = None;
    let chosen: ActionCode = if variant.is_stochastic() {
        if rng.gen::<f64>() < policy.unmapped_noise {
            noise_text = Some(NOISE_BANK[rng.gen_range(0..NOISE_BANK.len())]);
            ActionCode::InvalidOrUnmapped
        } else {
            spec.valid_codes[rng.gen_range(0..spec.valid_codes.len())]
        }
    } else {
        let implied = probe
            .decisive_field
            .as_ref()
            .map(|f| canonicalize(&f.text))
            .filter(|c| *c != ActionCode::InvalidOrUnmapped);
        match (implied, probe.field_is_current()) {
            // Current, mappable field: honor it when the condition's required
            // component is live; a lesioned component never sees the update.
            (Some(_), true) => match spec.required_component {
                Some(k) if !variant.enables(k) => spec.expected_before,
                _ => spec.expected_after,
            },
            // Foreign field: follow it with the policy's probability.
            (Some(foreign), false) => {
                if rng.gen::<f64>() < policy.follow_foreign {
                    foreign
                } else {
                    spec.expected_before
                }
            }
            // Absent or unmappable field: nothing binds, keep the old label.
            (None, _) => spec.expected_before,
        }
    };

    let raw_output = match noise_text {
        Some(text) => text.to_string(),
        None => {
            let bank = phrasings(chosen);
            bank[rng.gen_range(0..bank.len())].to_string()
        }
    };
    // Trace carries the bare code so action identity survives paraphrase.
    let final_action =
        noise_text.map(str::to_string).unwrap_or_else(|| chosen.as_str().to_string());

    let trace = build_trace(probe, variant, &spec, chosen, &final_action, &mut rng);
    let prompt_tokens = word_count(&probe.render_prompt());
    let completion_tokens = word_count(&raw_output);
    let meta = ProviderMeta {
        prompt_tokens: Some(prompt_tokens),
        completion_tokens: Some(completion_tokens),
        total_tokens: Some(prompt_tokens + completion_tokens),
        latency_ms: Some(1.0 + rng.gen::<f64>()),
        temperature: Some(variant.temperature),
        top_p: None,
    };
    Ok(AgentResponse {
        raw_output,
        trace: Some(trace),
        meta,
        parse_status: ParseStatus::Ok,
        diagnostic: None,
    })
}

fn build_trace(
    probe: &ProbeRecord,
    variant: &VariantSpec,
    spec: &ConditionSpec,
    chosen: ActionCode,
    final_action: &str,
    rng: &mut impl Rng,
) -> TraceBundle {
    let scrambled = probe.control.is_scrambled();
    let state_tag = |enabled: bool| -> SourceTag {
        if !enabled {
            SourceTag::Absent
        } else if scrambled {
            SourceTag::Scrambled
        } else {
            SourceTag::Generated
        }
    };
    let candidate_actions: Vec<String> = if variant.branch {
        spec.valid_codes.iter().map(|c| c.as_str().to_string()).collect()
    } else {
        vec![final_action.to_string()]
    };
    let reason_graph = if variant.reason {
        vec!["weighed the standing evidence against the update".to_string()]
    } else {
        Vec::new()
    };
    let memory_trace: Vec<String> = if variant.memory {
        let depth = 1 + rng.gen_range(0..4);
        (0..depth).map(|i| MEMORY_BANK[(i + rng.gen_range(0..4)) % 4].to_string()).collect()
    } else {
        Vec::new()
    };
    let self_state = if variant.self_state {
        SelfState {
            identity_weight: 0.55 + 0.45 * rng.gen::<f64>(),
            continuity_weight: 0.55 + 0.45 * rng.gen::<f64>(),
            commitment: None,
        }
    } else {
        SelfState::default()
    };
    let veto_state = if variant.veto {
        VetoState {
            applied: chosen == ActionCode::Veto,
            rationale: if chosen == ActionCode::Veto {
                "constraint record honored".to_string()
            } else {
                String::new()
            },
        }
    } else {
        VetoState::default()
    };
    let mut provenance = std::collections::BTreeMap::new();
    for field in TRACE_FIELDS {
        let tag = match field {
            "reason_graph" => state_tag(variant.reason),
            "memory_trace" => state_tag(variant.memory),
            "self_state" => state_tag(variant.self_state),
            "veto_state" => state_tag(variant.veto),
            _ => SourceTag::Generated,
        };
        provenance.insert(field.to_string(), tag);
    }
    TraceBundle {
        first_impulse: spec.expected_before.as_str().to_string(),
        candidate_actions,
        reason_graph,
        memory_trace,
        self_state,
        veto_state,
        final_action: final_action.to_string(),
        final_action_rationale: "resolved from the visible event state".to_string(),
        provenance,
    }
}

// ── Remote adapter ───────────────────────────────────────────────────────────

/// Remote endpoint description. Credentials are referenced by env var name or
/// file path and resolved at startup; the secret itself never serializes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    pub timeout_secs: u64,
    /// Upper bound a scheduler may fan out to; the blocking client is serial.
    pub max_in_flight: usize,
    pub api_key_env: String,
    pub api_key_file: Option<PathBuf>,
    pub retries: u32,
    pub retry_base_ms: u64,
    pub retry_factor: u32,
    pub cache_dir: Option<PathBuf>,
    pub temperature: f64,
    pub top_p: Option<f64>,
}

impl Default for EndpointConfig {
    fn default() -> EndpointConfig {
        EndpointConfig {
            base_url: "http://127.0.0.1:8080/v1".to_string(),
            model: "local-model".to_string(),
            timeout_secs: 60,
            max_in_flight: 4,
            api_key_env: "STATEBIND_API_KEY".to_string(),
            api_key_file: None,
            retries: 3,
            retry_base_ms: 1000,
            retry_factor: 4,
            cache_dir: None,
            temperature: 0.2,
            top_p: None,
        }
    }
}

fn resolve_credential(config: &EndpointConfig) -> Result<String, AgentError> {
    if let Ok(value) = std::env::var(&config.api_key_env) {
        if !value.is_empty() {
            return Ok(value);
        }
    }
    if let Some(path) = &config.api_key_file {
        return match std::fs::read_to_string(path) {
            Ok(contents) => {
                let key = contents.trim().to_string();
                if key.is_empty() {
                    Err(AgentError::Credentials {
                        env: config.api_key_env.clone(),
                        file: path.display().to_string(),
                    })
                } else {
                    Ok(key)
                }
            }
            Err(source) => {
                Err(AgentError::CredentialIo { path: path.display().to_string(), source })
            }
        };
    }
    Err(AgentError::Credentials {
        env: config.api_key_env.clone(),
        file: config
            .api_key_file
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_else(|| "<none configured>".to_string()),
    })
}

/// Chat-completion client with retry, caching, and failure triage.
pub struct RemoteAgent {
    config: EndpointConfig,
    client: reqwest::blocking::Client,
    api_key: String,
}

impl RemoteAgent {
    pub fn new(config: EndpointConfig) -> Result<RemoteAgent, AgentError> {
        let api_key = resolve_credential(&config)?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| AgentError::Client(e.to_string()))?;
        Ok(RemoteAgent { config, client, api_key })
    }

    fn cache_key(&self, prompt: &str, seed: u64) -> String {
        let mut h = Sha256::new();
        for part in [
            self.config.base_url.as_str(),
            self.config.model.as_str(),
            &format!("{:x}", self.config.temperature.to_bits()),
            &self
                .config
                .top_p
                .map(|p| format!("{:x}", p.to_bits()))
                .unwrap_or_else(|| "none".to_string()),
            &seed.to_string(),
            prompt,
        ] {
            h.update((part.len() as u64).to_le_bytes());
            h.update(part.as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn cache_read(&self, key: &str) -> Option<AgentResponse> {
        let dir = self.config.cache_dir.as_ref()?;
        let path = dir.join(format!("{key}.json"));
        let bytes = std::fs::read(path).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn cache_write(&self, key: &str, response: &AgentResponse) -> Result<(), AgentError> {
        let Some(dir) = self.config.cache_dir.as_ref() else {
            return Ok(());
        };
        std::fs::create_dir_all(dir).map_err(|e| AgentError::Cache {
            path: dir.display().to_string(),
            detail: e.to_string(),
        })?;
        let path = dir.join(format!("{key}.json"));
        let bytes = serde_json::to_vec(response).map_err(|e| AgentError::Cache {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        std::fs::write(&path, bytes).map_err(|e| AgentError::Cache {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    /// One generation. Row-level failures land in `parse_status` and
    /// `diagnostic` instead of erroring, so a bad row never kills a run.
    pub fn generate(&self, probe: &ProbeRecord, seed: u64) -> AgentResponse {
        let prompt = probe.render_prompt();
        let key = self.cache_key(&prompt, seed);
        if let Some(cached) = self.cache_read(&key) {
            return cached;
        }
        let response = self.generate_uncached(&prompt, seed);
        if response.parse_status != ParseStatus::Unrecovered {
            // Unrecovered rows stay uncached so a later resume retries them.
            let _ = self.cache_write(&key, &response);
        }
        response
    }

    fn generate_uncached(&self, prompt: &str, seed: u64) -> AgentResponse {
        let url = format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'));
        let mut body = serde_json::json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.config.temperature,
            "seed": seed,
        });
        if let Some(top_p) = self.config.top_p {
            body["top_p"] = serde_json::json!(top_p);
        }
        let mut last_diag = DiagnosticCategory::Transport;
        for attempt in 0..=self.config.retries {
            let started = Instant::now();
            let result = self
                .client
                .post(&url)
                .bearer_auth(&self.api_key)
                .json(&body)
                .send();
            let outcome = match result {
                Err(e) if e.is_timeout() => Err((DiagnosticCategory::Timeout, true)),
                Err(_) => Err((DiagnosticCategory::Transport, true)),
                Ok(resp) => {
                    let status = resp.status().as_u16();
                    match status {
                        401 | 403 => Err((DiagnosticCategory::Auth, false)),
                        429 => Err((DiagnosticCategory::Quota, true)),
                        408 => Err((DiagnosticCategory::Timeout, true)),
                        s if s >= 500 => Err((DiagnosticCategory::Transport, true)),
                        _ => Ok(resp),
                    }
                }
            };
            match outcome {
                Ok(resp) => {
                    let latency_ms = started.elapsed().as_secs_f64() * 1000.0;
                    return self.parse_payload(resp, latency_ms);
                }
                Err((diag, transient)) => {
                    last_diag = diag;
                    if !transient {
                        return failure_response(diag);
                    }
                    if attempt < self.config.retries {
                        self.backoff(seed, attempt);
                    }
                }
            }
        }
        AgentResponse {
            raw_output: String::new(),
            trace: None,
            meta: ProviderMeta::default(),
            parse_status: ParseStatus::Unrecovered,
            diagnostic: Some(last_diag),
        }
    }

    /// Exponential backoff with full jitter, seeded per (record, attempt).
    fn backoff(&self, seed: u64, attempt: u32) {
        let ceiling = self
            .config
            .retry_base_ms
            .saturating_mul(u64::from(self.config.retry_factor).saturating_pow(attempt));
        let mut rng = derive_rng(seed, &["retry", &attempt.to_string()]);
        let delay = rng.gen_range(0..=ceiling.min(30_000));
        std::thread::sleep(Duration::from_millis(delay));
    }

    fn parse_payload(&self, resp: reqwest::blocking::Response, latency_ms: f64) -> AgentResponse {
        let body = match resp.text() {
            Ok(text) => text,
            Err(_) => return failure_response(DiagnosticCategory::Transport),
        };
        let parsed: Result<serde_json::Value, _> = serde_json::from_str(&body);
        let value = match parsed {
            Ok(v) if v.is_object() => v,
            // Keep the offending body so the scorer and the diagnostics both
            // see what the provider actually sent.
            _ => {
                let mut response = failure_response(DiagnosticCategory::PayloadNotObject);
                response.raw_output = body;
                return response;
            }
        };
        let mut meta = ProviderMeta {
            latency_ms: Some(latency_ms),
            temperature: Some(self.config.temperature),
            top_p: self.config.top_p,
            ..ProviderMeta::default()
        };
        if let Some(usage) = value.get("usage") {
            meta.prompt_tokens = usage.get("prompt_tokens").and_then(|v| v.as_u64());
            meta.completion_tokens = usage.get("completion_tokens").and_then(|v| v.as_u64());
            meta.total_tokens = usage.get("total_tokens").and_then(|v| v.as_u64());
        }
        let content = value
            .pointer("/choices/0/message/content")
            .and_then(|v| v.as_str())
            .map(str::to_string);
        let Some(content) = content else {
            return AgentResponse {
                raw_output: String::new(),
                trace: None,
                meta,
                parse_status: ParseStatus::ParseError,
                diagnostic: Some(DiagnosticCategory::MissingContent),
            };
        };
        let trace = serde_json::from_str::<serde_json::Value>(&content)
            .ok()
            .as_ref()
            .and_then(trace_from_value);
        AgentResponse {
            raw_output: content,
            trace,
            meta,
            parse_status: ParseStatus::Ok,
            diagnostic: None,
        }
    }
}

fn failure_response(diagnostic: DiagnosticCategory) -> AgentResponse {
    let parse_status = match diagnostic {
        DiagnosticCategory::PayloadNotObject | DiagnosticCategory::MissingContent => {
            ParseStatus::ParseError
        }
        _ => ParseStatus::Unrecovered,
    };
    AgentResponse {
        raw_output: String::new(),
        trace: None,
        meta: ProviderMeta::default(),
        parse_status,
        diagnostic: Some(diagnostic),
    }
}

fn string_list(value: Option<&serde_json::Value>) -> Vec<String> {
    value
        .and_then(|v| v.as_array())
        .map(|items| items.iter().filter_map(|i| i.as_str().map(str::to_string)).collect())
        .unwrap_or_default()
}

/// Builds a trace from a provider's structured content. Fields the provider
/// omits default to empty with `absent` provenance; provided fields default
/// to `generated` unless the payload carries its own provenance map.
fn trace_from_value(value: &serde_json::Value) -> Option<TraceBundle> {
    let obj = value.as_object()?;
    let final_action = obj.get("final_action")?.as_str()?.to_string();
    let first_impulse =
        obj.get("first_impulse").and_then(|v| v.as_str()).unwrap_or_default().to_string();
    let candidate_actions = string_list(obj.get("candidate_actions"));
    let reason_graph = string_list(obj.get("reason_graph"));
    let memory_trace = string_list(obj.get("memory_trace"));
    let self_state = obj
        .get("self_state")
        .map(|v| SelfState {
            identity_weight: v.get("identity_weight").and_then(|w| w.as_f64()).unwrap_or(0.0),
            continuity_weight: v.get("continuity_weight").and_then(|w| w.as_f64()).unwrap_or(0.0),
            commitment: v.get("commitment").and_then(|c| c.as_str()).map(str::to_string),
        })
        .unwrap_or_default();
    let veto_state = obj
        .get("veto_state")
        .map(|v| VetoState {
            applied: v.get("applied").and_then(|a| a.as_bool()).unwrap_or(false),
            rationale: v
                .get("rationale")
                .and_then(|r| r.as_str())
                .unwrap_or_default()
                .to_string(),
        })
        .unwrap_or_default();
    let final_action_rationale = obj
        .get("final_action_rationale")
        .and_then(|v| v.as_str())
        .unwrap_or_default()
        .to_string();

    let declared: Option<&serde_json::Map<String, serde_json::Value>> =
        obj.get("provenance").and_then(|v| v.as_object());
    let mut provenance = std::collections::BTreeMap::new();
    for field in TRACE_FIELDS {
        let tag = declared
            .and_then(|map| map.get(field))
            .and_then(|v| serde_json::from_value::<SourceTag>(v.clone()).ok())
            .unwrap_or_else(|| {
                let present = match field {
                    "first_impulse" => !first_impulse.is_empty(),
                    "candidate_actions" => !candidate_actions.is_empty(),
                    "reason_graph" => !reason_graph.is_empty(),
                    "memory_trace" => !memory_trace.is_empty(),
                    "self_state" => obj.contains_key("self_state"),
                    "veto_state" => obj.contains_key("veto_state"),
                    "final_action" => true,
                    _ => !final_action_rationale.is_empty(),
                };
                if present {
                    SourceTag::Generated
                } else {
                    SourceTag::Absent
                }
            });
        provenance.insert(field.to_string(), tag);
    }
    Some(TraceBundle {
        first_impulse,
        candidate_actions,
        reason_graph,
        memory_trace,
        self_state,
        veto_state,
        final_action,
        final_action_rationale,
        provenance,
    })
}

/// One-shot remote call; builds a client per call. Prefer [`RemoteAgent`] for
/// fan-out so credential resolution and the connection pool are reused.
pub fn remote_agent(
    probe: &ProbeRecord,
    config: &EndpointConfig,
    seed: u64,
) -> Result<AgentResponse, AgentError> {
    Ok(RemoteAgent::new(config.clone())?.generate(probe, seed))
}
