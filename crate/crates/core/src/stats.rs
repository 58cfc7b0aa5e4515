//! Inference and diagnostics: entropy layers, calibration gaps, cluster
//! bootstrap, exact sign tests, sensitivity summaries, rater agreement,
//! budget-matching gates, and the reliability-predictor math (AUC, grouped
//! cross-validation, decision thresholds, recovery fractions).
//!
//! Everything here is pure. Randomized procedures draw every resample from an
//! independent substream keyed by (seed, draw index), so results do not depend
//! on evaluation order and are reproducible bit-for-bit.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ontology::ActionCode;
use crate::seeds::{derive_rng, derive_seed};

/// Default bootstrap draw count.
pub const BOOTSTRAP_DRAWS: usize = 10_000;
/// Cosine threshold for semantic clustering.
pub const SEMANTIC_THRESHOLD: f64 = 0.90;
/// Calibration gap limit in bits.
pub const CALIBRATION_GAP_LIMIT: f64 = 0.15;

#[derive(Debug, thiserror::Error)]
pub enum StatsError {
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("input contains a non-finite value: {0}")]
    NonFinite(&'static str),
    #[error("label vectors differ in length: {a} vs {b}")]
    LengthMismatch { a: usize, b: usize },
    #[error("all deltas are exact ties; the sign test is degenerate")]
    AllTies,
    #[error("AUC undefined: only one outcome class present")]
    SingleClass,
    #[error("clustering threshold {0} outside (0, 1]")]
    Threshold(f64),
    #[error("events present on one side only: {0:?}")]
    UnpairedEvents(Vec<String>),
    #[error("{groups} distinct groups cannot fill {folds} folds")]
    TooFewGroups { groups: usize, folds: usize },
    #[error("outcome column {column:?} holds non-binary value {value:?}")]
    NonBinaryOutcome { column: String, value: String },
    #[error("column {0:?} missing from the table header")]
    MissingColumn(String),
    #[error("row {row}: {detail}")]
    BadRow { row: usize, detail: String },
    #[error("csv {path}: {source}")]
    Csv {
        path: String,
        #[source]
        source: csv::Error,
    },
    #[error("need at least {need} clusters, found {found}")]
    InsufficientClusters { need: usize, found: usize },
    #[error("recovery undefined: full-state rate {a_full} does not exceed control rate {a_control}")]
    UndefinedRecovery { a_full: f64, a_control: f64 },
    #[error("entropy layer {0} missing from the supplied tables")]
    MissingLayer(String),
    #[error("variant {variant:?} has no cells in layer {layer}")]
    MissingVariant { variant: String, layer: String },
    #[error("aligned vectors required: {0}")]
    Misaligned(&'static str),
}

fn require_finite(values: &[f64], what: &'static str) -> Result<(), StatsError> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite(what));
    }
    Ok(())
}

fn mean_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Empirical lower percentile with the ceil-index convention:
/// `sorted[ceil(q * N) - 1]`, clamped to the first element.
fn lower_percentile(sorted: &[f64], q: f64) -> f64 {
    let index = ((q * sorted.len() as f64).ceil() as usize).max(1) - 1;
    sorted[index.min(sorted.len() - 1)]
}

fn sort_unstable_finite(values: &mut [f64]) {
    values.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
}

// ── Entropy ──────────────────────────────────────────────────────────────────

/// Plug-in Shannon entropy in bits over observed label frequencies.
pub fn shannon_entropy<S: AsRef<str>>(labels: &[S]) -> Result<f64, StatsError> {
    if labels.is_empty() {
        return Err(StatsError::Empty("entropy needs at least one label"));
    }
    let mut counts: BTreeMap<&str, u64> = BTreeMap::new();
    for label in labels {
        *counts.entry(label.as_ref()).or_insert(0) += 1;
    }
    Ok(entropy_from_counts(counts.values().copied()))
}

/// Entropy in bits from raw category counts; zero counts contribute zero.
pub fn entropy_from_counts(counts: impl IntoIterator<Item = u64>) -> f64 {
    let counts: Vec<u64> = counts.into_iter().collect();
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let mut bits = 0.0;
    for count in counts {
        if count == 0 {
            continue;
        }
        let p = count as f64 / total as f64;
        bits -= p * p.log2();
    }
    bits
}

/// The four description granularities entropy is reported at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyLayer {
    Raw,
    RuleCanonical,
    SemanticCluster,
    ActionFamily,
}

impl EntropyLayer {
    pub const ALL: [EntropyLayer; 4] = [
        EntropyLayer::Raw,
        EntropyLayer::RuleCanonical,
        EntropyLayer::SemanticCluster,
        EntropyLayer::ActionFamily,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            EntropyLayer::Raw => "raw",
            EntropyLayer::RuleCanonical => "rule_canonical",
            EntropyLayer::SemanticCluster => "semantic_cluster",
            EntropyLayer::ActionFamily => "action_family",
        }
    }
}

impl std::fmt::Display for EntropyLayer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Entropy of one (dataset, variant) cell at one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyCell {
    pub dataset: String,
    pub variant: String,
    pub entropy_bits: f64,
    /// Number of distinct labels observed; entropy ≤ log2(support).
    pub support: usize,
    pub rows: usize,
}

/// All cells for one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyLayerReport {
    pub layer: EntropyLayer,
    pub cells: Vec<EntropyCell>,
}

/// One output labeled with its provenance cell, the unit entropy consumes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledOutput {
    pub dataset: String,
    pub variant: String,
    pub raw_text: String,
    pub code: ActionCode,
}

/// Builds all four entropy layers for every (dataset, variant) cell.
pub fn entropy_layers(rows: &[LabeledOutput]) -> Result<Vec<EntropyLayerReport>, StatsError> {
    if rows.is_empty() {
        return Err(StatsError::Empty("entropy layers need at least one output"));
    }
    let mut groups: BTreeMap<(String, String), Vec<&LabeledOutput>> = BTreeMap::new();
    for row in rows {
        groups.entry((row.dataset.clone(), row.variant.clone())).or_default().push(row);
    }
    let mut reports: Vec<EntropyLayerReport> =
        EntropyLayer::ALL.iter().map(|&layer| EntropyLayerReport { layer, cells: vec![] }).collect();
    for ((dataset, variant), members) in &groups {
        let raw: Vec<&str> = members.iter().map(|m| m.raw_text.as_str()).collect();
        let canonical: Vec<&str> = members.iter().map(|m| m.code.as_str()).collect();
        let family: Vec<&str> = members.iter().map(|m| m.code.family()).collect();
        let cluster_ids = semantic_clusters(&raw, SEMANTIC_THRESHOLD)?;
        let clusters: Vec<String> = cluster_ids.iter().map(|id| format!("c{id}")).collect();
        let layer_labels: [(EntropyLayer, Vec<String>); 4] = [
            (EntropyLayer::Raw, raw.iter().map(|s| s.to_string()).collect()),
            (EntropyLayer::RuleCanonical, canonical.iter().map(|s| s.to_string()).collect()),
            (EntropyLayer::SemanticCluster, clusters),
            (EntropyLayer::ActionFamily, family.iter().map(|s| s.to_string()).collect()),
        ];
        for (layer, labels) in layer_labels {
            let support = labels.iter().collect::<BTreeSet<_>>().len();
            let cell = EntropyCell {
                dataset: dataset.clone(),
                variant: variant.clone(),
                entropy_bits: shannon_entropy(&labels)?,
                support,
                rows: labels.len(),
            };
            reports.iter_mut().find(|r| r.layer == layer).expect("layer present").cells.push(cell);
        }
    }
    Ok(reports)
}

// ── Semantic clustering ──────────────────────────────────────────────────────

/// Character n-grams in range 3..=5; a text shorter than three characters
/// contributes itself as its only gram, so equal short texts still match.
fn char_ngrams(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() < 3 {
        return vec![text.to_string()];
    }
    let mut grams = Vec::new();
    for n in 3..=5usize {
        if chars.len() < n {
            break;
        }
        for window in chars.windows(n) {
            grams.push(window.iter().collect());
        }
    }
    grams
}

type SparseVec = BTreeMap<usize, f64>;

fn l2_normalize(v: &mut SparseVec) {
    let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        for value in v.values_mut() {
            *value /= norm;
        }
    }
}

fn sparse_dot(a: &SparseVec, b: &SparseVec) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    small.iter().filter_map(|(k, va)| large.get(k).map(|vb| va * vb)).sum()
}

/// TF-IDF vectors over character 3-5-grams with smoothed IDF
/// `ln((1 + N)/(1 + df)) + 1`, L2-normalized.
fn tfidf_vectors(texts: &[&str]) -> Vec<SparseVec> {
    let mut vocab: BTreeMap<String, usize> = BTreeMap::new();
    let mut doc_grams: Vec<BTreeMap<usize, u64>> = Vec::with_capacity(texts.len());
    let mut df: Vec<u64> = Vec::new();
    for text in texts {
        let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
        for gram in char_ngrams(text) {
            let next = vocab.len();
            let id = *vocab.entry(gram).or_insert(next);
            if id == df.len() {
                df.push(0);
            }
            *counts.entry(id).or_insert(0) += 1;
        }
        for id in counts.keys() {
            df[*id] += 1;
        }
        doc_grams.push(counts);
    }
    let n = texts.len() as f64;
    doc_grams
        .into_iter()
        .map(|counts| {
            let mut v: SparseVec = counts
                .into_iter()
                .map(|(id, tf)| {
                    let idf = ((1.0 + n) / (1.0 + df[id] as f64)).ln() + 1.0;
                    (id, tf as f64 * idf)
                })
                .collect();
            l2_normalize(&mut v);
            v
        })
        .collect()
}

/// Greedy single-link clustering: inputs are visited in lexicographic order
/// and each joins the first cluster whose centroid cosine reaches the
/// threshold, else founds a new one. Returned labels align with the original
/// input order; ids number clusters by founding order.
pub fn semantic_clusters<S: AsRef<str>>(
    outputs: &[S],
    threshold: f64,
) -> Result<Vec<usize>, StatsError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(StatsError::Threshold(threshold));
    }
    if outputs.is_empty() {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..outputs.len()).collect();
    order.sort_by(|&a, &b| outputs[a].as_ref().cmp(outputs[b].as_ref()).then(a.cmp(&b)));
    let sorted_texts: Vec<&str> = order.iter().map(|&i| outputs[i].as_ref()).collect();
    let vectors = tfidf_vectors(&sorted_texts);

    struct Cluster {
        sum: SparseVec,
        count: usize,
        norm: f64,
    }
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut labels = vec![0usize; outputs.len()];
    for (pos, vector) in vectors.iter().enumerate() {
        let mut assigned = None;
        for (id, cluster) in clusters.iter().enumerate() {
            if cluster.norm == 0.0 {
                continue;
            }
            let cosine = sparse_dot(vector, &cluster.sum) / cluster.norm;
            if cosine >= threshold {
                assigned = Some(id);
                break;
            }
        }
        let id = match assigned {
            Some(id) => {
                let cluster = &mut clusters[id];
                for (k, v) in vector {
                    *cluster.sum.entry(*k).or_insert(0.0) += v;
                }
                cluster.count += 1;
                cluster.norm = cluster.sum.values().map(|x| x * x).sum::<f64>().sqrt();
                id
            }
            None => {
                let norm = vector.values().map(|x| x * x).sum::<f64>().sqrt();
                clusters.push(Cluster { sum: vector.clone(), count: 1, norm });
                clusters.len() - 1
            }
        };
        labels[order[pos]] = id;
    }
    Ok(labels)
}

// ── Calibration gap ──────────────────────────────────────────────────────────

/// Per-layer mean-entropy difference and its maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationGap {
    pub candidate: String,
    pub reference: String,
    pub per_layer: Vec<(EntropyLayer, f64)>,
    pub gamma: f64,
    pub pass: bool,
}

fn layer_mean(report: &EntropyLayerReport, variant: &str) -> Option<f64> {
    let values: Vec<f64> = report
        .cells
        .iter()
        .filter(|c| c.variant == variant)
        .map(|c| c.entropy_bits)
        .collect();
    (!values.is_empty()).then(|| mean_of(&values))
}

/// Maximum over layers of the absolute dataset-mean entropy difference
/// between two variants; passes at or under [`CALIBRATION_GAP_LIMIT`].
pub fn calibration_gap(
    candidate: &str,
    reference: &str,
    tables: &[EntropyLayerReport],
) -> Result<CalibrationGap, StatsError> {
    let mut per_layer = Vec::new();
    for layer in EntropyLayer::ALL {
        let report = tables
            .iter()
            .find(|r| r.layer == layer)
            .ok_or_else(|| StatsError::MissingLayer(layer.as_str().to_string()))?;
        let a = layer_mean(report, candidate).ok_or_else(|| StatsError::MissingVariant {
            variant: candidate.to_string(),
            layer: layer.as_str().to_string(),
        })?;
        let b = layer_mean(report, reference).ok_or_else(|| StatsError::MissingVariant {
            variant: reference.to_string(),
            layer: layer.as_str().to_string(),
        })?;
        per_layer.push((layer, (a - b).abs()));
    }
    let gamma = per_layer.iter().map(|(_, g)| *g).fold(0.0, f64::max);
    Ok(CalibrationGap {
        candidate: candidate.to_string(),
        reference: reference.to_string(),
        per_layer,
        gamma,
        pass: gamma <= CALIBRATION_GAP_LIMIT,
    })
}

// ── Cluster bootstrap and sign test ──────────────────────────────────────────

/// Lower 95% bound on the mean: clusters are resampled with replacement
/// (n of n), the mean recomputed per draw, and the empirical 2.5th percentile
/// returned. Each draw uses its own substream of (seed, draw index).
pub fn cluster_bootstrap_lower(
    deltas: &[f64],
    draws: usize,
    seed: u64,
) -> Result<f64, StatsError> {
    if deltas.is_empty() {
        return Err(StatsError::Empty("bootstrap needs at least one cluster"));
    }
    if draws == 0 {
        return Err(StatsError::Empty("bootstrap needs at least one draw"));
    }
    require_finite(deltas, "bootstrap deltas")?;
    let n = deltas.len();
    let mut means = Vec::with_capacity(draws);
    for draw in 0..draws {
        let mut rng = derive_rng(seed, &["bootstrap", &draw.to_string()]);
        let mut sum = 0.0;
        for _ in 0..n {
            sum += deltas[rng.gen_range(0..n)];
        }
        means.push(sum / n as f64);
    }
    sort_unstable_finite(&mut means);
    Ok(lower_percentile(&means, 0.025))
}

/// One-sided exact sign test under a fair-coin null. Exact zero deltas are
/// dropped; p is the upper binomial tail at the observed positive count.
pub fn sign_test(deltas: &[f64]) -> Result<f64, StatsError> {
    require_finite(deltas, "sign test deltas")?;
    let informative: Vec<f64> = deltas.iter().copied().filter(|d| *d != 0.0).collect();
    if informative.is_empty() {
        return Err(StatsError::AllTies);
    }
    let n = informative.len();
    assert!(n <= 63, "exact binomial tail overflows past 63 informative clusters");
    let positives = informative.iter().filter(|d| **d > 0.0).count();
    let mut tail: u128 = 0;
    for k in positives..=n {
        tail += binomial(n as u128, k as u128);
    }
    Ok(tail as f64 / 2f64.powi(n as i32))
}

fn binomial(n: u128, k: u128) -> u128 {
    let k = k.min(n - k);
    let mut result: u128 = 1;
    for i in 0..k {
        result = result * (n - i) / (i + 1);
    }
    result
}

/// Leave-one-out means, the minimum delta, and the mean with the single
/// largest delta removed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivitySummary {
    pub lodo_means: Vec<f64>,
    pub min: f64,
    pub top_effect_removed: f64,
}

pub fn sensitivity_summaries(deltas: &[f64]) -> Result<SensitivitySummary, StatsError> {
    if deltas.len() < 2 {
        return Err(StatsError::InsufficientClusters { need: 2, found: deltas.len() });
    }
    require_finite(deltas, "sensitivity deltas")?;
    let total: f64 = deltas.iter().sum();
    let n = deltas.len() as f64;
    let lodo_means: Vec<f64> = deltas.iter().map(|d| (total - d) / (n - 1.0)).collect();
    let min = deltas.iter().copied().fold(f64::INFINITY, f64::min);
    let top = deltas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let top_effect_removed = (total - top) / (n - 1.0);
    Ok(SensitivitySummary { lodo_means, min, top_effect_removed })
}

/// One pooled contrast between a candidate and reference, with every
/// robustness view attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastTable {
    pub metric: String,
    pub comparator: String,
    pub datasets: Vec<String>,
    pub deltas: Vec<f64>,
    pub mean: f64,
    pub min: f64,
    pub lodo_means: Vec<f64>,
    pub top_effect_removed: Option<f64>,
    pub sign_test_p: Option<f64>,
    pub degenerate_sign_test: bool,
    pub bootstrap_lower: f64,
    pub bootstrap_draws: usize,
}

impl ContrastTable {
    /// Builds the full table from per-dataset deltas.
    pub fn build(
        metric: &str,
        comparator: &str,
        per_dataset: &[(String, f64)],
        draws: usize,
        seed: u64,
    ) -> Result<ContrastTable, StatsError> {
        if per_dataset.is_empty() {
            return Err(StatsError::Empty("contrast needs at least one dataset"));
        }
        let datasets: Vec<String> = per_dataset.iter().map(|(d, _)| d.clone()).collect();
        let deltas: Vec<f64> = per_dataset.iter().map(|(_, v)| *v).collect();
        require_finite(&deltas, "contrast deltas")?;
        let mean = mean_of(&deltas);
        let min = deltas.iter().copied().fold(f64::INFINITY, f64::min);
        let (lodo_means, top_effect_removed) = match sensitivity_summaries(&deltas) {
            Ok(s) => (s.lodo_means, Some(s.top_effect_removed)),
            Err(_) => (Vec::new(), None),
        };
        let (sign_test_p, degenerate_sign_test) = match sign_test(&deltas) {
            Ok(p) => (Some(p), false),
            Err(StatsError::AllTies) => (None, true),
            Err(e) => return Err(e),
        };
        let bootstrap_lower = cluster_bootstrap_lower(&deltas, draws, seed)?;
        Ok(ContrastTable {
            metric: metric.to_string(),
            comparator: comparator.to_string(),
            datasets,
            deltas,
            mean,
            min,
            lodo_means,
            top_effect_removed,
            sign_test_p,
            degenerate_sign_test,
            bootstrap_lower,
            bootstrap_draws: draws,
        })
    }
}

// ── Agreement ────────────────────────────────────────────────────────────────

/// Chance-corrected agreement; `degenerate` marks the both-constant-identical
/// convention where expected agreement is one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KappaResult {
    pub kappa: f64,
    pub degenerate: bool,
}

pub fn cohen_kappa<S: AsRef<str>, T: AsRef<str>>(
    labels_a: &[S],
    labels_b: &[T],
) -> Result<KappaResult, StatsError> {
    if labels_a.len() != labels_b.len() {
        return Err(StatsError::LengthMismatch { a: labels_a.len(), b: labels_b.len() });
    }
    if labels_a.is_empty() {
        return Err(StatsError::Empty("kappa needs at least one pair"));
    }
    let n = labels_a.len() as f64;
    let mut marg_a: BTreeMap<&str, f64> = BTreeMap::new();
    let mut marg_b: BTreeMap<&str, f64> = BTreeMap::new();
    let mut observed = 0.0;
    for (a, b) in labels_a.iter().zip(labels_b) {
        let (a, b) = (a.as_ref(), b.as_ref());
        *marg_a.entry(a).or_insert(0.0) += 1.0;
        *marg_b.entry(b).or_insert(0.0) += 1.0;
        if a == b {
            observed += 1.0;
        }
    }
    let p_o = observed / n;
    let p_e: f64 = marg_a
        .iter()
        .filter_map(|(label, ca)| marg_b.get(label).map(|cb| (ca / n) * (cb / n)))
        .sum();
    if (1.0 - p_e).abs() < 1e-15 {
        // Both raters constant on the same label: chance agreement saturates.
        return Ok(KappaResult { kappa: 1.0, degenerate: true });
    }
    Ok(KappaResult { kappa: (p_o - p_e) / (1.0 - p_e), degenerate: false })
}

// ── Matching gate ────────────────────────────────────────────────────────────

/// Per-event usage facts for one side of a matched comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRow {
    pub event: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
    pub latency_ms: f64,
}

/// One sub-criterion of the matching gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingCheck {
    pub name: String,
    pub value: f64,
    pub pass: bool,
    pub bound: String,
}

///// Budget-matching verdict: two exact match rates, two ratio windows, and an
/// entropy gap, all of which must hold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchingGateReport {
    pub prompt_match_rate: f64,
    pub completion_match_rate: f64,
    pub total_token_ratio: f64,
    pub latency_ratio: f64,
    pub entropy_gap: f64,
    pub checks: Vec<MatchingCheck>,
    pub pass: bool,
}

impl MatchingGateReport {
    /// Evaluates the five sub-criteria on already-computed measurements.
    pub fn from_measurements(
        prompt_match_rate: f64,
        completion_match_rate: f64,
        total_token_ratio: f64,
        latency_ratio: f64,
        entropy_gap: f64,
    ) -> MatchingGateReport {
        let checks = vec![
            MatchingCheck {
                name: "prompt_token_match".to_string(),
                value: prompt_match_rate,
                pass: prompt_match_rate == 1.0,
                bound: "= 1.0".to_string(),
            },
            MatchingCheck {
                name: "completion_token_match".to_string(),
                value: completion_match_rate,
                pass: completion_match_rate == 1.0,
                bound: "= 1.0".to_string(),
            },
            MatchingCheck {
                name: "total_token_ratio".to_string(),
                value: total_token_ratio,
                pass: (0.95..=1.05).contains(&total_token_ratio),
                bound: "[0.95, 1.05]".to_string(),
            },
            MatchingCheck {
                name: "latency_ratio".to_string(),
                value: latency_ratio,
                pass: (0.50..=1.50).contains(&latency_ratio),
                bound: "[0.50, 1.50]".to_string(),
            },
            MatchingCheck {
                name: "entropy_gap".to_string(),
                value: entropy_gap,
                pass: entropy_gap <= CALIBRATION_GAP_LIMIT,
                bound: "<= 0.15 bits".to_string(),
            },
        ];
        let pass = checks.iter().all(|c| c.pass);
        MatchingGateReport {
            prompt_match_rate,
            completion_match_rate,
            total_token_ratio,
            latency_ratio,
            entropy_gap,
            checks,
            pass,
        }
    }
}

/// Pairs the two sides event-wise and evaluates the matching gate. Token
/// ratios compare side sums; the latency ratio compares side means; the
/// entropy pair is the canonical-action entropy of each side in bits.
pub fn matching_gate(
    meta_a: &[TokenRow],
    meta_b: &[TokenRow],
    entropies: (f64, f64),
) -> Result<MatchingGateReport, StatsError> {
    if meta_a.is_empty() || meta_b.is_empty() {
        return Err(StatsError::Empty("matching gate needs rows on both sides"));
    }
    let by_event = |rows: &[TokenRow]| -> BTreeMap<String, TokenRow> {
        rows.iter().map(|r| (r.event.clone(), r.clone())).collect()
    };
    let a = by_event(meta_a);
    let b = by_event(meta_b);
    let unpaired: Vec<String> = a
        .keys()
        .filter(|k| !b.contains_key(*k))
        .chain(b.keys().filter(|k| !a.contains_key(*k)))
        .cloned()
        .collect();
    if !unpaired.is_empty() {
        return Err(StatsError::UnpairedEvents(unpaired));
    }
    let n = a.len() as f64;
    let mut prompt_matches = 0.0;
    let mut completion_matches = 0.0;
    let (mut total_a, mut total_b) = (0u64, 0u64);
    let (mut latency_a, mut latency_b) = (0.0f64, 0.0f64);
    for (event, row_a) in &a {
        let row_b = &b[event];
        if row_a.prompt_tokens == row_b.prompt_tokens {
            prompt_matches += 1.0;
        }
        if row_a.completion_tokens == row_b.completion_tokens {
            completion_matches += 1.0;
        }
        total_a += row_a.total_tokens;
        total_b += row_b.total_tokens;
        latency_a += row_a.latency_ms;
        latency_b += row_b.latency_ms;
    }
    let ratio = |x: f64, y: f64| if y == 0.0 { if x == 0.0 { 1.0 } else { f64::INFINITY } } else { x / y };
    Ok(MatchingGateReport::from_measurements(
        prompt_matches / n,
        completion_matches / n,
        ratio(total_a as f64, total_b as f64),
        ratio(latency_a / n, latency_b / n),
        (entropies.0 - entropies.1).abs(),
    ))
}

// ── Reliability predictor ────────────────────────────────────────────────────

/// Rank-based AUC with half credit for score ties; equals the exhaustive
/// concordant-pair count.
pub fn auc(scores: &[(f64, bool)]) -> Result<f64, StatsError> {
    let positives = scores.iter().filter(|(_, y)| *y).count();
    let negatives = scores.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(StatsError::SingleClass);
    }
    require_finite(&scores.iter().map(|(s, _)| *s).collect::<Vec<f64>>(), "auc scores")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].0.partial_cmp(&scores[b].0).expect("finite scores"));
    // Average ranks across tie runs, 1-based.
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]].0 == scores[order[i]].0 {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg_rank;
        }
        i = j + 1;
    }
    let positive_rank_sum: f64 =
        scores.iter().zip(&ranks).filter(|((_, y), _)| *y).map(|(_, r)| *r).sum();
    let p = positives as f64;
    let q = negatives as f64;
    Ok((positive_rank_sum - p * (p + 1.0) / 2.0) / (p * q))
}

/// One predictor row: grouping key, binary outcome, binary violation flag,
/// and the feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub group: String,
    pub outcome: bool,
    pub violation: bool,
    pub features: Vec<f64>,
}

/// A named-column feature table with a declared header contract.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureTable {
    pub group_key: String,
    pub outcome_column: String,
    pub violation_column: Option<String>,
    pub feature_columns: Vec<String>,
    pub rows: Vec<FeatureRow>,
}

fn parse_binary(text: &str, column: &str) -> Result<bool, StatsError> {
    match text.trim() {
        "0" | "false" => Ok(false),
        "1" | "true" => Ok(true),
        other => Err(StatsError::NonBinaryOutcome {
            column: column.to_string(),
            value: other.to_string(),
        }),
    }
}

impl FeatureTable {
    /// Loads a CSV under the declared header contract: a group column, a
    /// binary outcome column, an optional binary violation column, and f64
    /// feature columns.
    pub fn from_csv(
        path: &Path,
        group_key: &str,
        outcome_column: &str,
        violation_column: Option<&str>,
        feature_columns: &[&str],
    ) -> Result<FeatureTable, StatsError> {
        let mut reader = csv::Reader::from_path(path)
            .map_err(|source| StatsError::Csv { path: path.display().to_string(), source })?;
        let headers = reader
            .headers()
            .map_err(|source| StatsError::Csv { path: path.display().to_string(), source })?
            .clone();
        let find = |name: &str| -> Result<usize, StatsError> {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| StatsError::MissingColumn(name.to_string()))
        };
        let group_idx = find(group_key)?;
        let outcome_idx = find(outcome_column)?;
        let violation_idx = violation_column.map(find).transpose()?;
        let feature_idx: Vec<usize> =
            feature_columns.iter().map(|c| find(c)).collect::<Result<_, _>>()?;
        let mut rows = Vec::new();
        for (row_number, record) in reader.records().enumerate() {
            let record = record
                .map_err(|source| StatsError::Csv { path: path.display().to_string(), source })?;
            let outcome = parse_binary(&record[outcome_idx], outcome_column)?;
            let violation = match violation_idx {
                Some(idx) => parse_binary(&record[idx], violation_column.unwrap_or("violation"))?,
                None => false,
            };
            let mut features = Vec::with_capacity(feature_idx.len());
            for (&idx, name) in feature_idx.iter().zip(feature_columns) {
                let value: f64 = record[idx].trim().parse().map_err(|_| StatsError::BadRow {
                    row: row_number + 2,
                    detail: format!("column {name:?} value {:?} is not numeric", &record[idx]),
                })?;
                features.push(value);
            }
            rows.push(FeatureRow {
                group: record[group_idx].to_string(),
                outcome,
                violation,
                features,
            });
        }
        Ok(FeatureTable {
            group_key: group_key.to_string(),
            outcome_column: outcome_column.to_string(),
            violation_column: violation_column.map(str::to_string),
            feature_columns: feature_columns.iter().map(|s| s.to_string()).collect(),
            rows,
        })
    }

    /// A copy restricted to a subset of feature columns (possibly empty, for
    /// an intercept-only baseline).
    pub fn select_features(&self, keep: &[&str]) -> Result<FeatureTable, StatsError> {
        let indices: Vec<usize> = keep
            .iter()
            .map(|name| {
                self.feature_columns
                    .iter()
                    .position(|c| c == name)
                    .ok_or_else(|| StatsError::MissingColumn((*name).to_string()))
            })
            .collect::<Result<_, _>>()?;
        let rows = self
            .rows
            .iter()
            .map(|r| FeatureRow {
                group: r.group.clone(),
                outcome: r.outcome,
                violation: r.violation,
                features: indices.iter().map(|&i| r.features[i]).collect(),
            })
            .collect();
        Ok(FeatureTable {
            group_key: self.group_key.clone(),
            outcome_column: self.outcome_column.clone(),
            violation_column: self.violation_column.clone(),
            feature_columns: keep.iter().map(|s| s.to_string()).collect(),
            rows,
        })
    }

    pub fn distinct_groups(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.group.clone()).collect::<BTreeSet<_>>().into_iter().collect()
    }
}

/// Grouped cross-validation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub folds: usize,
    pub seed: u64,
    pub max_iters: usize,
    pub tolerance: f64,
    pub learning_rate: f64,
}

impl Default for CvOptions {
    fn default() -> CvOptions {
        CvOptions { folds: 5, seed: 0, max_iters: 10_000, tolerance: 1e-8, learning_rate: 0.25 }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Stable per-sample logistic loss ln(1 + e^z) - y z.
fn logistic_loss(z: f64, y: bool) -> f64 {
    let softplus = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    softplus - if y { z } else { 0.0 }
}

/// Gradient descent on mean logistic loss with intercept, run to a loss-delta
/// tolerance. Features must already be standardized.
fn fit_logistic(
    features: &[Vec<f64>],
    outcomes: &[bool],
    options: &CvOptions,
) -> (Vec<f64>, f64) {
    let n = features.len();
    let dims = features.first().map(Vec::len).unwrap_or(0);
    let mut weights = vec![0.0; dims];
    let mut intercept = 0.0;
    let mut prev_loss = f64::INFINITY;
    for _ in 0..options.max_iters {
        let mut grad_w = vec![0.0; dims];
        let mut grad_b = 0.0;
        let mut loss = 0.0;
        for (x, &y) in features.iter().zip(outcomes) {
            let z = intercept + weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            let residual = sigmoid(z) - if y { 1.0 } else { 0.0 };
            for (g, v) in grad_w.iter_mut().zip(x) {
                *g += residual * v;
            }
            grad_b += residual;
            loss += logistic_loss(z, y);
        }
        loss /= n as f64;
        for (w, g) in weights.iter_mut().zip(&grad_w) {
            *w -= options.learning_rate * g / n as f64;
        }
        intercept -= options.learning_rate * grad_b / n as f64;
        if (prev_loss - loss).abs() < options.tolerance {
            break;
        }
        prev_loss = loss;
    }
    (weights, intercept)
}

struct Standardizer {
    means: Vec<f64>,
    scales: Vec<f64>,
}

impl Standardizer {
    fn fit(features: &[Vec<f64>]) -> Standardizer {
        let dims = features.first().map(Vec::len).unwrap_or(0);
        let n = features.len().max(1) as f64;
        let mut means = vec![0.0; dims];
        for row in features {
            for (m, v) in means.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut scales = vec![0.0; dims];
        for row in features {
            for ((s, v), m) in scales.iter_mut().zip(row).zip(&means) {
                *s += (v - m) * (v - m) / n;
            }
        }
        for s in &mut scales {
            *s = s.sqrt();
            if *s == 0.0 {
                *s = 1.0;
            }
        }
        Standardizer { means, scales }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter()
            .zip(self.means.iter().zip(&self.scales))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

/// Fold id for one group under a seeded hash.
pub fn fold_of(group: &str, folds: usize, seed: u64) -> usize {
    (derive_seed(seed, &["fold", group]) % folds as u64) as usize
}

/// Out-of-fold predicted probabilities, aligned with `table.rows`. Groups are
/// hashed to folds; one model is fit per held-out fold on the remaining rows
/// with per-fold feature standardization.
pub fn grouped_cv_predict(
    table: &FeatureTable,
    options: &CvOptions,
) -> Result<Vec<f64>, StatsError> {
    if table.rows.is_empty() {
        return Err(StatsError::Empty("cross-validation needs rows"));
    }
    let groups = table.distinct_groups();
    if groups.len() < options.folds {
        return Err(StatsError::TooFewGroups { groups: groups.len(), folds: options.folds });
    }
    if !table.rows.iter().any(|r| r.outcome) || table.rows.iter().all(|r| r.outcome) {
        return Err(StatsError::SingleClass);
    }
    let folds: Vec<usize> =
        table.rows.iter().map(|r| fold_of(&r.group, options.folds, options.seed)).collect();
    let mut probabilities = vec![0.0; table.rows.len()];
    for fold in 0..options.folds {
        let test: Vec<usize> =
            (0..table.rows.len()).filter(|&i| folds[i] == fold).collect();
        if test.is_empty() {
            continue;
        }
        let train: Vec<usize> =
            (0..table.rows.len()).filter(|&i| folds[i] != fold).collect();
        let train_features: Vec<Vec<f64>> =
            train.iter().map(|&i| table.rows[i].features.clone()).collect();
        let standardizer = Standardizer::fit(&train_features);
        let standardized: Vec<Vec<f64>> =
            train_features.iter().map(|r| standardizer.apply(r)).collect();
        let train_outcomes: Vec<bool> = train.iter().map(|&i| table.rows[i].outcome).collect();
        let (weights, intercept) = fit_logistic(&standardized, &train_outcomes, options);
        for &i in &test {
            let x = standardizer.apply(&table.rows[i].features);
            let z = intercept + weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
            probabilities[i] = sigmoid(z);
        }
    }
    Ok(probabilities)
}

/// Baseline-versus-augmented comparison on shared out-of-fold predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaAucReport {
    pub baseline_auc: f64,
    pub augmented_auc: f64,
    pub delta: f64,
    /// Lower 95% bound from group-cluster resampling of the fixed
    /// out-of-fold predictions; absent when no resample was computable.
    pub cluster_lower: Option<f64>,
}

/// Fits both feature sets under identical folds, compares AUCs, and bounds
/// the difference by resampling groups over the fixed predictions.
pub fn delta_auc(
    table: &FeatureTable,
    baseline_features: &[&str],
    augmented_features: &[&str],
    options: &CvOptions,
    draws: usize,
    seed: u64,
) -> Result<DeltaAucReport, StatsError> {
    let baseline_table = table.select_features(baseline_features)?;
    let augmented_table = table.select_features(augmented_features)?;
    let baseline_probs = grouped_cv_predict(&baseline_table, options)?;
    let augmented_probs = grouped_cv_predict(&augmented_table, options)?;
    let outcomes: Vec<bool> = table.rows.iter().map(|r| r.outcome).collect();
    let pair = |probs: &[f64]| -> Vec<(f64, bool)> {
        probs.iter().copied().zip(outcomes.iter().copied()).collect()
    };
    let baseline_auc = auc(&pair(&baseline_probs))?;
    let augmented_auc = auc(&pair(&augmented_probs))?;

    let groups = table.distinct_groups();
    let mut rows_of: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, row) in table.rows.iter().enumerate() {
        rows_of.entry(row.group.as_str()).or_default().push(i);
    }
    let mut deltas = Vec::with_capacity(draws);
    for draw in 0..draws {
        let mut rng = derive_rng(seed, &["delta_auc", &draw.to_string()]);
        let mut base = Vec::new();
        let mut augmented = Vec::new();
        for _ in 0..groups.len() {
            let group = &groups[rng.gen_range(0..groups.len())];
            for &i in &rows_of[group.as_str()] {
                base.push((baseline_probs[i], outcomes[i]));
                augmented.push((augmented_probs[i], outcomes[i]));
            }
        }
        // A single-class resample has no defined AUC; that draw is skipped.
        if let (Ok(b), Ok(a)) = (auc(&base), auc(&augmented)) {
            deltas.push(a - b);
        }
    }
    let cluster_lower = if deltas.is_empty() {
        None
    } else {
        sort_unstable_finite(&mut deltas);
        Some(lower_percentile(&deltas, 0.025))
    };
    Ok(DeltaAucReport {
        baseline_auc,
        augmented_auc,
        delta: augmented_auc - baseline_auc,
        cluster_lower,
    })
}

// ── Threshold analysis ───────────────────────────────────────────────────────

/// Decision-curve facts at one acceptance threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPoint {
    pub threshold: f64,
    pub accepted_fraction: f64,
    pub accepted_hit_rate: f64,
    pub accepted_violation_rate: f64,
    /// (TP - FP * t/(1-t)) / n at threshold t.
    pub net_benefit: f64,
    /// Set when nothing was accepted (including the t = 1 convention); all
    /// quantities are then reported as zero.
    pub empty_acceptance: bool,
}

pub fn threshold_analysis(
    probs: &[f64],
    outcomes: &[bool],
    violations: &[bool],
    grid: &[f64],
) -> Result<Vec<ThresholdPoint>, StatsError> {
    if probs.len() != outcomes.len() || probs.len() != violations.len() {
        return Err(StatsError::Misaligned("probs, outcomes, violations must align"));
    }
    if probs.is_empty() {
        return Err(StatsError::Empty("threshold analysis needs rows"));
    }
    require_finite(probs, "threshold probabilities")?;
    let n = probs.len() as f64;
    let mut points = Vec::with_capacity(grid.len());
    for &t in grid {
        let accepted: Vec<usize> =
            (0..probs.len()).filter(|&i| t < 1.0 && probs[i] >= t).collect();
        if accepted.is_empty() {
            points.push(ThresholdPoint {
                threshold: t,
                accepted_fraction: 0.0,
                accepted_hit_rate: 0.0,
                accepted_violation_rate: 0.0,
                net_benefit: 0.0,
                empty_acceptance: true,
            });
            continue;
        }
        let tp = accepted.iter().filter(|&&i| outcomes[i]).count() as f64;
        let fp = accepted.len() as f64 - tp;
        let weight = if t <= 0.0 { 0.0 } else { t / (1.0 - t) };
        points.push(ThresholdPoint {
            threshold: t,
            accepted_fraction: accepted.len() as f64 / n,
            accepted_hit_rate: tp / accepted.len() as f64,
            accepted_violation_rate: accepted.iter().filter(|&&i| violations[i]).count() as f64
                / accepted.len() as f64,
            net_benefit: (tp - fp * weight) / n,
            empty_acceptance: false,
        });
    }
    Ok(points)
}

/// Percentile band over group-resampled threshold analyses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdBand {
    pub threshold: f64,
    pub accepted_fraction: (f64, f64),
    pub accepted_hit_rate: (f64, f64),
    pub accepted_violation_rate: (f64, f64),
    pub net_benefit: (f64, f64),
}

/// 95% bands for every grid point, from resampling groups with replacement
/// and recomputing the analysis per draw.
pub fn threshold_bands(
    probs: &[f64],
    outcomes: &[bool],
    violations: &[bool],
    groups: &[String],
    grid: &[f64],
    draws: usize,
    seed: u64,
) -> Result<Vec<ThresholdBand>, StatsError> {
    if groups.len() != probs.len() {
        return Err(StatsError::Misaligned("groups must align with probs"));
    }
    let distinct: Vec<&String> = groups.iter().collect::<BTreeSet<_>>().into_iter().collect();
    let mut rows_of: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, group) in groups.iter().enumerate() {
        rows_of.entry(group.as_str()).or_default().push(i);
    }
    // per grid point, per quantity, all draw values
    let mut samples: Vec<[Vec<f64>; 4]> =
        grid.iter().map(|_| [vec![], vec![], vec![], vec![]]).collect();
    for draw in 0..draws {
        let mut rng = derive_rng(seed, &["threshold_band", &draw.to_string()]);
        let mut p = Vec::new();
        let mut o = Vec::new();
        let mut v = Vec::new();
        for _ in 0..distinct.len() {
            let group = distinct[rng.gen_range(0..distinct.len())];
            for &i in &rows_of[group.as_str()] {
                p.push(probs[i]);
                o.push(outcomes[i]);
                v.push(violations[i]);
            }
        }
        for (point, bucket) in threshold_analysis(&p, &o, &v, grid)?.iter().zip(&mut samples) {
            bucket[0].push(point.accepted_fraction);
            bucket[1].push(point.accepted_hit_rate);
            bucket[2].push(point.accepted_violation_rate);
            bucket[3].push(point.net_benefit);
        }
    }
    let band = |values: &mut Vec<f64>| -> (f64, f64) {
        sort_unstable_finite(values);
        (lower_percentile(values, 0.025), lower_percentile(values, 0.975))
    };
    Ok(grid
        .iter()
        .zip(&mut samples)
        .map(|(&threshold, buckets)| ThresholdBand {
            threshold,
            accepted_fraction: band(&mut buckets[0]),
            accepted_hit_rate: band(&mut buckets[1]),
            accepted_violation_rate: band(&mut buckets[2]),
            net_benefit: band(&mut buckets[3]),
        })
        .collect())
}

/// Share of full-state binding recovered by the minimal decisive field:
/// (a_only - a_control) / (a_full - a_control). May exceed one.
pub fn recovery_fraction(a_full: f64, a_only: f64, a_control: f64) -> Result<f64, StatsError> {
    if !(a_full.is_finite() && a_only.is_finite() && a_control.is_finite()) {
        return Err(StatsError::NonFinite("recovery rates"));
    }
    if a_full <= a_control {
        return Err(StatsError::UndefinedRecovery { a_full, a_control });
    }
    Ok((a_only - a_control) / (a_full - a_control))
}
