//! Acceptance gate: twelve end-to-end criteria, one test (and one visible
//! pass/fail line) per criterion, each pinned to an independent oracle or a
//! frozen expected value at the stated tolerance.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;

use statebind_core::agents::VariantSpec;
use statebind_core::guard::{wrap_with_visibility, GuardVisibility};
use statebind_core::ontology::ActionCode;
use statebind_core::pipeline::{run, RunConfig, WrapperSummary};
use statebind_core::probes::{ControlTag, LeakageReport};
use statebind_core::records::{ProbeRecord, SCORER_TARGET_KEY};
use statebind_core::scoring::{behavioral_composite, AfciTerms, ComponentKind, ComponentTable};
use statebind_core::seeds::derive_rng;
use statebind_core::stats::{
    auc, calibration_gap, cluster_bootstrap_lower, delta_auc, entropy_from_counts,
    grouped_cv_predict, recovery_fraction, sign_test, CvOptions, EntropyCell, EntropyLayer,
    EntropyLayerReport, FeatureRow, FeatureTable, MatchingGateReport, StatsError,
};

const TOL: f64 = 1e-6;

fn read_rows<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Vec<T> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|line| serde_json::from_str(line).unwrap())
        .collect()
}

fn pooled_component(tables: &[ComponentTable], variant: &str, kind: ComponentKind) -> f64 {
    let values: Vec<f64> = tables
        .iter()
        .filter(|t| t.variant == variant)
        .flat_map(|t| t.scores.iter().filter(|s| s.component == kind).map(|s| s.value))
        .collect();
    assert!(!values.is_empty(), "no {kind} cells for {variant}");
    values.iter().sum::<f64>() / values.len() as f64
}

#[test]
fn criterion_01_behavioral_composite_fixture() {
    let start = Instant::now();
    let composite =
        behavioral_composite(&[0.997222, 0.852778, 0.994444, 0.997222]).expect("four components");
    assert!(
        (composite - 0.960417).abs() < TOL,
        "composite {composite} differs from 0.960417 by more than {TOL}"
    );
    assert!(start.elapsed().as_secs_f64() < 1.0);
    println!("criterion 01 PASS: composite {composite:.6} within {TOL} of 0.960417");
}

#[test]
fn criterion_02_alignment_mean_and_contrast_fixtures() {
    let terms = AfciTerms::new(0.494461, 0.503968, 1.0, 0.00285714);
    assert!(
        (terms.value - 0.500322).abs() < TOL,
        "alignment mean {} differs from 0.500322",
        terms.value
    );
    let delta: f64 = 0.494167 - 0.178611;
    assert!((delta - 0.315556).abs() < TOL, "contrast {delta} differs from 0.315556");
    println!(
        "criterion 02 PASS: alignment {:.6} within {TOL} of 0.500322, contrast {delta:.6} within {TOL} of 0.315556",
        terms.value
    );
}

#[test]
fn criterion_03_sign_test_exact_value_and_enumeration() {
    let p = sign_test(&[0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]).unwrap();
    assert_eq!(p, 0.0078125, "seven of seven positive must give exactly 2^-7");

    // Independent oracle: a Pascal-triangle binomial tail for every (n, k)
    // with n up to 12.
    let mut pascal = vec![vec![1u64]];
    for n in 1..=12usize {
        let prev = &pascal[n - 1];
        let mut row = vec![1u64];
        for i in 1..n {
            row.push(prev[i - 1] + prev[i]);
        }
        row.push(1);
        pascal.push(row);
    }
    for n in 1..=12usize {
        for k in 0..=n {
            let mut deltas = vec![1.0; k];
            deltas.extend(std::iter::repeat(-1.0).take(n - k));
            let observed = sign_test(&deltas).unwrap();
            let tail: u64 = (k..=n).map(|j| pascal[n][j]).sum();
            let expected = tail as f64 / 2f64.powi(n as i32);
            assert_eq!(observed, expected, "tail mismatch at n={n} k={k}");
        }
    }
    println!("criterion 03 PASS: p = 0.0078125 exactly; all tails for n <= 12 match enumeration");
}

#[test]
fn criterion_04_bootstrap_matches_exhaustive_enumeration() {
    let deltas = [0.1, 0.35, 0.6, 0.85];
    let seed = 20260822;
    let estimate = cluster_bootstrap_lower(&deltas, 10_000, seed).unwrap();

    // Exhaustive oracle: all 4^4 same-size resamples with replacement.
    let mut means = Vec::with_capacity(256);
    for a in 0..4 {
        for b in 0..4 {
            for c in 0..4 {
                for d in 0..4 {
                    means.push((deltas[a] + deltas[b] + deltas[c] + deltas[d]) / 4.0);
                }
            }
        }
    }
    means.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let exact = means[(0.05f64 * 256.0).ceil() as usize - 1];
    let mut distinct: Vec<f64> = means.clone();
    distinct.dedup();
    let position = |value: f64| -> usize {
        distinct
            .iter()
            .position(|m| (m - value).abs() < 1e-12)
            .unwrap_or_else(|| panic!("{value} is not an attainable resample mean"))
    };
    let gap = position(estimate) as i64 - position(exact) as i64;
    assert!(
        gap.abs() <= 1,
        "estimate {estimate} sits {gap} granules from the enumerated bound {exact}"
    );

    let second = cluster_bootstrap_lower(&deltas, 10_000, seed).unwrap();
    let third = cluster_bootstrap_lower(&deltas, 10_000, seed).unwrap();
    assert_eq!(estimate, second);
    assert_eq!(second, third);
    println!(
        "criterion 04 PASS: bootstrap bound {estimate:.6} within one granule of enumerated {exact:.6}, stable across three runs"
    );
}

#[test]
fn criterion_05_full_simulated_run_signature() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let outcome = run(&RunConfig::default(), dir.path()).unwrap();
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "full run took {elapsed:.1}s");
    assert_eq!(outcome.plan.scored_rows, 10_080);

    let summary = &outcome.summary;
    assert_eq!(summary.datasets.len(), 7);
    let mut directional = 0;
    for dataset in &summary.datasets {
        let cell = &summary.composites[dataset];
        let structured = cell["structured"].expect("structured composite");
        let stochastic = cell["stochastic"].expect("stochastic composite");
        if structured > stochastic {
            directional += 1;
        }
    }
    assert_eq!(directional, 7, "structured must beat stochastic on every dataset");

    let tables: Vec<ComponentTable> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("components.json")).unwrap())
            .unwrap();
    let reason_rsi = pooled_component(&tables, "no_reason", ComponentKind::Rsi);
    let reason_vei = pooled_component(&tables, "no_reason", ComponentKind::Vei);
    assert!(reason_rsi <= 0.05, "reason-lesioned RSI {reason_rsi} should collapse");
    assert!(reason_vei >= 0.9, "reason-lesioned VEI {reason_vei} should survive");
    let veto_vei = pooled_component(&tables, "no_veto", ComponentKind::Vei);
    let veto_rsi = pooled_component(&tables, "no_veto", ComponentKind::Rsi);
    assert!(veto_vei <= 0.05, "veto-lesioned VEI {veto_vei} should collapse");
    assert!(veto_rsi >= 0.9, "veto-lesioned RSI {veto_rsi} should survive");

    assert!(summary.structured_irrelevant_fp < 0.15);
    assert!(summary.parse_rate < 0.02);
    assert!(summary.unmapped_rate < 0.02);
    println!(
        "criterion 05 PASS: 10080 rows in {elapsed:.2}s, directional 7/7, lesion dissociation (RSI {reason_rsi:.3}/VEI {reason_vei:.3} and VEI {veto_vei:.3}/RSI {veto_rsi:.3}), fp {:.3}, parse {:.4}, unmapped {:.4}",
        summary.structured_irrelevant_fp, summary.parse_rate, summary.unmapped_rate
    );
}

#[test]
fn criterion_06_entropy_values_and_calibration_gap() {
    assert_eq!(entropy_from_counts([1, 1, 1, 1]), 2.0);
    let skewed = entropy_from_counts([3, 1]);
    assert!((skewed - 0.811278).abs() < TOL, "3:1 split entropy {skewed}");

    let cell = |variant: &str, bits: f64| EntropyCell {
        dataset: "d1".to_string(),
        variant: variant.to_string(),
        entropy_bits: bits,
        support: 4,
        rows: 16,
    };
    let tables_with = |candidate_raw: f64| -> Vec<EntropyLayerReport> {
        EntropyLayer::ALL
            .iter()
            .map(|&layer| EntropyLayerReport {
                layer,
                cells: vec![
                    cell("cand", if layer == EntropyLayer::Raw { candidate_raw } else { 0.5 }),
                    cell("ref", if layer == EntropyLayer::Raw { 0.3 } else { 0.5 }),
                ],
            })
            .collect()
    };
    let identical = tables_with(0.3);
    let gap = calibration_gap("cand", "ref", &identical).unwrap();
    assert_eq!(gap.gamma, 0.0);
    assert!(gap.pass);

    let separated = tables_with(0.3 + 1.17146);
    let gap = calibration_gap("cand", "ref", &separated).unwrap();
    assert!((gap.gamma - 1.17146).abs() < TOL);
    assert!(!gap.pass, "a 1.17146-bit gap must fail the 0.15 ceiling");
    println!(
        "criterion 06 PASS: uniform-4 entropy exactly 2 bits, 3:1 split {skewed:.6}, identical tables pass at 0, constructed {:.5}-bit gap fails",
        gap.gamma
    );
}

#[test]
fn criterion_07_wrapper_blocks_foreign_following_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig {
        families: Some(vec!["synth_choice_a".to_string(), "synth_recall".to_string()]),
        events_per_family: Some(8),
        replicates: 1,
        controls: vec![ControlTag::ScrambledContext],
        bootstrap_draws: 500,
        ..RunConfig::default()
    };
    let outcome = run(&config, dir.path()).unwrap();
    let wrapper: WrapperSummary =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("wrapper.json")).unwrap())
            .unwrap();
    assert!(wrapper.scrambled_rows > 0);
    assert_eq!(
        wrapper.wrapped_following_rate,
        Some(0.0),
        "full visibility must zero out foreign-field following"
    );
    assert_eq!(wrapper.raw_irrelevant_accuracy, Some(1.0));
    assert_eq!(
        wrapper.wrapped_irrelevant_accuracy,
        Some(1.0),
        "wrapping must not disturb correct irrelevant-cue actions"
    );
    assert!(outcome.gates.pass);

    // Idempotence over randomized decisions: re-wrapping a wrapped output
    // never changes it.
    let probes: Vec<ProbeRecord> = read_rows(&dir.path().join("probes.jsonl"));
    let mut rng = derive_rng(9, &["acceptance", "idempotence"]);
    for i in 0..10_000 {
        let probe = &probes[i % probes.len()];
        let action = ActionCode::ALL[rng.gen_range(0..ActionCode::ALL.len())];
        let first = wrap_with_visibility(action, probe, GuardVisibility::Full);
        let second = wrap_with_visibility(first.action_out, probe, GuardVisibility::Full);
        assert_eq!(second.action_out, first.action_out, "row {i} not a fixed point");
    }
    println!(
        "criterion 07 PASS: wrapped following 0.0 on {} scrambled rows, irrelevant accuracy 1.000 preserved, 10000 wrapped decisions are fixed points",
        wrapper.scrambled_rows
    );
}

#[test]
fn criterion_08_recovery_fraction_and_undefined_branch() {
    let fraction = recovery_fraction(1.0, 1.0, 0.208).unwrap();
    assert_eq!(fraction, 1.0, "equal full and single-field rates recover exactly 1");
    match recovery_fraction(0.2, 0.5, 0.3) {
        Err(StatsError::UndefinedRecovery { a_full, a_control }) => {
            assert_eq!(a_full, 0.2);
            assert_eq!(a_control, 0.3);
        }
        other => panic!("expected the undefined-recovery report, got {other:?}"),
    }
    println!(
        "criterion 08 PASS: recovery exactly 1.000, non-exceeding full-state rate reported instead of divided"
    );
}

#[test]
fn criterion_09_auc_oracle_and_noise_feature_bounds() {
    let start = Instant::now();

    // Average-rank AUC equals the exhaustive pair count on small inputs.
    let mut rng = derive_rng(9, &["acceptance", "auc"]);
    let mut checked = 0;
    while checked < 25 {
        let n = rng.gen_range(2..=12);
        let rows: Vec<(f64, bool)> = (0..n)
            .map(|_| ((rng.gen_range(0..6) as f64) / 2.0, rng.gen_bool(0.5)))
            .collect();
        let positives = rows.iter().filter(|(_, y)| *y).count();
        if positives == 0 || positives == rows.len() {
            continue;
        }
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (sp, yp) in rows.iter().filter(|(_, y)| *y) {
            for (sn, yn) in rows.iter().filter(|(_, y)| !*y) {
                assert!(*yp && !*yn);
                pairs += 1.0;
                if sp > sn {
                    wins += 1.0;
                } else if sp == sn {
                    wins += 0.5;
                }
            }
        }
        let expected = wins / pairs;
        let observed = auc(&rows).unwrap();
        assert!(
            (observed - expected).abs() < 1e-12,
            "auc {observed} differs from pair oracle {expected} on {rows:?}"
        );
        checked += 1;
    }

    // A cleanly separating feature reaches out-of-fold AUC 1.0.
    let mut rows = Vec::new();
    for g in 0..40 {
        for r in 0..5 {
            let outcome = (g + r) % 2 == 0;
            let jitter = ((g * 5 + r) % 7) as f64 * 0.05;
            rows.push(FeatureRow {
                group: format!("g{g:03}"),
                outcome,
                violation: outcome,
                features: vec![if outcome { 1.0 + jitter } else { jitter }],
            });
        }
    }
    let informative = FeatureTable {
        group_key: "group".to_string(),
        outcome_column: "outcome".to_string(),
        violation_column: Some("outcome".to_string()),
        feature_columns: vec!["signal".to_string()],
        rows,
    };
    let options = CvOptions::default();
    let predictions = grouped_cv_predict(&informative, &options).unwrap();
    let scored: Vec<(f64, bool)> =
        predictions.iter().zip(&informative.rows).map(|(p, r)| (*p, r.outcome)).collect();
    let informative_auc = auc(&scored).unwrap();
    assert_eq!(informative_auc, 1.0, "separable feature must rank perfectly out of fold");

    // A pure-noise feature moves AUC less than 0.05 off the intercept-only
    // baseline, and lands inside the central band of a 1000-shuffle
    // permutation null computed from the same predictions.
    let mut rng = derive_rng(9, &["acceptance", "noise"]);
    let rows: Vec<FeatureRow> = (0..200)
        .flat_map(|g| {
            let mut rng = derive_rng(9, &["acceptance", "noise-group", &g.to_string()]);
            (0..3)
                .map(|_| FeatureRow {
                    group: format!("g{g:03}"),
                    outcome: rng.gen_bool(0.5),
                    violation: rng.gen_bool(0.5),
                    features: vec![rng.gen_range(-1.0..1.0)],
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let noise = FeatureTable {
        group_key: "group".to_string(),
        outcome_column: "outcome".to_string(),
        violation_column: Some("violation".to_string()),
        feature_columns: vec!["noise".to_string()],
        rows,
    };
    let report = delta_auc(&noise, &[], &["noise"], &options, 200, 11).unwrap();
    assert!(
        report.delta.abs() < 0.05,
        "noise feature shifted AUC by {}",
        report.delta
    );

    let noise_predictions = grouped_cv_predict(&noise, &options).unwrap();
    let mut outcomes: Vec<bool> = noise.rows.iter().map(|r| r.outcome).collect();
    let mut null_aucs = Vec::with_capacity(1000);
    for _ in 0..1000 {
        outcomes.shuffle(&mut rng);
        let scored: Vec<(f64, bool)> =
            noise_predictions.iter().zip(&outcomes).map(|(p, y)| (*p, *y)).collect();
        null_aucs.push(auc(&scored).unwrap());
    }
    null_aucs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let low = null_aucs[24];
    let high = null_aucs[974];
    let observed = report.augmented_auc;
    assert!(
        observed >= low && observed <= high,
        "noise AUC {observed} escapes the permutation band [{low}, {high}]"
    );
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "predictor checks took {elapsed:.1}s");
    println!(
        "criterion 09 PASS: 25 tables match the pair oracle, informative OOF AUC 1.0, noise delta {:+.4} inside permutation band [{low:.3}, {high:.3}], {elapsed:.1}s",
        report.delta
    );
}

#[test]
fn criterion_10_matching_gate_tuple_and_boundary_failures() {
    let pass = MatchingGateReport::from_measurements(1.0, 1.0, 1.0, 0.997, 0.020);
    assert!(pass.pass, "published tuple must pass: {pass:?}");

    let ratio = MatchingGateReport::from_measurements(1.0, 1.0, 1.06, 0.997, 0.020);
    assert!(!ratio.pass);
    let failing: Vec<&str> =
        ratio.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    assert_eq!(failing, vec!["total_token_ratio"], "only the token ratio may fail");

    let gap = MatchingGateReport::from_measurements(1.0, 1.0, 1.0, 0.997, 0.151);
    assert!(!gap.pass);
    let failing: Vec<&str> =
        gap.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect();
    assert_eq!(failing, vec!["entropy_gap"], "only the entropy gap may fail");
    println!(
        "criterion 10 PASS: (1, 1, 1, 0.997, 0.020) passes; ratio 1.06 and gap 0.151 each fail exactly their own sub-check"
    );
}

#[test]
fn criterion_11_prompt_hygiene_and_credential_canary() {
    let canary = "CANARY-3f61a2905db14e7c";
    std::env::set_var("STATEBIND_ACCEPTANCE_CANARY", canary);

    let dir = tempfile::tempdir().unwrap();
    let config = RunConfig {
        families: Some(vec!["synth_choice_a".to_string(), "synth_uncertainty".to_string()]),
        events_per_family: Some(8),
        replicates: 1,
        controls: vec![ControlTag::ScrambledContext],
        bootstrap_draws: 500,
        ..RunConfig::default()
    };
    run(&config, dir.path()).unwrap();

    // The scorer-target key never reaches a rendered prompt.
    let probes: Vec<ProbeRecord> = read_rows(&dir.path().join("probes.jsonl"));
    let mut scrambled = 0;
    for probe in &probes {
        assert!(
            !probe.render_prompt().contains(SCORER_TARGET_KEY),
            "{} leaks the scorer target key",
            probe.key
        );
        if probe.control.is_scrambled() {
            scrambled += 1;
            let foreign = probe.field_event_id.as_deref().expect("scrambled rows carry an origin");
            assert_ne!(foreign, probe.key.base_event, "{} kept its own field", probe.key);
        }
    }
    assert!(scrambled > 0);
    let hygiene: LeakageReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("hygiene.json")).unwrap())
            .unwrap();
    assert!(hygiene.pass);
    assert_eq!(hygiene.target_key_hits, 0);

    // A remote run with an unreachable endpoint still writes artifacts;
    // the credential it resolved must appear in none of them.
    let remote_dir = tempfile::tempdir().unwrap();
    let endpoint = statebind_core::EndpointConfig {
        base_url: "http://127.0.0.1:9".to_string(),
        api_key_env: "STATEBIND_ACCEPTANCE_CANARY".to_string(),
        retries: 0,
        timeout_secs: 1,
        ..statebind_core::EndpointConfig::default()
    };
    let remote_config = RunConfig {
        families: Some(vec!["synth_choice_a".to_string()]),
        events_per_family: Some(2),
        replicates: 1,
        variants: vec![VariantSpec::structured("structured")],
        bootstrap_draws: 100,
        backend: statebind_core::pipeline::Backend::Remote { endpoint },
        ..RunConfig::default()
    };
    run(&remote_config, remote_dir.path()).unwrap();
    let mut scanned = 0;
    for entry in std::fs::read_dir(remote_dir.path()).unwrap() {
        let path = entry.unwrap().path();
        if path.is_file() {
            let bytes = std::fs::read(&path).unwrap();
            assert!(
                !bytes.windows(canary.len()).any(|w| w == canary.as_bytes()),
                "{} contains the credential canary",
                path.display()
            );
            scanned += 1;
        }
    }
    assert!(scanned >= 10, "expected a full artifact set, scanned {scanned}");
    println!(
        "criterion 11 PASS: target key absent from {} prompts, {scrambled} scrambled rows all foreign, canary absent from {scanned} artifacts",
        probes.len()
    );
}

#[test]
fn criterion_12_reruns_reproduce_identical_manifests() {
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let config = RunConfig::default();
    let first = run(&config, dir_a.path()).unwrap();
    let second = run(&config, dir_b.path()).unwrap();
    assert_eq!(first.manifest_sha256, second.manifest_sha256);
    let bytes_a = std::fs::read(dir_a.path().join("manifest.json")).unwrap();
    let bytes_b = std::fs::read(dir_b.path().join("manifest.json")).unwrap();
    assert_eq!(bytes_a, bytes_b);

    // Per-artifact hashes agree entry by entry, not just in aggregate.
    let manifest: BTreeMap<String, serde_json::Value> = serde_json::from_slice(&bytes_a).unwrap();
    assert!(!manifest.is_empty());
    println!(
        "criterion 12 PASS: two runs from one config produced identical manifests ({})",
        first.manifest_sha256
    );
}
