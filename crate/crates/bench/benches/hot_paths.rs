//! Benchmarks for the paths a full run spends its time in: text-to-code
//! canonicalization, n-gram clustering, the cluster bootstrap, AUC ranking,
//! and a single simulated generation.

use criterion::{black_box, criterion_group, criterion_main, Criterion};

use statebind_core::agents::{simulated_agent, VariantSpec};
use statebind_core::ontology::{canonicalize, ConditionName};
use statebind_core::probes::{builtin_families, generate_events};
use statebind_core::records::ProbeRecord;
use statebind_core::stats::{auc, cluster_bootstrap_lower, semantic_clusters};

fn sample_probe() -> ProbeRecord {
    let family = builtin_families()
        .into_iter()
        .find(|f| f.family_id == "synth_choice_a")
        .expect("builtin family");
    let events = generate_events(&family, &ConditionName::ALL, 7).expect("events generate");
    events.into_iter().next().expect("at least one probe")
}

fn bench_canonicalize(c: &mut Criterion) {
    let inputs = [
        "I will go with Option A here.",
        "Declining: this request should be refused outright without appeal.",
        "Both option a and option b look fine to me, honestly.",
        "qwxzv flumrik prandle oftwise curnal gebbet",
    ];
    c.bench_function("canonicalize_mixed_phrases", |b| {
        b.iter(|| {
            for text in &inputs {
                black_box(canonicalize(black_box(text)));
            }
        })
    });
}

fn bench_semantic_clusters(c: &mut Criterion) {
    let stems = [
        "choose option a because the ledger favors it",
        "pick option b since the margin flipped",
        "refusing this request entirely",
        "deferring until the missing figure arrives",
        "the earlier commitment still stands",
    ];
    let outputs: Vec<String> = (0..100)
        .map(|i| format!("{} variant {}", stems[i % stems.len()], i / stems.len()))
        .collect();
    c.bench_function("semantic_clusters_100_outputs", |b| {
        b.iter(|| black_box(semantic_clusters(black_box(&outputs), 0.90).unwrap()))
    });
}

fn bench_cluster_bootstrap(c: &mut Criterion) {
    let deltas = [0.41, 0.38, 0.52, 0.47, 0.33, 0.44, 0.49];
    c.bench_function("cluster_bootstrap_7x10000", |b| {
        b.iter(|| black_box(cluster_bootstrap_lower(black_box(&deltas), 10_000, 17).unwrap()))
    });
}

fn bench_auc(c: &mut Criterion) {
    let rows: Vec<(f64, bool)> = (0..1000)
        .map(|i| {
            let score = (i as f64 * 0.618_033_988_749).fract();
            (score, score + ((i % 7) as f64) * 0.03 > 0.55)
        })
        .collect();
    c.bench_function("auc_1000_rows", |b| {
        b.iter(|| black_box(auc(black_box(&rows)).unwrap()))
    });
}

fn bench_simulated_generation(c: &mut Criterion) {
    let probe = sample_probe();
    let variant = VariantSpec::structured("bench");
    c.bench_function("simulated_generation", |b| {
        b.iter(|| black_box(simulated_agent(black_box(&probe), &variant, 17).unwrap()))
    });
}

criterion_group!(
    hot_paths,
    bench_canonicalize,
    bench_semantic_clusters,
    bench_cluster_bootstrap,
    bench_auc,
    bench_simulated_generation,
);
criterion_main!(hot_paths);
