//! Command-line front end: plan/run/score/analyze/guard/report/predict over
//! a run directory, with config-file plus flag-override composition.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use statebind_core::pipeline::{
    plan, run_until, Backend, RunConfig, RunOutcome, Stage,
};
use statebind_core::probes::ControlTag;
use statebind_core::report::{render_inputs, PredictorSummary, ReportInputs};
use statebind_core::stats::{
    delta_auc, threshold_analysis, CvOptions, FeatureTable, BOOTSTRAP_DRAWS,
};
use statebind_core::{EndpointConfig, GuardVisibility, SimPolicy};

#[derive(Parser)]
#[command(
    name = "statebind",
    version,
    about = "Hidden-target action probes, binding scores, and the output wrapper"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Expand the config into grid dimensions without generating anything.
    Plan(ConfigArgs),
    /// Execute every stage: probes, generations, scoring, analysis, wrapper, report.
    Run(RunArgs),
    /// Stop after scored rows are written.
    Score(RunArgs),
    /// Stop after the analysis artifacts (components, contrasts, gates, entropy).
    Analyze(RunArgs),
    /// Stop after wrapper decisions are appended.
    Guard(RunArgs),
    /// Render report.md from whatever artifacts the directory already holds.
    Report {
        /// Run directory to read artifacts from.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the grouped out-of-fold violation predictor from a feature table.
    Predict(PredictArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run config TOML; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed every stream derives from.
    #[arg(long)]
    seed: Option<u64>,
    /// simulated, simulated:skeptical, or remote (needs --endpoint).
    #[arg(long)]
    backend: Option<String>,
    /// Endpoint config TOML for the remote backend.
    #[arg(long)]
    endpoint: Option<PathBuf>,
    /// Comma-separated family ids to keep.
    #[arg(long, value_delimiter = ',')]
    families: Option<Vec<String>>,
    /// Comma-separated extra control arms.
    #[arg(long, value_delimiter = ',')]
    controls: Option<Vec<String>>,
    /// Replicates per cell.
    #[arg(long)]
    replicates: Option<u32>,
    /// Events per family, overriding each family's own count.
    #[arg(long)]
    events: Option<usize>,
    /// full or prompt-only.
    #[arg(long)]
    guard_visibility: Option<String>,
    /// Resamples for cluster bootstrap intervals.
    #[arg(long)]
    bootstrap_draws: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory the run writes into (created if absent).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PredictArgs {
    /// Feature CSV with group, outcome, and feature columns.
    #[arg(long)]
    table: PathBuf,
    /// Column naming the resampling cluster (events stay whole per fold).
    #[arg(long, default_value = "group")]
    group_key: String,
    /// Binary outcome column.
    #[arg(long, default_value = "outcome")]
    outcome: String,
    /// Binary violation column for net-benefit rows; outcome reused if absent.
    #[arg(long)]
    violation: Option<String>,
    /// Comma-separated baseline feature columns (may be empty).
    #[arg(long, value_delimiter = ',', default_value = "")]
    baseline: Vec<String>,
    /// Comma-separated feature columns added on top of the baseline.
    #[arg(long, value_delimiter = ',')]
    augmented: Vec<String>,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = BOOTSTRAP_DRAWS)]
    draws: usize,
    /// Run directory to write predictor.json into and refresh report.md.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_visibility(text: &str) -> Result<GuardVisibility> {
    match text {
        "full" => Ok(GuardVisibility::Full),
        "prompt-only" | "prompt_only" => Ok(GuardVisibility::PromptOnly),
        other => bail!("unknown guard visibility {other:?}; expected full or prompt-only"),
    }
}

fn build_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    if let Some(backend) = &args.backend {
        config.backend = match backend.as_str() {
            "simulated" => Backend::Simulated { policy: SimPolicy::credulous() },
            "simulated:skeptical" => Backend::Simulated { policy: SimPolicy::skeptical() },
            "remote" => {
                let path = args
                    .endpoint
                    .as_ref()
                    .context("--backend remote needs --endpoint <toml>")?;
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading endpoint {}", path.display()))?;
                let endpoint: EndpointConfig = toml::from_str(&text)
                    .with_context(|| format!("parsing endpoint {}", path.display()))?;
                Backend::Remote { endpoint }
            }
            other => bail!("unknown backend {other:?}"),
        };
    }
    if let Some(families) = &args.families {
        config.families = Some(families.clone());
    }
    if let Some(controls) = &args.controls {
        config.controls = controls
            .iter()
            .map(|c| c.parse::<ControlTag>().map_err(|e| anyhow::anyhow!(e)))
            .collect::<Result<Vec<_>>>()?;
    }
    if let Some(replicates) = args.replicates {
        config.replicates = replicates;
    }
    if let Some(events) = args.events {
        config.events_per_family = Some(events);
    }
    if let Some(visibility) = &args.guard_visibility {
        config.guard_visibility = parse_visibility(visibility)?;
    }
    if let Some(draws) = args.bootstrap_draws {
        config.bootstrap_draws = draws;
    }
    Ok(config)
}

fn print_outcome(outcome: &RunOutcome) {
    if !outcome.resumed.is_empty() {
        println!("resumed stages: {}", outcome.resumed.join(", "));
    }
    println!(
        "gates: {}",
        if outcome.gates.pass { "PASS" } else { "FAIL" }
    );
    for check in &outcome.gates.checks {
        println!(
            "  {} [{}]: {:.6} vs {:.6}",
            check.name,
            if check.pass { "pass" } else { "fail" },
            check.value,
            check.threshold,
        );
    }
    println!("artifacts: {}", outcome.out_dir.display());
    println!("manifest sha256: {}", outcome.manifest_sha256);
}

fn run_stage(args: &RunArgs, stage: Stage) -> Result<()> {
    let config = build_config(&args.config)?;
    let outcome = run_until(&config, &args.out, stage)?;
    print_outcome(&outcome);
    // The banner reflects analyzed gates; a truncated run says so instead.
    if matches!(stage, Stage::Probes | Stage::Generations | Stage::Scored) {
        println!("note: gates reflect the analysis stage; this run stopped earlier");
    }
    Ok(())
}

fn read_optional<T: serde::de::DeserializeOwned>(
    dir: &Path,
    name: &str,
    missing: &mut Vec<String>,
) -> Option<T> {
    let path = dir.join(name);
    let bytes = match std::fs::read(&path) {
        Ok(bytes) => bytes,
        Err(_) => {
            missing.push(name.to_string());
            return None;
        }
    };
    match serde_json::from_slice(&bytes) {
        Ok(value) => Some(value),
        Err(_) => {
            missing.push(format!("{name} (unreadable)"));
            None
        }
    }
}

fn report_from_dir(dir: &Path) -> Result<String> {
    let mut missing = Vec::new();
    let plan_summary = match std::fs::read_to_string(dir.join("config.toml")) {
        Ok(text) => match RunConfig::from_toml(&text).and_then(|c| plan(&c)) {
            Ok(p) => Some(p),
            Err(_) => {
                missing.push("config.toml (unreadable)".to_string());
                None
            }
        },
        Err(_) => {
            missing.push("config.toml".to_string());
            None
        }
    };
    let analysis = {
        let mut part_missing = Vec::new();
        let components = read_optional(dir, "components.json", &mut part_missing);
        let summary = read_optional(dir, "summary.json", &mut part_missing);
        let gates = read_optional(dir, "gates.json", &mut part_missing);
        let contrasts = read_optional(dir, "contrasts.json", &mut part_missing);
        let entropy = read_optional(dir, "entropy.json", &mut part_missing);
        let matching = read_optional(dir, "matching.json", &mut part_missing);
        let recovery = read_optional(dir, "recovery.json", &mut part_missing);
        missing.extend(part_missing);
        match (components, summary, gates, contrasts, entropy, matching, recovery) {
            (Some(c), Some(s), Some(g), Some(t), Some(e), Some(m), Some(r)) => {
                Some(statebind_core::pipeline::AnalysisOutput {
                    components: c,
                    summary: s,
                    gates: g,
                    contrasts: t,
                    entropy: e,
                    matching: m,
                    recovery: r,
                })
            }
            _ => None,
        }
    };
    let hygiene = read_optional(dir, "hygiene.json", &mut missing);
    let wrapper = read_optional(dir, "wrapper.json", &mut missing);
    // Optional attachment, not a run artifact: absence is not reported.
    let predictor: Option<PredictorSummary> =
        std::fs::read(dir.join("predictor.json")).ok().and_then(|b| serde_json::from_slice(&b).ok());
    let text = render_inputs(&ReportInputs {
        plan: plan_summary,
        analysis,
        wrapper,
        hygiene,
        predictor,
        missing,
    });
    Ok(text)
}

fn refresh_report(dir: &Path) -> Result<()> {
    let text = report_from_dir(dir)?;
    let path = dir.join("report.md");
    std::fs::write(&path, text.as_bytes())
        .with_context(|| format!("writing {}", path.display()))?;
    // Keep the manifest's hash honest when one is present.
    let manifest_path = dir.join("manifest.json");
    if manifest_path.exists() {
        let mut manifest = statebind_core::records::Manifest::read(&manifest_path)?;
        manifest.upsert("report.md", 1, statebind_core::records::sha256_hex(text.as_bytes()));
        manifest.write(&manifest_path)?;
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn predict(args: &PredictArgs) -> Result<()> {
    let baseline: Vec<&str> =
        args.baseline.iter().map(String::as_str).filter(|s| !s.is_empty()).collect();
    let augmented: Vec<&str> = args.augmented.iter().map(String::as_str).collect();
    if augmented.is_empty() {
        bail!("--augmented needs at least one feature column");
    }
    let mut all: Vec<&str> = baseline.clone();
    all.extend(augmented.iter().copied());
    let table = FeatureTable::from_csv(
        &args.table,
        &args.group_key,
        &args.outcome,
        args.violation.as_deref(),
        &all,
    )?;
    let options = CvOptions { folds: args.folds, seed: args.seed, ..CvOptions::default() };
    let delta = delta_auc(&table, &baseline, &all, &options, args.draws, args.seed)?;
    let augmented_table = table.select_features(&all)?;
    let predictions = statebind_core::stats::grouped_cv_predict(&augmented_table, &options)?;
    let outcomes: Vec<bool> = augmented_table.rows.iter().map(|r| r.outcome).collect();
    let violations: Vec<bool> = augmented_table.rows.iter().map(|r| r.violation).collect();
    let thresholds: Vec<f64> = (1..10).map(|i| i as f64 / 10.0).collect();
    let points = threshold_analysis(&predictions, &outcomes, &violations, &thresholds)?;
    let summary = PredictorSummary {
        table_rows: table.rows.len(),
        groups: table.distinct_groups().len(),
        baseline_features: baseline.iter().map(|s| s.to_string()).collect(),
        augmented_features: augmented.iter().map(|s| s.to_string()).collect(),
        delta,
        thresholds: points,
    };
    let json = serde_json::to_string_pretty(&summary)?;
    match &args.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .with_context(|| format!("creating {}", dir.display()))?;
            let path = dir.join("predictor.json");
            std::fs::write(&path, format!("{json}\n"))
                .with_context(|| format!("writing {}", path.display()))?;
            println!("wrote {}", path.display());
            if dir.join("config.toml").exists() {
                refresh_report(dir)?;
            }
        }
        None => println!("{json}"),
    }
    println!(
        "out-of-fold AUC: baseline {:.6}, augmented {:.6}, delta {:.6}",
        summary.delta.baseline_auc, summary.delta.augmented_auc, summary.delta.delta,
    );
    Ok(())
}

/// Die quietly when a downstream pipe closes (e.g. `statebind plan | head`)
/// instead of panicking on the failed write.
fn reset_sigpipe() {
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
}

fn main() -> Result<()> {
    reset_sigpipe();
    let cli = Cli::parse();
    match &cli.command {
        Command::Plan(args) => {
            let config = build_config(args)?;
            let p = plan(&config)?;
            println!("datasets ({}): {}", p.datasets.len(), p.datasets.join(", "));
            println!("conditions: {}", p.conditions.len());
            println!("arms ({}): {}", p.arms.len(), p.arms.join(", "));
            println!("replicates: {}", p.replicates);
            println!("scored rows: {}", p.scored_rows);
            if p.needs_priors {
                println!("calibration pass required: yes");
            }
            Ok(())
        }
        Command::Run(args) => run_stage(args, Stage::Report),
        Command::Score(args) => run_stage(args, Stage::Scored),
        Command::Analyze(args) => run_stage(args, Stage::Analysis),
        Command::Guard(args) => run_stage(args, Stage::Guard),
        Command::Report { out } => {
            let text = report_from_dir(out)?;
            refresh_report(out)?;
            // Echo the banner line for quick terminal triage.
            if let Some(line) = text.lines().find(|l| l.starts_with("## Overall gates")) {
                println!("{}", line.trim_start_matches("## "));
            }
            Ok(())
        }
        Command::Predict(args) => predict(args),
    }
}
