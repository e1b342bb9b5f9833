//! The `run`, `sweep-k`, `verify` and `report` verbs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use layergrad::metrics::AccuracyMatrix;
use layergrad::trainer::{train_sequence, IterRecord, Method, MethodVariant, RunTiming};
use layergrad::verify::{self, SuiteReport, VerifyOptions};
use layergrad::{Feasibility, Relaxation};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::CliError;

pub const ACCURACY_FILE: &str = "accuracy.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const LOG_FILE: &str = "run.log.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Summary {
    pub variant: MethodVariant,
    pub seed: u64,
    pub acc: f64,
    pub bwt: Option<f64>,
    /// Wall-clock figures; the only fields that differ between repeated runs.
    pub timing: TimingSummary,
    pub feasibility: Option<Feasibility>,
    pub degenerate_updates: usize,
    pub gem_unconverged: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimingSummary {
    pub wall_clock_s: f64,
    pub solver_total_s: f64,
    pub solver_mean_us: f64,
    pub iterations: usize,
}

impl From<RunTiming> for TimingSummary {
    fn from(t: RunTiming) -> Self {
        TimingSummary {
            wall_clock_s: t.wall_clock_s,
            solver_total_s: t.solver_total_s,
            solver_mean_us: t.solver_mean_us(),
            iterations: t.iterations,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Outputs {
    pub accuracy: PathBuf,
    pub summary: PathBuf,
    pub run_log: PathBuf,
}

/// Everything needed to reproduce one (variant, seed) run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    /// Resolved configuration restricted to this run's variant and seed.
    pub config: ExperimentConfig,
    pub seed: u64,
    pub variant: MethodVariant,
    pub started_at: String,
    pub finished_at: String,
    pub outputs: Outputs,
    pub code_version: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(io_err(path))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

/// Directory-safe form of a variant name.
pub fn variant_slug(v: &MethodVariant) -> String {
    v.to_string().replace(':', "-").replace('+', "_")
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn run_one(
    cfg: &ExperimentConfig,
    variant: MethodVariant,
    seed: u64,
    dir: &Path,
) -> Result<Summary, CliError> {
    let started_at = now();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let stream = cfg.build_stream(seed)?;
    let outcome = train_sequence(&stream, &cfg.train_config(variant, seed))?;

    let accuracy = dir.join(ACCURACY_FILE);
    write_file(&accuracy, &outcome.matrix.to_csv())?;

    let summary = Summary {
        variant,
        seed,
        acc: outcome.matrix.acc()?,
        bwt: outcome.matrix.bwt()?,
        timing: outcome.timing.into(),
        feasibility: outcome.feasibility,
        degenerate_updates: outcome.degenerate_updates,
        gem_unconverged: outcome.gem_unconverged,
    };
    let summary_path = dir.join(SUMMARY_FILE);
    write_file(&summary_path, &to_json(&summary))?;

    let log_path = dir.join(LOG_FILE);
    let mut log = String::new();
    for rec in &outcome.log {
        log.push_str(&serde_json::to_string::<IterRecord>(rec).expect("plain data serializes"));
        log.push('\n');
    }
    write_file(&log_path, &log)?;

    let mut snapshot = cfg.clone();
    snapshot.run.seeds = vec![seed];
    snapshot.run.variants = vec![variant];
    let manifest = RunManifest {
        config: snapshot,
        seed,
        variant,
        started_at,
        finished_at: now(),
        outputs: Outputs {
            accuracy: ACCURACY_FILE.into(),
            summary: SUMMARY_FILE.into(),
            run_log: LOG_FILE.into(),
        },
        code_version: format!("layergrad {}", env!("CARGO_PKG_VERSION")),
    };
    let manifest_path = dir.join(MANIFEST_FILE);
    write_file(&manifest_path, &to_json(&manifest))?;
    Ok(summary)
}

fn results_table(rows: &[Summary]) -> String {
    let mut out = String::from("variant,seed,acc,bwt\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r.variant, r.seed, r.acc, fmt_opt(r.bwt)).unwrap();
    }
    out
}

fn print_rows(rows: &[Summary]) {
    println!(
        "{:<20} {:>6} {:>8} {:>8} {:>10} {:>14}",
        "variant", "seed", "ACC", "BWT", "wall (s)", "solver (us/it)"
    );
    for r in rows {
        let bwt = r
            .bwt
            .map_or_else(|| "n/a".to_string(), |b| format!("{b:.4}"));
        println!(
            "{:<20} {:>6} {:>8.4} {:>8} {:>10.2} {:>14.1}",
            r.variant.to_string(),
            r.seed,
            r.acc,
            bwt,
            r.timing.wall_clock_s,
            r.timing.solver_mean_us
        );
    }
}

/// Runs every configured (variant, seed) pair.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Vec<Summary>, CliError> {
    let root = &cfg.run.out_dir;
    let mut rows = Vec::new();
    for &variant in &cfg.run.variants {
        for &seed in &cfg.run.seeds {
            let dir = root
                .join(variant_slug(&variant))
                .join(format!("seed-{seed}"));
            rows.push(run_one(cfg, variant, seed, &dir)?);
        }
    }
    fs::create_dir_all(root).map_err(io_err(root))?;
    write_file(&root.join("results.csv"), &results_table(&rows))?;
    print_rows(&rows);
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub k_requested: usize,
    pub k: usize,
    pub acc: f64,
    pub bwt: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// One run per K and seed with the configured PCA-relaxed variant; writes
/// `sweep_k.csv` with seed-averaged metrics.
pub fn cmd_sweep_k(cfg: &ExperimentConfig, ks: &[usize]) -> Result<Vec<SweepRow>, CliError> {
    let variant = cfg.run.variants[0];
    if !matches!(variant.method, Method::Ours(Relaxation::PcaTopK(_))) {
        return Err(CliError::Config {
            key: "run.variants[0]".into(),
            message: format!(
                "sweep-k needs a PCA-relaxed variant such as `ours-pca:1`, got `{variant}`"
            ),
        });
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::Config {
            key: "k".into(),
            message: "K values must be >= 1".into(),
        });
    }
    // the last step sees T-1 memories whose deviations span at most T-2 directions
    let max_rank = cfg.stream.tasks.saturating_sub(2).max(1);
    let root = &cfg.run.out_dir;
    fs::create_dir_all(root).map_err(io_err(root))?;
    let mut notes = String::new();
    let mut rows = Vec::new();
    for &requested in ks {
        let k = requested.min(max_rank);
        if k != requested {
            let note = format!(
                "K={requested} exceeds the task-specific rank {max_rank} available with {} tasks; clamped to {k}",
                cfg.stream.tasks
            );
            eprintln!("note: {note}");
            notes.push_str(&note);
            notes.push('\n');
        }
        let v = MethodVariant::new(Method::Ours(Relaxation::PcaTopK(k)), variant.layerwise);
        let mut runs = Vec::new();
        for &seed in &cfg.run.seeds {
            let dir = root.join(format!("k-{k}")).join(format!("seed-{seed}"));
            runs.push(run_one(cfg, v, seed, &dir)?);
        }
        rows.push(SweepRow {
            k_requested: requested,
            k,
            acc: mean(runs.iter().map(|r| r.acc)).expect("at least one seed"),
            bwt: mean(runs.iter().filter_map(|r| r.bwt)),
        });
    }
    let mut csv = String::from("k_requested,k,acc,bwt\n");
    for r in &rows {
        writeln!(
            csv,
            "{},{},{},{}",
            r.k_requested,
            r.k,
            r.acc,
            fmt_opt(r.bwt)
        )
        .unwrap();
    }
    write_file(&root.join("sweep_k.csv"), &csv)?;
    write_file(&root.join("sweep_k.log"), &notes)?;
    print!("{csv}");
    Ok(rows)
}

fn describe(r: &SuiteReport) -> String {
    format!(
        "{} {:<28} checked {:>4}  worst {:.3e}  tolerance {:.0e}",
        if r.passed { "PASS" } else { "FAIL" },
        r.name,
        r.checked,
        r.worst,
        r.tolerance
    )
}

/// Runs the property suites; returns whether all passed.
pub fn cmd_verify(opts: &VerifyOptions, failures: Option<&Path>) -> Result<bool, CliError> {
    let reports = verify::run_all(opts);
    let mut ok = true;
    for r in &reports {
        println!("{}", describe(r));
        if let Some(instance) = &r.failure {
            ok = false;
            let text = serde_json::to_string(instance).expect("json value serializes");
            eprintln!("failing instance for {}: {text}", r.name);
            if let Some(dir) = failures {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                write_file(&dir.join(format!("{}.json", r.name)), &format!("{text}\n"))?;
            }
        }
        ok &= r.passed;
    }
    println!(
        "{} of {} suites passed",
        reports.iter().filter(|r| r.passed).count(),
        reports.len()
    );
    Ok(ok)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub path: PathBuf,
    pub variant: Option<String>,
    pub seed: Option<u64>,
    pub acc: f64,
    pub bwt: Option<f64>,
}

fn find_matrices(dir: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
    let mut entries: Vec<_> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .collect::<Result<Vec<_>, _>>()
        .map_err(io_err(dir))?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            find_matrices(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == ACCURACY_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

/// Recomputes ACC/BWT from every stored accuracy matrix under `dir`.
pub fn cmd_report(dir: &Path) -> Result<Vec<ReportRow>, CliError> {
    let mut files = Vec::new();
    find_matrices(dir, &mut files)?;
    let mut rows = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f).map_err(io_err(&f))?;
        let m = AccuracyMatrix::from_csv(&text)?;
        let manifest: Option<RunManifest> = f
            .parent()
            .map(|p| p.join(MANIFEST_FILE))
            .and_then(|p| fs::read_to_string(p).ok())
            .and_then(|t| serde_json::from_str(&t).ok());
        rows.push(ReportRow {
            path: f.strip_prefix(dir).unwrap_or(&f).to_path_buf(),
            variant: manifest.as_ref().map(|m| m.variant.to_string()),
            seed: manifest.as_ref().map(|m| m.seed),
            acc: m.acc()?,
            bwt: m.bwt()?,
        });
    }

    let mut csv = String::from("variant,seed,acc,bwt,matrix\n");
    println!(
        "{:<20} {:>6} {:>8} {:>8}  matrix",
        "variant", "seed", "ACC", "BWT"
    );
    for r in &rows {
        let variant = r.variant.clone().unwrap_or_default();
        let seed = r.seed.map_or_else(String::new, |s| s.to_string());
        writeln!(
            csv,
            "{variant},{seed},{},{},{}",
            r.acc,
            fmt_opt(r.bwt),
            r.path.display()
        )
        .unwrap();
        let bwt = r
            .bwt
            .map_or_else(|| "n/a".to_string(), |b| format!("{b:.4}"));
        println!(
            "{variant:<20} {seed:>6} {:>8.4} {bwt:>8}  {}",
            r.acc,
            r.path.display()
        );
    }

    let mut variants: Vec<&str> = rows.iter().filter_map(|r| r.variant.as_deref()).collect();
    variants.sort_unstable();
    variants.dedup();
    if !variants.is_empty() {
        println!(
            "\n{:<20} {:>6} {:>8} {:>8}",
            "variant", "runs", "mean ACC", "mean BWT"
        );
        for v in variants {
            let sel: Vec<&ReportRow> = rows
                .iter()
                .filter(|r| r.variant.as_deref() == Some(v))
                .collect();
            let acc = mean(sel.iter().map(|r| r.acc)).expect("nonempty");
            let bwt = mean(sel.iter().filter_map(|r| r.bwt))
                .map_or_else(|| "n/a".to_string(), |b| format!("{b:.4}"));
            println!("{v:<20} {:>6} {acc:>8.4} {bwt:>8}", sel.len());
        }
    }
    write_file(&dir.join("report.csv"), &csv)?;
    Ok(rows)
}

/// Reads the configuration snapshot from a run manifest.
pub fn config_from_manifest(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config {
        key: "<manifest>".into(),
        message: format!("{}: {e}", path.display()),
    })?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let manifest: RunManifest =
        serde_path_to_error::deserialize(de).map_err(|e| CliError::Config {
            key: e.path().to_string(),
            message: e.into_inner().to_string(),
        })?;
    manifest.config.validate()?;
    Ok(manifest.config)
}
