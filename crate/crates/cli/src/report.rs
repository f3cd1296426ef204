use std::fmt::Write as _;
use std::path::PathBuf;

use tsattr::bench::BenchResult;
use tsattr::claims::{run_claims, ClaimsReport};
use tsattr::config::RunConfig;
use tsattr::io;

use crate::commands::CliError;

/// Methods as rows, `(mode, regularized)` as columns, mean auROC (n seeds).
pub fn bench_table(result: &BenchResult) -> String {
    let mut cols: Vec<(tsattr::sampling::Mode, bool)> = Vec::new();
    let mut rows: Vec<tsattr::attribution::Method> = Vec::new();
    for s in &result.summary {
        if !cols.contains(&(s.mode, s.regularized)) {
            cols.push((s.mode, s.regularized));
        }
        if !rows.contains(&s.method) {
            rows.push(s.method);
        }
    }
    let mut out = String::from("| method |");
    for (mode, reg) in &cols {
        let _ = write!(out, " {}{} |", mode.name(), if *reg { " + reg" } else { "" });
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(cols.len()));
    out.push('\n');
    for method in rows {
        let _ = write!(out, "| {} |", method.name());
        for &(mode, reg) in &cols {
            match result.get(method, mode, reg) {
                Some(s) if s.auroc.is_finite() => {
                    let _ = write!(out, " {:.3} [{:.3}, {:.3}] |", s.auroc, s.ci_lo, s.ci_hi);
                }
                _ => out.push_str(" failed |"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn claims_table(report: &ClaimsReport) -> String {
    let mut out = String::from("| claim | seed | verdict | metrics |\n|---|---|---|---|\n");
    for v in &report.verdicts {
        let verdict = match (&v.error, v.passed) {
            (Some(e), _) => format!("error: {e}"),
            (None, true) => "pass".into(),
            (None, false) => "FAIL".into(),
        };
        let metrics: Vec<String> = v.metrics.iter().map(|(k, x)| format!("{k}={x:.4}")).collect();
        let _ = writeln!(out, "| {:?} | {} | {} | {} |", v.claim, v.seed, verdict, metrics.join(", "));
    }
    out
}

pub fn report(cfg: &RunConfig, jobs: usize) -> Result<(), CliError> {
    let section = &cfg.report;
    let out = cfg.output.clone();
    let mut claims: Option<ClaimsReport> = None;
    if section.run_claims {
        let dir = out.as_deref().ok_or_else(|| CliError::Config("`output` is required to run claims".into()))?;
        io::prepare_dir(dir, cfg.force)?;
        let seeds = cfg.seed.map_or_else(|| section.seeds.clone(), |s| vec![s]);
        let report = run_claims(&section.setup, &section.claims, &seeds, jobs).map_err(CliError::Other)?;
        io::write_json_file(&dir.join("claims.json"), &report)?;
        claims = Some(report);
    } else if let Some(path) = claims_path(cfg) {
        claims = Some(io::read_json_file(&path)?);
    }
    let results: Option<BenchResult> = match &section.results_file {
        Some(path) => Some(io::read_json_file(path)?),
        None => None,
    };
    if claims.is_none() && results.is_none() {
        return Err(CliError::Config("nothing to report: set report.run_claims, report.claims_file or report.results_file".into()));
    }
    let mut text = String::from("# Report\n\n");
    if let Some(c) = &claims {
        let _ = write!(text, "## Theory checks ({})\n\n{}\n", if c.passed { "all pass" } else { "some fail" }, claims_table(c));
    }
    if let Some(r) = &results {
        let _ = write!(text, "## Benchmark (mean auROC, 95% CI over seeds)\n\n{}\n", bench_table(r));
    }
    if let Some(dir) = &out {
        io::write_text(&dir.join("report.md"), &text)?;
    }
    print!("{text}");
    Ok(())
}

fn claims_path(cfg: &RunConfig) -> Option<PathBuf> {
    cfg.report.claims_file.clone().or_else(|| {
        let p = cfg.output.as_ref()?.join("claims.json");
        p.exists().then_some(p)
    })
}
