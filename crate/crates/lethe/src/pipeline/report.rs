//! Cross-run Markdown reporting: the Original / Oracle / Data-Free / GA
//! comparison per run, a LoRA-selector table when runs differ in target
//! modules, and a data-scale section when pseudo-set sizes differ.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::metrics::{markdown_table, PrivacyReport, UtilityKind};
use crate::pipeline::manifest::RunManifest;
use crate::pipeline::stages::RunSummary;
use crate::unlearn::UnlearnMode;

struct RunView {
    label: String,
    base: Option<PrivacyReport>,
    per_mode: Vec<(UnlearnMode, PrivacyReport, Option<RunSummary>)>,
}

fn load_run(dir: &Path) -> Result<RunView> {
    let manifest = RunManifest::load(dir)?;
    manifest.verify_artifacts(dir)?;
    let label = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());

    let read_report = |name: &str| -> Option<PrivacyReport> {
        let path = dir.join(format!("report_{name}.json"));
        std::fs::read_to_string(path)
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok())
    };
    let base = read_report("base");
    let mut per_mode = Vec::new();
    for mode in [UnlearnMode::Oracle, UnlearnMode::Pseudo, UnlearnMode::Ga] {
        if let Some(report) = read_report(mode.name()) {
            let summary: Option<RunSummary> = std::fs::read_to_string(
                dir.join(format!("unlearn_{}", mode.name())).join("run.json"),
            )
            .ok()
            .and_then(|t| serde_json::from_str(&t).ok());
            per_mode.push((mode, report, summary));
        }
    }
    Ok(RunView {
        label,
        base,
        per_mode,
    })
}

fn mode_label(mode: UnlearnMode) -> &'static str {
    match mode {
        UnlearnMode::Oracle => "Oracle (ground-truth data)",
        UnlearnMode::Pseudo => "Data-free (pseudo data)",
        UnlearnMode::Ga => "Gradient ascent (full sequence)",
    }
}

/// Render the comparison document for one or more run directories.
pub fn render_report(dirs: &[PathBuf]) -> Result<String> {
    if dirs.is_empty() {
        return Err(Error::Contract("report: no run directories".into()));
    }
    let runs: Vec<RunView> = dirs
        .iter()
        .map(|d| load_run(d))
        .collect::<Result<Vec<_>>>()?;

    let mut out = String::new();
    out.push_str("# Privacy evaluation report\n\n");
    out.push_str("Privacy metrics are percentages; lower is better. Utility is clean-corpus perplexity (lower is better) or accuracy (higher is better).\n\n");

    for run in &runs {
        out.push_str(&format!("## Run `{}`\n\n", run.label));
        let mut rows: Vec<(&str, &PrivacyReport)> = Vec::new();
        if let Some(base) = &run.base {
            rows.push(("Original model", base));
        }
        for (mode, report, _) in &run.per_mode {
            rows.push((mode_label(*mode), report));
        }
        if rows.is_empty() {
            out.push_str("_No evaluation reports present._\n\n");
        } else {
            out.push_str(&markdown_table(&rows));
            out.push('\n');
        }
        for (mode, _, summary) in &run.per_mode {
            if let Some(s) = summary {
                out.push_str(&format!(
                    "- {}: stop = {:?}, β = {}, LoRA = {:?} (r = {}, α = {}), {} training samples\n",
                    mode_label(*mode),
                    s.stop,
                    s.unlearn_config.beta,
                    s.unlearn_config.lora.selector,
                    s.unlearn_config.lora.rank,
                    s.unlearn_config.lora.alpha,
                    s.data_len,
                ));
            }
        }
        out.push('\n');
    }

    // LoRA target-module comparison across runs that differ only in selector.
    let selector_rows: Vec<(&RunView, &RunSummary, &PrivacyReport)> = runs
        .iter()
        .flat_map(|r| {
            r.per_mode
                .iter()
                .filter_map(move |(_, report, summary)| summary.as_ref().map(|s| (r, s, report)))
        })
        .collect();
    let selectors: std::collections::BTreeSet<String> = selector_rows
        .iter()
        .map(|(_, s, _)| format!("{:?}", s.unlearn_config.lora.selector))
        .collect();
    if selectors.len() > 1 {
        out.push_str("## LoRA target-module comparison\n\n");
        out.push_str("| Run | Mode | Targets | E-Hit (%) | Utility |\n|---|---|---|---|---|\n");
        for (run, s, report) in &selector_rows {
            let e_hit = report
                .e_hit
                .map(|v| format!("{:.2}", v * 100.0))
                .unwrap_or_else(|| "—".into());
            let utility = report
                .utility
                .map(|u| match u.kind {
                    UtilityKind::Ppl => format!("PPL {:.3}", u.value),
                    UtilityKind::Accuracy => format!("Acc {:.1}%", u.value * 100.0),
                })
                .unwrap_or_else(|| "—".into());
            out.push_str(&format!(
                "| {} | {} | {:?} | {} | {} |\n",
                run.label,
                s.mode.name(),
                s.unlearn_config.lora.selector,
                e_hit,
                utility
            ));
        }
        out.push('\n');
    }

    // Data-scale sweep across runs whose pseudo-set sizes differ.
    let pseudo_sizes: std::collections::BTreeSet<usize> = selector_rows
        .iter()
        .filter(|(_, s, _)| s.mode == UnlearnMode::Pseudo)
        .map(|(_, s, _)| s.data_len)
        .collect();
    if pseudo_sizes.len() > 1 {
        out.push_str("## Pseudo-data scale\n\n");
        out.push_str("| Run | Pseudo samples | E-Hit pre (%) | E-Hit post (%) | Reduction (%) |\n|---|---|---|---|---|\n");
        for (run, s, report) in &selector_rows {
            if s.mode != UnlearnMode::Pseudo {
                continue;
            }
            let pre = s.baseline.e_hit.unwrap_or(f64::NAN);
            let post = report.e_hit.unwrap_or(f64::NAN);
            out.push_str(&format!(
                "| {} | {} | {:.2} | {:.2} | {:.2} |\n",
                run.label,
                s.data_len,
                pre * 100.0,
                post * 100.0,
                (pre - post) * 100.0
            ));
        }
        out.push('\n');
    }

    Ok(out)
}
