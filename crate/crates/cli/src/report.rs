//! Render pipeline artifacts (trace/sweep, alignment plan, fusion report)
//! as terminal-friendly text.

use std::path::{Path, PathBuf};

use unibridge_core::embed_init::{Phase, PlanReport};
use unibridge_core::vocab_search::{SearchTrace, SweepEntry};
use unibridge_core::FusionReport;

use crate::CliError;

const STAGE: &str = "report";

pub fn render(
    trace: Option<PathBuf>,
    plan: Option<PathBuf>,
    fusion: Option<PathBuf>,
    csv: Option<PathBuf>,
) -> Result<(), CliError> {
    if trace.is_none() && plan.is_none() && fusion.is_none() {
        return Err(CliError::validation(
            STAGE,
            "nothing to report: pass --trace, --plan or --fusion",
        ));
    }
    if let Some(path) = trace {
        render_trace(&path, csv.as_deref())?;
    } else if csv.is_some() {
        return Err(CliError::validation(STAGE, "--csv requires --trace"));
    }
    if let Some(path) = plan {
        render_plan(&path)?;
    }
    if let Some(path) = fusion {
        render_fusion(&path)?;
    }
    Ok(())
}

fn read(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(STAGE, path, e))
}

fn render_trace(path: &Path, csv: Option<&Path>) -> Result<(), CliError> {
    let text = read(path)?;
    // a sweep report is a JSON array of per-threshold entries
    if let Ok(entries) = serde_json::from_str::<Vec<SweepEntry>>(&text) {
        println!("threshold sweep ({} entries)", entries.len());
        println!("{:>10}  {:>12}  steps", "threshold", "chosen size");
        for entry in &entries {
            println!(
                "{:>10.2}  {:>12}  {}",
                entry.threshold,
                entry.chosen_size,
                entry.trace.steps.len()
            );
        }
        if csv.is_some() {
            return Err(CliError::validation(
                STAGE,
                "--csv applies to a single trace, not a sweep",
            ));
        }
        return Ok(());
    }
    let trace: SearchTrace = serde_json::from_str(&text)
        .map_err(|e| CliError::data(STAGE, format!("{}: {e}", path.display())))?;
    println!("{:>10}  {:>10}  {:>14}  {:>10}", "requested", "actual", "alp", "delta");
    for step in &trace.steps {
        let delta = step
            .delta
            .map(|d| format!("{d:.4}"))
            .unwrap_or_else(|| "-".into());
        println!(
            "{:>10}  {:>10}  {:>14.4}  {:>10}",
            step.requested_size, step.actual_size, step.alp, delta
        );
    }
    println!("chosen size {} ({:?})", trace.chosen_size, trace.stop_reason);
    if let Some(csv_path) = csv {
        std::fs::write(csv_path, trace.to_csv()).map_err(|e| CliError::io(STAGE, csv_path, e))?;
        println!("csv: {}", csv_path.display());
    }
    Ok(())
}

fn render_plan(path: &Path) -> Result<(), CliError> {
    let text = read(path)?;
    let report: PlanReport = serde_json::from_str(&text)
        .map_err(|e| CliError::data(STAGE, format!("{}: {e}", path.display())))?;
    println!(
        "alignment plan: {} tokens ({} overlap, {} semantic, {} weighted, {} unresolved)",
        report.target_vocab,
        report.counts.overlap,
        report.counts.semantic,
        report.counts.weighted,
        report.counts.unresolved
    );
    for phase in [Phase::Semantic, Phase::Weighted, Phase::Unresolved] {
        let rows: Vec<_> = report.tokens.iter().filter(|t| t.phase == phase).collect();
        if rows.is_empty() {
            continue;
        }
        println!("\n{phase:?} ({}):", rows.len());
        for token in rows.iter().take(10) {
            match phase {
                Phase::Semantic => println!(
                    "  {:<20} <- {}",
                    token.token,
                    token.source_token.as_deref().unwrap_or("?")
                ),
                Phase::Weighted => {
                    let mut by_weight: Vec<_> = token.anchors.iter().collect();
                    by_weight.sort_by(|a, b| {
                        b.weight.partial_cmp(&a.weight).unwrap_or(std::cmp::Ordering::Equal)
                    });
                    let shown: Vec<String> = by_weight
                        .iter()
                        .take(6)
                        .map(|a| format!("{} ({:.3})", a.token, a.weight))
                        .collect();
                    let rest = token.anchors.len().saturating_sub(6);
                    let suffix = if rest > 0 {
                        format!(" (+{rest} more)")
                    } else {
                        String::new()
                    };
                    println!("  {:<20} <- {}{}", token.token, shown.join(", "), suffix);
                }
                _ => println!("  {}", token.token),
            }
        }
        if rows.len() > 10 {
            println!("  ... and {} more", rows.len() - 10);
        }
    }
    Ok(())
}

fn render_fusion(path: &Path) -> Result<(), CliError> {
    let text = read(path)?;
    let report: FusionReport = serde_json::from_str(&text)
        .map_err(|e| CliError::data(STAGE, format!("{}: {e}", path.display())))?;
    println!("fusion for target {:?}", report.target);
    println!("{:<14} {:>12} {:>14} {:>10}", "source", "mean L2", "inverse", "weight");
    for (i, lang) in report.sources.iter().enumerate() {
        println!(
            "{:<14} {:>12.6} {:>14.6} {:>10.6}",
            lang, report.raw_l2[i], report.distances[i], report.weights[i]
        );
    }
    println!("ranking: {}", report.ranking.join(" > "));
    Ok(())
}
