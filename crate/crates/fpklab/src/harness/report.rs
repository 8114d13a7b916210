//! Human-readable summaries of finished runs. Rendering is a pure function
//! of the artifacts, so re-rendering is byte-idempotent.

use crate::error::{Error, Result};
use crate::harness::manifest::load_manifest;
use crate::harness::runner::RunReport;
use serde_json::json;
use std::path::Path;

/// Load a run directory and render its summary. Returns the text table and
/// the JSON summary; both are also written into the directory
/// (`summary.txt`, `summary.json`). The boolean is the overall pass flag.
pub fn render(dir: &Path) -> Result<(String, serde_json::Value, bool)> {
    let manifest = load_manifest(dir)?;
    let report_path = dir.join("report.json");
    let text = std::fs::read_to_string(&report_path).map_err(|e| Error::Config {
        field: "run_dir".into(),
        reason: format!("missing report at {}: {e}", report_path.display()),
    })?;
    let report: RunReport =
        serde_json::from_str(&text).map_err(|e| Error::Serialization(e.to_string()))?;

    let mut out = String::new();
    out.push_str(&format!("run       : {}\n", report.command));
    out.push_str(&format!("seed      : {}\n", manifest.seed));
    out.push_str(&format!("config    : {}\n", manifest.config_hash));
    out.push_str(&format!("artifacts : {}\n", manifest.files.len()));
    out.push('\n');
    if report.rows.is_empty() {
        out.push_str("(no checks selected)\n");
    } else {
        let width = report
            .rows
            .iter()
            .map(|r| r.name.len())
            .max()
            .unwrap_or(4)
            .max(5);
        out.push_str(&format!(
            "{:<width$}  {:>14}  {:>14}  result\n",
            "check", "value", "threshold"
        ));
        for row in &report.rows {
            let threshold = row
                .threshold
                .map(|t| format!("{t:>14.6e}"))
                .unwrap_or_else(|| format!("{:>14}", "-"));
            out.push_str(&format!(
                "{:<width$}  {:>14.6e}  {}  {}\n",
                row.name,
                row.value,
                threshold,
                if row.pass { "PASS" } else { "FAIL" }
            ));
        }
    }
    out.push('\n');
    out.push_str(&format!(
        "overall   : {}\n",
        if report.pass { "PASS" } else { "FAIL" }
    ));

    let summary = json!({
        "command": report.command,
        "config_hash": manifest.config_hash,
        "seed": manifest.seed,
        "pass": report.pass,
        "rows": report.rows,
    });
    std::fs::write(dir.join("summary.txt"), &out)?;
    let mut summary_text = serde_json::to_string_pretty(&summary)
        .map_err(|e| Error::Serialization(e.to_string()))?;
    summary_text.push('\n');
    std::fs::write(dir.join("summary.json"), summary_text)?;
    Ok((out, summary, report.pass))
}
