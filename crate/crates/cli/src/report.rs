//! Cross-run comparison tables from metrics summaries.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};

use crate::metrics::{read_summary, Summary};

/// Loads summaries for report input paths; `.csv` paths resolve to their
/// JSON sidecars.
pub fn load_summaries(paths: &[PathBuf]) -> Result<Vec<Summary>> {
    if paths.is_empty() {
        bail!("report needs at least one metrics file");
    }
    paths
        .iter()
        .map(|p| {
            let json = if p.extension().and_then(|e| e.to_str()) == Some("csv") {
                p.with_extension("json")
            } else {
                p.clone()
            };
            read_summary(&json)
        })
        .collect()
}

fn fmt_value(v: f64) -> String {
    if v.is_nan() || v.is_infinite() {
        "-".into()
    } else {
        format!("{v}")
    }
}

/// Builds the comparison table, keyed by model and optimizer with one column
/// per distinct comparison key; runs that lack a key show `-`. Returns the
/// aligned text table and its CSV twin.
pub fn render(summaries: &[Summary]) -> (String, String) {
    let mut keys: Vec<String> = summaries.iter().map(|s| s.key.clone()).collect();
    keys.sort();
    keys.dedup();

    let mut header: Vec<String> = vec!["model".into(), "optimizer".into()];
    header.extend(keys.iter().cloned());
    header.extend(["accuracy".to_string(), "outcome".to_string(), "seeds".to_string()]);

    let mut rows: Vec<Vec<String>> = summaries
        .iter()
        .map(|s| {
            let mut row = vec![s.model.clone(), s.optimizer.clone()];
            for key in &keys {
                row.push(if *key == s.key { fmt_value(s.value) } else { "-".into() });
            }
            row.push(s.accuracy_pm());
            row.push(s.outcome.clone());
            row.push(s.seeds.len().to_string());
            row
        })
        .collect();
    rows.sort();

    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut text = String::new();
    let render_line = |cells: &[String], widths: &[usize]| -> String {
        let padded: Vec<String> = cells
            .iter()
            .zip(widths)
            .map(|(c, w)| format!("{c:<width$}", width = w))
            .collect();
        format!("{}\n", padded.join("  ").trim_end())
    };
    text.push_str(&render_line(&header, &widths));
    for row in &rows {
        text.push_str(&render_line(row, &widths));
    }

    let mut csv = String::new();
    csv.push_str(&header.join(","));
    csv.push('\n');
    for row in &rows {
        // The accuracy cell carries " ± "; quote cells containing commas or
        // spaces stay unquoted since neither appears in our fields.
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    (text, csv)
}

/// The `report` subcommand body.
pub fn emit_report(paths: &[PathBuf], out: Option<&Path>) -> Result<String> {
    let summaries = load_summaries(paths)?;
    let (text, csv) = render(&summaries);
    if let Some(path) = out {
        crate::metrics::write_atomic(path, csv.as_bytes())?;
    }
    Ok(text)
}
