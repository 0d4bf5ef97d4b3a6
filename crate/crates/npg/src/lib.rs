//! Experiment runner for `npg-core`: typed configs, named recipes, trace
//! files and a rayon-backed rollout provider.

pub mod config;
pub mod error;
pub mod io;
pub mod provider;
pub mod recipes;

use std::fs;
use std::path::Path;

use serde_json::json;

pub use config::{ExperimentConfig, RawConfig, Recipe};
pub use error::{CliError, CliResult};
pub use recipes::{run_recipe, Assertion, RecipeReport};

/// Writes `trace_<label>.csv`, `report.json` and `summary.txt` into `dir`.
pub fn write_artifacts(cfg: &ExperimentConfig, report: &RecipeReport, dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (label, trace) in &report.traces {
        let path = dir.join(format!("trace_{label}.csv"));
        let file = fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        io::write_trace_csv(trace, std::io::BufWriter::new(file))?;
    }
    let doc = json!({
        "config": cfg,
        "assertions": report.assertions,
        "notes": report.notes,
        "passed": report.passed(),
        "details": report.details,
        "traces": report
            .traces
            .iter()
            .map(|(label, t)| json!({"label": label, "trace": io::trace_json(t)}))
            .collect::<Vec<_>>(),
    });
    io::write_json(&dir.join("report.json"), &doc)?;
    let summary = dir.join("summary.txt");
    fs::write(&summary, report.summary_lines().join("\n") + "\n").map_err(|e| CliError::io(&summary, e))
}

/// Recipe names with one-line descriptions, one per line.
pub fn list_recipes() -> String {
    Recipe::ALL
        .iter()
        .map(|r| format!("{:<26} {}\n", r.name(), r.description()))
        .collect()
}
