//! JSON report envelope shared by every subcommand.
//!
//! Reports go to stdout (and optionally a file via `--out`). Everything is
//! deterministic given the inputs except `timing`, which consumers should
//! strip before byte-comparing runs.

use std::path::Path;
use std::time::Duration;

use serde::Serialize;

#[derive(Serialize)]
pub struct Report<C: Serialize, R: Serialize> {
    pub version: &'static str,
    pub command: &'static str,
    pub config: C,
    pub results: R,
    pub warnings: Vec<String>,
    pub timing: Timing,
}

#[derive(Serialize)]
pub struct Timing {
    pub elapsed_ms: u128,
}

impl<C: Serialize, R: Serialize> Report<C, R> {
    pub fn new(
        command: &'static str,
        config: C,
        results: R,
        warnings: Vec<String>,
        elapsed: Duration,
    ) -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            results,
            warnings,
            timing: Timing {
                elapsed_ms: elapsed.as_millis(),
            },
        }
    }

    /// Pretty-prints the report to stdout and, if given, to `out`.
    pub fn emit(&self, out: Option<&Path>) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        print!("{text}");
        if let Some(path) = out {
            std::fs::write(path, &text)
                .map_err(|e| anyhow::anyhow!("cannot write report to {}: {e}", path.display()))?;
        }
        Ok(())
    }
}
