use std::fs;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

/// Provenance block embedded in every JSON report.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub config: Value,
    /// Seed actually used, after any `LANDSCAPE_SEED` override.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub duration_secs: f64,
}

pub struct Run {
    command: String,
    config: Value,
    seed: Option<u64>,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started: Instant,
}

impl Run {
    pub fn start(command: &str, config: &impl Serialize) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config: serde_json::to_value(config)?,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(self) -> RunManifest {
        RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            duration_secs: self.started.elapsed().as_secs_f64(),
        }
    }
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    manifest: RunManifest,
    #[serde(flatten)]
    body: &'a T,
}

/// Writes `{manifest, ...body}` as pretty JSON to `out`, or to standard
/// output when `out` is `-`.
pub fn emit<T: Serialize>(mut run: Run, out: &str, body: &T) -> Result<()> {
    if out != "-" {
        run.output(Path::new(out));
    }
    let report = Report {
        manifest: run.finish(),
        body,
    };
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    if out == "-" {
        print!("{text}");
    } else {
        fs::write(out, text).with_context(|| format!("writing report to {out}"))?;
    }
    Ok(())
}
