//! Run manifest written at the top of every output file.

use chrono::{DateTime, SecondsFormat, Utc};
use sha2::{Digest, Sha256};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub presets: Vec<String>,
    /// `flag=value` pairs as given on the command line.
    pub overrides: Vec<String>,
    pub outputs: Vec<String>,
    pub version: String,
    /// SHA-256 over everything above except the outputs, plus the input
    /// file contents and the resolved configuration.
    pub input_hash: String,
    /// RFC 3339. Not part of the hash.
    pub timestamp: String,
}

impl RunManifest {
    pub fn new(
        command: &str,
        presets: Vec<String>,
        overrides: Vec<String>,
        inputs: &[&[u8]],
    ) -> Self {
        let mut h = Sha256::new();
        h.update(format!("echolab {TOOL_VERSION}\n{command}\n").as_bytes());
        for p in &presets {
            h.update(format!("preset {p}\n").as_bytes());
        }
        for o in &overrides {
            h.update(format!("override {o}\n").as_bytes());
        }
        for input in inputs {
            h.update((input.len() as u64).to_le_bytes());
            h.update(input);
        }
        let input_hash = h.finalize().iter().map(|b| format!("{b:02x}")).collect();
        Self {
            command: command.to_string(),
            presets,
            overrides,
            outputs: Vec::new(),
            version: TOOL_VERSION.to_string(),
            input_hash,
            timestamp: timestamp(),
        }
    }

    /// Header lines without comment markers.
    pub fn lines(&self) -> Vec<String> {
        let mut out = vec![
            format!("echolab {}", self.version),
            format!("command: {}", self.command),
        ];
        out.extend(self.presets.iter().map(|p| format!("preset: {p}")));
        out.extend(self.overrides.iter().map(|o| format!("override: {o}")));
        out.extend(self.outputs.iter().map(|o| format!("output: {o}")));
        out.push(format!("input_sha256: {}", self.input_hash));
        out.push(format!("timestamp: {}", self.timestamp));
        out
    }

    /// The header as `# ` comment lines for CSV files.
    pub fn csv_header(&self) -> String {
        self.lines().iter().map(|l| format!("# {l}\n")).collect()
    }
}

/// Current UTC time, or `SOURCE_DATE_EPOCH` when set, for reproducible files.
fn timestamp() -> String {
    let fixed = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse::<i64>().ok())
        .and_then(|secs| DateTime::<Utc>::from_timestamp(secs, 0));
    fixed
        .unwrap_or_else(Utc::now)
        .to_rfc3339_opts(SecondsFormat::Secs, true)
}
