use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use pointcaps::model::ModelConfig;
use serde_json::{json, Value};

pub const RUN_FILE: &str = "run.json";

pub fn build_id() -> String {
    let profile = if cfg!(debug_assertions) { "debug" } else { "release" };
    match option_env!("POINTCAPS_BUILD_ID") {
        Some(id) => format!("{}+{id}", env!("CARGO_PKG_VERSION")),
        None => format!("{}+{profile}", env!("CARGO_PKG_VERSION")),
    }
}

/// Writes `<dir>/run.json`. No timestamps, so identical invocations give
/// identical files.
pub fn write_run(dir: &Path, subcommand: &str, seed: u64, config: Option<&ModelConfig>, outputs: &[String]) -> Result<()> {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let record = json!({
        "tool": "pointcaps",
        "build": build_id(),
        "subcommand": subcommand,
        "argv": argv,
        "seed": seed,
        "config": config.map(|c| Value::String(c.to_text())).unwrap_or(Value::Null),
        "outputs": outputs,
    });
    let path = dir.join(RUN_FILE);
    let mut text = serde_json::to_string_pretty(&record)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
}

/// One machine-readable line: the subcommand followed by `key=value` pairs.
pub struct Summary {
    command: &'static str,
    fields: Vec<(&'static str, String)>,
}

impl Summary {
    pub fn new(command: &'static str) -> Self {
        Summary {
            command,
            fields: Vec::new(),
        }
    }

    pub fn field(mut self, key: &'static str, value: impl fmt::Display) -> Self {
        self.fields.push((key, value.to_string()));
        self
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.command)?;
        for (k, v) in &self.fields {
            write!(f, " {k}={v}")?;
        }
        Ok(())
    }
}
