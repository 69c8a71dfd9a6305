use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;
use serde_json::{json, Value};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Common report envelope. Keys are emitted in sorted order and no
/// wall-clock or host data is recorded, so identical runs give identical bytes.
pub struct Report {
    command: &'static str,
    config: Value,
    seeds: BTreeMap<String, u64>,
    body: BTreeMap<String, Value>,
}

impl Report {
    pub fn new(command: &'static str, config: Value) -> Self {
        Self { command, config, seeds: BTreeMap::new(), body: BTreeMap::new() }
    }

    pub fn seed(mut self, name: &str, seed: u64) -> Self {
        self.seeds.insert(name.to_string(), seed);
        self
    }

    pub fn field(mut self, key: &str, value: impl Serialize) -> Self {
        self.body.insert(key.to_string(), serde_json::to_value(value).expect("serializable"));
        self
    }

    pub fn into_value(self) -> Value {
        let mut root = json!({
            "tool_version": TOOL_VERSION,
            "command": self.command,
            "config": self.config,
            "metric_variants": sidepth::metrics::metric_variants(),
            "seeds": self.seeds,
        });
        let obj = root.as_object_mut().expect("object");
        for (k, v) in self.body {
            obj.insert(k, v);
        }
        root
    }

    pub fn to_string_pretty(self) -> String {
        let mut s = serde_json::to_string_pretty(&self.into_value()).expect("serializable");
        s.push('\n');
        s
    }

    pub fn print(self) -> anyhow::Result<()> {
        let s = self.to_string_pretty();
        let mut out = std::io::stdout().lock();
        out.write_all(s.as_bytes())?;
        out.flush()?;
        Ok(())
    }
}

pub fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}
