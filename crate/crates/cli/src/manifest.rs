//! Content-hash manifests written next to every command's outputs.

use std::path::Path;

use adaptkit_core::data::sha256_hex;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::Result;

pub const MANIFEST_SCHEMA: &str = "adaptkit-manifest/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the manifest's directory.
    pub path: String,
    pub sha256: String,
    /// The hash skips wall-clock columns so reruns hash identically.
    pub timing_free: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub command: String,
    pub config_sha256: String,
    pub seed: u64,
    pub artifacts: Vec<Artifact>,
    /// Deterministic results of the command.
    pub metrics: Value,
}

impl Manifest {
    pub fn file_name(command: &str) -> String {
        format!("manifest-{command}.json")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| crate::error::runtime(format!("{}: {e}", path.display())))
    }
}

/// True for header names of columns that hold wall-clock measurements.
pub fn is_timing_column(name: &str) -> bool {
    name.contains("seconds")
}

/// `csv` without its wall-clock columns. Cells must not contain commas
/// inside the timing columns; the other columns are kept verbatim.
pub fn timing_free(csv: &str) -> String {
    let mut lines = csv.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let cols: Vec<&str> = header.split(',').collect();
    let drop: Vec<usize> = cols
        .iter()
        .enumerate()
        .filter(|(_, c)| is_timing_column(c))
        .map(|(i, _)| i)
        .collect();
    if drop.is_empty() {
        return csv.to_string();
    }
    let keep = |line: &str| -> String {
        let cells = split_csv(line);
        cells
            .iter()
            .enumerate()
            .filter(|(i, _)| !drop.contains(i))
            .map(|(_, c)| c.as_str())
            .collect::<Vec<_>>()
            .join(",")
    };
    let mut out = keep(header);
    out.push('\n');
    for line in lines {
        out.push_str(&keep(line));
        out.push('\n');
    }
    out
}

/// Splits one CSV line, keeping quoted cells (quotes included) intact.
pub fn split_csv(line: &str) -> Vec<String> {
    let mut cells = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    for c in line.chars() {
        match c {
            '"' => {
                quoted = !quoted;
                cur.push(c);
            }
            ',' if !quoted => cells.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    cells.push(cur);
    cells
}

/// Collects artifacts written into one directory.
pub struct ArtifactWriter<'a> {
    dir: &'a Path,
    pub artifacts: Vec<Artifact>,
}

impl<'a> ArtifactWriter<'a> {
    pub fn new(dir: &'a Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir,
            artifacts: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        std::fs::write(self.dir.join(name), bytes)?;
        self.artifacts.push(Artifact {
            path: name.to_string(),
            sha256: sha256_hex(bytes),
            timing_free: false,
        });
        Ok(())
    }

    /// Writes a CSV whose hash ignores its wall-clock columns.
    pub fn write_csv(&mut self, name: &str, csv: &str) -> Result<()> {
        std::fs::write(self.dir.join(name), csv)?;
        self.artifacts.push(Artifact {
            path: name.to_string(),
            sha256: sha256_hex(timing_free(csv).as_bytes()),
            timing_free: true,
        });
        Ok(())
    }

    pub fn finish(self, command: &str, config_toml: &str, seed: u64, metrics: Value) -> Result<Manifest> {
        let manifest = Manifest {
            schema: MANIFEST_SCHEMA.into(),
            command: command.into(),
            config_sha256: sha256_hex(config_toml.as_bytes()),
            seed,
            artifacts: self.artifacts,
            metrics,
        };
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        std::fs::write(self.dir.join(Manifest::file_name(command)), text + "\n")?;
        Ok(manifest)
    }
}
