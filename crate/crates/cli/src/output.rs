//! Experiment directories: `config.snapshot`, CSV tables and `summary.json`.

use std::fs;
use std::path::PathBuf;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::Config;

pub struct Experiment {
    pub dir: PathBuf,
    name: String,
    hash: String,
    seed: u64,
}

impl Experiment {
    /// Creates `<out>/<name>` and writes the resolved config into it.
    pub fn create(config: &Config, default_name: &str) -> Result<Self> {
        let name = config.name.clone().unwrap_or_else(|| default_name.to_string());
        let dir = config.out.join(&name);
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("config.snapshot"), config.to_toml()?)?;
        // naming, location and thread count do not change results
        let mut hashed = config.clone();
        hashed.out = PathBuf::new();
        hashed.threads = 0;
        hashed.name = None;
        Ok(Self {
            dir,
            name,
            hash: config_hash(&hashed.to_toml()?),
            seed: config.seed,
        })
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.dir.join(file)
    }

    pub fn csv(&self, file: &str) -> Result<csv::Writer<fs::File>> {
        let path = self.path(file);
        csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))
    }

    /// Writes serialisable rows as a CSV table with a header.
    pub fn write_rows<T: Serialize>(&self, file: &str, rows: &[T]) -> Result<()> {
        let mut w = self.csv(file)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn finish(&self, results: Value) -> Result<Value> {
        let summary = json!({
            "tool": "trackbench",
            "version": env!("CARGO_PKG_VERSION"),
            "experiment": self.name,
            "config_sha256": self.hash,
            "seed": self.seed,
            "results": results,
        });
        let text = serde_json::to_string_pretty(&summary)? + "\n";
        fs::write(self.path("summary.json"), text)?;
        Ok(summary)
    }
}

pub fn config_hash(snapshot: &str) -> String {
    Sha256::digest(snapshot.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
}
