//! `manifest.json` written into every output directory.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct BuildInfo {
    pub version: &'static str,
    pub git_rev: &'static str,
    pub debug_assertions: bool,
}

impl BuildInfo {
    pub fn current() -> Self {
        Self {
            version: env!("CARGO_PKG_VERSION"),
            git_rev: env!("BEVLOCATE_GIT_REV"),
            debug_assertions: cfg!(debug_assertions),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// The full argument set, enough to rerun the command.
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub build: BuildInfo,
    /// Wall-clock seconds per stage.
    pub timings: BTreeMap<String, f64>,
    /// Files written, relative to the output directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: Option<u64>) -> Result<Self> {
        Ok(Self {
            command: command.into(),
            config: serde_json::to_value(config)?,
            seed,
            build: BuildInfo::current(),
            timings: BTreeMap::new(),
            outputs: Vec::new(),
        })
    }

    /// Runs `f`, recording its duration under `stage`.
    pub fn time<T>(&mut self, stage: &str, f: impl FnOnce() -> T) -> T {
        let t = Instant::now();
        let out = f();
        self.timings.insert(stage.into(), t.elapsed().as_secs_f64());
        out
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)
            .with_context(|| format!("writing {}", path.display()))
    }
}
