//! `manifest.json`: what a command ran with and what it wrote.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use rcdet::{Error, Result};
use serde::Serialize;

pub const MANIFEST_JSON: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: Option<u64>,
    pub started: String,
    pub finished: String,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
}

pub struct Run {
    command: String,
    argv: Vec<String>,
    started: SystemTime,
}

fn stamp(t: SystemTime) -> String {
    humantime::format_rfc3339_seconds(t).to_string()
}

impl Run {
    pub fn start(command: &str, argv: &[String]) -> Self {
        Self {
            command: command.to_string(),
            argv: argv.to_vec(),
            started: SystemTime::now(),
        }
    }

    /// Writes the manifest through a temporary file and rename.
    ///
    /// Fails if any listed output is missing.
    pub fn finish(
        self,
        dir: &Path,
        config: serde_json::Value,
        seed: Option<u64>,
        mut outputs: Vec<PathBuf>,
    ) -> Result<PathBuf> {
        outputs.sort();
        outputs.dedup();
        if let Some(missing) = outputs.iter().find(|p| !p.exists()) {
            let e = std::io::Error::new(
                std::io::ErrorKind::NotFound,
                "output listed in the manifest is missing",
            );
            return Err(Error::io(missing, e));
        }
        let m = RunManifest {
            command: self.command,
            argv: self.argv,
            config,
            seed,
            started: stamp(self.started),
            finished: stamp(SystemTime::now()),
            outputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(MANIFEST_JSON);
        let tmp = dir.join(format!("{MANIFEST_JSON}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(&m)?).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
