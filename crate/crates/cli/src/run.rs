//! Run directories: every command writes its resolved configuration, the
//! tool version and its outputs under one directory.

use std::path::{Path, PathBuf};

use dyhgn_core::error::{Error, Result};
use dyhgn_core::io::write_json;
use serde::Serialize;

pub const CONFIG_FILE: &str = "config.json";
pub const TIMING_FILE: &str = "timing.json";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
}

#[derive(Serialize)]
struct Echo<'a, T> {
    version: &'a str,
    command: &'a str,
    config: &'a T,
}

impl RunDir {
    /// Uses `out`, or a fresh `runs/<timestamp>-<command>` directory.
    pub fn create(out: Option<&Path>, command: &str) -> Result<Self> {
        let path = match out {
            Some(p) => p.to_path_buf(),
            None => {
                let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
                let base = PathBuf::from("runs").join(format!("{stamp}-{command}"));
                let mut path = base.clone();
                let mut k = 2;
                while path.exists() {
                    path = PathBuf::from(format!("{}-{k}", base.display()));
                    k += 1;
                }
                path
            }
        };
        std::fs::create_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { path })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn join(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes `config.json` with the tool version and the resolved config.
    pub fn echo_config<T: Serialize>(&self, command: &str, config: &T) -> Result<()> {
        write_json(
            &self.join(CONFIG_FILE),
            &Echo {
                version: VERSION,
                command,
                config,
            },
        )
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        write_json(&self.join(name), value)
    }
}
