//! Self-describing output directories.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use vprior_core::trainer::ConfigMap;

/// Timestamped directory holding everything one invocation produced.
#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
}

pub const CONFIG_FILE: &str = "config.txt";
pub const VERSION_FILE: &str = "version.txt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const RESULTS_FILE: &str = "results.csv";

impl RunDir {
    /// Creates `<out>/<command>-<UTC timestamp>`, adding a numeric suffix if
    /// that name is taken.
    pub fn create(out: &Path, command: &str) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
        let base = format!("{command}-{stamp}");
        for n in 0.. {
            let name = if n == 0 { base.clone() } else { format!("{base}-{n}") };
            let path = out.join(name);
            match fs::create_dir(&path) {
                Ok(()) => return Ok(Self { path }),
                Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
                Err(e) => return Err(e).with_context(|| format!("creating {}", path.display())),
            }
        }
        unreachable!("unbounded suffix search")
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Writes the resolved configuration and a version stamp with the
    /// command line that produced the run.
    pub fn describe(&self, config: &ConfigMap, argv: &[String]) -> Result<()> {
        self.write(CONFIG_FILE, &config.to_text())?;
        let stamp = format!(
            "vprior {}\nconfig_hash {}\ncommand {}\n",
            env!("CARGO_PKG_VERSION"),
            config.hash(),
            argv.join(" ")
        );
        self.write(VERSION_FILE, &stamp)
    }

    pub fn write(&self, name: &str, contents: &str) -> Result<()> {
        let path = self.file(name);
        fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))
    }
}
