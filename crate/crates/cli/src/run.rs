//! Run directories, manifests and categorized failures.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use stem_core::model::FORMAT_VERSION;

/// Process exit codes by failure category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Other = 1,
    Config = 3,
    Data = 4,
    Numeric = 5,
    Format = 6,
}

impl Category {
    pub fn code(self) -> i32 {
        self as i32
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Other => "error",
            Category::Config => "config error",
            Category::Data => "data error",
            Category::Numeric => "numeric error",
            Category::Format => "format error",
        }
    }
}

/// An error already assigned to a category.
#[derive(Debug)]
pub struct Categorized {
    pub category: Category,
    pub message: String,
}

impl fmt::Display for Categorized {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Categorized {}

pub fn config_error(message: impl Into<String>) -> anyhow::Error {
    Categorized {
        category: Category::Config,
        message: message.into(),
    }
    .into()
}

pub fn data_error(message: impl Into<String>) -> anyhow::Error {
    Categorized {
        category: Category::Data,
        message: message.into(),
    }
    .into()
}

/// Category of the first recognizable error in the chain.
pub fn categorize(err: &anyhow::Error) -> Category {
    use stem_core::Error as E;
    for cause in err.chain() {
        if let Some(c) = cause.downcast_ref::<Categorized>() {
            return c.category;
        }
        if let Some(e) = cause.downcast_ref::<E>() {
            return match e {
                E::Config(_) | E::Scheme(_) | E::Shape(_) | E::Index { .. } => Category::Config,
                E::Numeric(_) | E::Diverged { .. } => Category::Numeric,
                E::Format(_) => Category::Format,
                E::Io(_) | E::Degenerate(_) => Category::Data,
                E::Json(_) => Category::Format,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return Category::Data;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return Category::Config;
        }
    }
    Category::Other
}

/// Claims a new directory `<root>/<command>-<NNNN>` that did not exist before.
pub fn fresh_run_dir(root: &Path, command: &str) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(root)
        .map_err(|e| data_error(format!("creating {}: {e}", root.display())))?;
    for i in 0.. {
        let dir = root.join(format!("{command}-{i:04}"));
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(data_error(format!("creating {}: {e}", dir.display()))),
        }
    }
    unreachable!("run index space exhausted")
}

/// Everything needed to rerun a subcommand.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    /// Full argument vector of the invocation.
    pub argv: Vec<String>,
    /// Resolved settings after flag overrides.
    pub config: serde_json::Value,
    /// SHA-256 of the compact JSON of `config`.
    pub config_sha256: String,
    pub seed: u64,
    pub version: String,
    pub checkpoint_format: u32,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64) -> Self {
        let bytes = serde_json::to_vec(&config).expect("JSON value serializes");
        let hash = Sha256::digest(&bytes);
        Manifest {
            command: command.into(),
            argv: std::env::args().collect(),
            config_sha256: hash.iter().map(|b| format!("{b:02x}")).collect(),
            config,
            seed,
            version: env!("CARGO_PKG_VERSION").into(),
            checkpoint_format: FORMAT_VERSION,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }
}

/// Output directory plus the manifest describing it.
pub struct Run {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

impl Run {
    pub fn start(
        root: &Path,
        command: &str,
        config: serde_json::Value,
        seed: u64,
    ) -> anyhow::Result<Self> {
        Ok(Run {
            dir: fresh_run_dir(root, command)?,
            manifest: Manifest::new(command, config, seed),
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.manifest.inputs.push(path.display().to_string());
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Writes `contents` to `name` inside the run directory.
    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .map_err(|e| data_error(format!("creating {}: {e}", parent.display())))?;
        }
        fs::write(&path, contents)
            .map_err(|e| data_error(format!("writing {}: {e}", path.display())))?;
        self.record(name);
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> anyhow::Result<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn record(&mut self, name: &str) {
        if !self.manifest.outputs.iter().any(|o| o == name) {
            self.manifest.outputs.push(name.into());
        }
    }

    pub fn finish(mut self) -> anyhow::Result<PathBuf> {
        self.record("manifest.json");
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        let path = self.path("manifest.json");
        fs::write(&path, text)
            .map_err(|e| data_error(format!("writing {}: {e}", path.display())))?;
        Ok(self.dir)
    }
}
