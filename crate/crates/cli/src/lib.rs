//! Command-line front end: config resolution, artifact writing and the run manifest.

mod commands;

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use emoflow::data::{load_dataset, AnnotationDataset};
use emoflow::error::ErrorCategory;
use emoflow::train::{apply_override, parse_override};
use emoflow::{Error, Result};

pub use commands::{CurveConfig, DiscretizeConfig, HybridConfig};

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.jsonl";
pub const SCHEMA_FILE: &str = "schema.json";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(name = "emoflow", version, about = "Personalized density models for subjective annotations")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// JSON config file merged over the command's defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for independent runs.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Drop test records whose annotator was seen in training.
    #[arg(long, global = true)]
    pub strict_user_split: bool,
    /// Dequantize training labels with uniform noise.
    #[arg(long, global = true)]
    pub dequantize: bool,
    /// Dotted-path override, e.g. `--set fit.lr=0.01`. Applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Directory holding annotations.jsonl, embeddings.jsonl and schema.json.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth,
    /// Train one model on one cross-validation round.
    Train(DataArgs),
    /// Cross-validate every cell over every seed.
    Experiment(DataArgs),
    /// Grid search per (flow, personalization) on validation NLL.
    Grid(DataArgs),
    /// Turn predicted densities into point predictions.
    Discretize(ModelArgs),
    /// Train deterministic and hybrid heads on density features.
    Hybrid(ModelArgs),
    /// Tabulate a one-dimensional density slice.
    Curves(ModelArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Train(_) => "train",
            Command::Experiment(_) => "experiment",
            Command::Grid(_) => "grid",
            Command::Discretize(_) => "discretize",
            Command::Hybrid(_) => "hybrid",
            Command::Curves(_) => "curves",
        }
    }
}

/// Written last; its presence means the run completed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub config: Value,
    pub seed: Option<u64>,
    pub artifacts: Vec<PathBuf>,
    pub tool_version: String,
    pub created_unix: u64,
}

/// 0 success, 2 config, 3 data, 4 numerical.
pub fn exit_code(e: &Error) -> i32 {
    match e.category() {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numerical => 4,
    }
}

pub fn run(cli: &Cli) -> Result<RunManifest> {
    if cli.global.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    std::fs::create_dir_all(&cli.global.out).map_err(|e| Error::Io(format!("{}: {e}", cli.global.out.display())))?;
    let mut out = Outputs::new(&cli.global.out);
    let (config, seed) = commands::dispatch(&cli.command, &cli.global, &mut out)?;
    let manifest = RunManifest {
        command: cli.command.name().into(),
        config_path: cli.global.config.clone(),
        config,
        seed,
        artifacts: out.written.clone(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        created_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    out.json(MANIFEST_FILE, &manifest)?;
    Ok(manifest)
}

/// Artifact writer that records every file it produces.
pub struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf(), written: Vec::new() }
    }

    pub fn write(&mut self, name: &str, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<PathBuf> {
        let path = self.dir.join(name);
        write_atomic(&path, f)?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<PathBuf> {
        let s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
        self.write(name, |w| Ok(writeln!(w, "{s}")?))
    }

    pub fn jsonl<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<PathBuf> {
        self.write(name, |w| {
            for r in rows {
                let s = serde_json::to_string(r).map_err(|e| Error::Io(e.to_string()))?;
                writeln!(w, "{s}")?;
            }
            Ok(())
        })
    }
}

/// Write to a temporary file in the target directory, then rename over `path`.
pub fn write_atomic(path: &Path, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        f(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).map_err(|e| Error::Io(format!("{}: {}", path.display(), e.error)))?;
    Ok(())
}

pub fn load_data_dir(dir: &Path) -> Result<AnnotationDataset> {
    load_dataset(&dir.join(ANNOTATIONS_FILE), &dir.join(EMBEDDINGS_FILE), &dir.join(SCHEMA_FILE))
}

/// Overlay `patch` onto `base`. Keys absent from a non-empty object in `base` are rejected.
pub fn merge_config(base: &mut Value, patch: Value, path: &str) -> Result<()> {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) if !b.is_empty() => {
            for (k, v) in p {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match b.get_mut(&k) {
                    Some(slot) => merge_config(slot, v, &key)?,
                    None => return Err(Error::Config(format!("unknown config key `{key}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

/// Defaults, then the config file, then flag-derived overrides, then `--set`.
pub fn resolve_config<T: Default + Serialize + DeserializeOwned>(
    file: Option<&Path>,
    flags: Vec<(&str, Value)>,
    sets: &[String],
) -> Result<(T, Value)> {
    let mut v = serde_json::to_value(T::default()).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(p) = file {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        let patch: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        merge_config(&mut v, patch, "")?;
    }
    for (k, val) in flags {
        apply_override(&mut v, k, val)?;
    }
    for s in sets {
        let (k, val) = parse_override(s)?;
        apply_override(&mut v, &k, val)?;
    }
    let cfg: T = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
    let snapshot = serde_json::to_value(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    Ok((cfg, snapshot))
}
