//! Command-line driver: run configuration with `--key.path=value` overrides,
//! the `run.json` manifest, and one function per command.

pub mod checkpoint;
mod commands;

use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, Parser, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiment::Strategy;
use crate::network::{ModelDims, Task};
use crate::serving::ExhibitionConfig;
use crate::training::TrainingConfig;
use crate::world::WorldConfig;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, CHECKPOINT_VERSION};
pub use commands::{run, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Generate,
    Train,
    Eval,
    GroupAnalysis,
    Ablation,
    Abtest,
    Refine,
    ServeBench,
    Gradcheck,
}

impl Command {
    pub fn as_str(self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::Train => "train",
            Command::Eval => "eval",
            Command::GroupAnalysis => "group-analysis",
            Command::Ablation => "ablation",
            Command::Abtest => "abtest",
            Command::Refine => "refine",
            Command::ServeBench => "serve-bench",
            Command::Gradcheck => "gradcheck",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantName {
    Basic,
    #[default]
    Multitask,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub variant: VariantName,
    /// Feature groups of the augmented variant; all schema groups when unset.
    /// For `ablation`, the groups to ablate.
    pub features: Option<Vec<String>>,
    pub dims: ModelDims,
}

/// Files a command reads and writes. Unset inputs default to files inside the
/// data directory, which itself defaults to the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub out: PathBuf,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub pages: Option<PathBuf>,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            out: PathBuf::from("out"),
            data: None,
            checkpoint: None,
            pages: None,
        }
    }
}

impl PathsSection {
    pub fn data_dir(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out.clone())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.data_dir().join(commands::CHECKPOINT_FILE))
    }

    pub fn pages_path(&self) -> PathBuf {
        self.pages.clone().unwrap_or_else(|| self.data_dir().join(commands::PAGES_FILE))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AbTreatment {
    /// Top-k SPs by the checkpointed model.
    #[default]
    Model,
    /// Top-k SPs by ground-truth attraction.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub strategy: Strategy,
    /// Share of the SF training split kept for training.
    pub main_fraction: f64,
    pub ab_impressions: usize,
    pub ab_treatment: AbTreatment,
    /// Pages written by `generate` for `refine`.
    pub pages: usize,
    pub ads_per_page: usize,
    pub bench_pages: usize,
    pub gradcheck_configs: usize,
    /// Tasks reported by `eval`; unset means main, plus aux when the model has
    /// an auxiliary head.
    pub eval_tasks: Option<Vec<Task>>,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            strategy: Strategy::Alternate,
            main_fraction: 1.0,
            ab_impressions: 200_000,
            ab_treatment: AbTreatment::Model,
            pages: 20,
            ads_per_page: 200,
            bench_pages: 200,
            gradcheck_configs: 20,
            eval_tasks: None,
        }
    }
}

/// The whole configuration of one command. The top-level `seed` is copied
/// into the world and training sections, so it is the only seed that matters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub training: TrainingConfig,
    pub model: ModelSection,
    pub exhibition: ExhibitionConfig,
    pub paths: PathsSection,
    pub experiment: ExperimentSection,
}

impl RunConfig {
    /// Deserializes a JSON document, reporting the offending key path.
    pub fn from_value(value: Value) -> Result<RunConfig> {
        let mut config: RunConfig = serde_path_to_error::deserialize(value).map_err(|e| Error::ConfigKey {
            key: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        config.world.seed = config.seed;
        config.training.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.training.validate()?;
        self.exhibition.validate()?;
        let m = self.experiment.main_fraction;
        if !(m > 0.0 && m <= 1.0) {
            return Err(Error::InvalidConfig("experiment.main_fraction must lie in (0, 1]".into()));
        }
        if self.model.features.is_some() && !matches!(self.model.variant, VariantName::Augmented) {
            return Err(Error::InvalidConfig("model.features requires variant augmented".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> Result<String> {
        let text = serde_json::to_string(self)?;
        Ok(hex::encode(Sha256::digest(text.as_bytes())))
    }
}

/// Sets `path` (dot separated) in `root`, creating objects on the way. The
/// value is parsed as JSON when possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, path: &str, raw: &str) -> Result<()> {
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::ConfigKey {
            key: path.to_owned(),
            message: "empty path segment".into(),
        });
    }
    let mut node = root;
    for (i, key) in keys.iter().enumerate() {
        let map = node.as_object_mut().ok_or_else(|| Error::ConfigKey {
            key: keys[..i].join("."),
            message: "not an object".into(),
        })?;
        if i + 1 == keys.len() {
            map.insert((*key).to_owned(), value);
            return Ok(());
        }
        node = map
            .entry((*key).to_owned())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("path has at least one segment")
}

#[derive(Debug, Parser)]
#[command(
    name = "attractsp",
    version,
    about = "Personalized selling-point prediction: synthetic data, training, evaluation and serving",
    after_help = "Any config key can be overridden with --section.key=value, e.g. --training.batch_size=128.\n\
                  Set ATTRACTSP_LOG=debug for verbose reports."
)]
pub struct Cli {
    pub command: Command,
    /// JSON run configuration; defaults apply to every missing key.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// basic | alternate | pretrain
    #[arg(long)]
    pub strategy: Option<String>,
    /// basic | multitask | augmented
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long, value_delimiter = ',')]
    pub features: Option<Vec<String>>,
    /// SPs shown per ad.
    #[arg(long)]
    pub k: Option<usize>,
    /// Display-character budget of a refined title.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, value_parser = ["on", "off"])]
    pub emphasis: Option<String>,
}

/// Splits `--a.b=value` overrides from the arguments clap understands.
pub fn split_overrides(args: &[String]) -> (Vec<String>, Vec<(String, String)>) {
    let mut plain = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        if let Some(rest) = a.strip_prefix("--") {
            if let Some((key, value)) = rest.split_once('=') {
                if key.contains('.') {
                    overrides.push((key.to_owned(), value.to_owned()));
                    continue;
                }
            }
        }
        plain.push(a.clone());
    }
    (plain, overrides)
}

/// Reads the config file (if any), then applies overrides and flags in that
/// order of increasing precedence.
pub fn resolve_config(cli: &Cli, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut root = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.clone(),
                line: e.line(),
                message: e.to_string(),
            })?
        }
        None => Value::Object(Default::default()),
    };
    for (key, value) in overrides {
        apply_override(&mut root, key, value)?;
    }
    let mut set = |key: &str, value: Value| apply_override(&mut root, key, &value.to_string());
    if let Some(s) = cli.seed {
        set("seed", s.into())?;
    }
    if let Some(o) = &cli.out {
        set("paths.out", o.to_string_lossy().into_owned().into())?;
    }
    if let Some(s) = &cli.strategy {
        set("experiment.strategy", s.clone().into())?;
    }
    if let Some(v) = &cli.variant {
        set("model.variant", v.clone().into())?;
    }
    if let Some(f) = &cli.features {
        set("model.features", f.clone().into())?;
    }
    if let Some(k) = cli.k {
        set("exhibition.k", k.into())?;
    }
    if let Some(b) = cli.budget {
        set("exhibition.budget", b.into())?;
    }
    if let Some(e) = &cli.emphasis {
        set("exhibition.emphasis", (e == "on").into())?;
    }
    RunConfig::from_value(root)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

pub fn hash_file(path: &Path) -> Result<String> {
    let mut f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// One command invocation as recorded in `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub command: String,
    pub args: Vec<String>,
    pub config: RunConfig,
    pub config_hash: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<String>,
    pub versions: BTreeMap<String, String>,
}

/// `run.json`: the latest invocation of each command that wrote into the
/// directory.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub runs: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "run.json";

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Replaces any earlier entry for the same command.
    pub fn record(dir: &Path, entry: ManifestEntry) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut manifest = match Manifest::load(&path) {
            Ok(m) => m,
            Err(Error::Io { .. }) => Manifest::default(),
            Err(e) => {
                log::warn!("replacing unreadable manifest {}: {e}", path.display());
                Manifest::default()
            }
        };
        manifest.runs.retain(|r| r.command != entry.command);
        manifest.runs.push(entry);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn entry(&self, command: Command) -> Option<&ManifestEntry> {
        self.runs.iter().find(|r| r.command == command.as_str())
    }
}

/// Parses `args` (without the program name), runs the command and returns the
/// process exit status: 0 on success, 1 on failure, 2 on usage errors.
pub fn main_with_args(args: &[String]) -> i32 {
    let (plain, overrides) = split_overrides(args);
    let cli = match Cli::try_parse_from(std::iter::once("attractsp".to_owned()).chain(plain)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return e.exit_code();
        }
    };
    let config = match resolve_config(&cli, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match run(cli.command, &config, args) {
        Ok(outcome) if outcome.passed => 0,
        Ok(_) => 1,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn args(list: &[&str]) -> Vec<String> {
        list.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_from_flags() {
        let (plain, ov) = split_overrides(&args(&["train", "--seed=3", "--training.k=2", "--out", "x"]));
        assert_eq!(plain, args(&["train", "--seed=3", "--out", "x"]));
        assert_eq!(ov, vec![("training.k".to_owned(), "2".to_owned())]);
    }

    #[test]
    fn override_values_parse_as_json_or_string() {
        let mut root = json!({"training": {"k": 4}});
        apply_override(&mut root, "training.k", "2.5").unwrap();
        apply_override(&mut root, "paths.out", "some/dir").unwrap();
        apply_override(&mut root, "exhibition.emphasis", "false").unwrap();
        assert_eq!(root, json!({"training": {"k": 2.5}, "paths": {"out": "some/dir"}, "exhibition": {"emphasis": false}}));
        assert!(apply_override(&mut root, "training.k.x", "1").is_err());
        assert!(apply_override(&mut root, "a..b", "1").is_err());
    }

    #[test]
    fn unknown_keys_report_their_path() {
        let err = RunConfig::from_value(json!({"training": {"batch": 3}})).unwrap_err();
        match err {
            Error::ConfigKey { key, .. } => assert_eq!(key, "training.batch"),
            other => panic!("{other:?}"),
        }
        let err = RunConfig::from_value(json!({"world": {"n_users": "many"}})).unwrap_err();
        assert!(matches!(err, Error::ConfigKey { ref key, .. } if key == "world.n_users"), "{err}");
    }

    #[test]
    fn defaults_follow_the_reference_hyperparameters() {
        let c = RunConfig::from_value(json!({})).unwrap();
        assert_eq!(c.training.batch_size, 256);
        assert_eq!(c.training.learning_rate, 0.03);
        assert_eq!(c.training.k, 4.0);
        assert_eq!((c.training.max_epochs_aux, c.training.max_epochs_main), (6, 15));
        assert_eq!((c.training.sf_neg_ratio, c.training.ad_neg_ratio), (2, 6));
        assert_eq!(c.model.dims.keyword_dim, 50);
        assert_eq!(c.model.dims.feature_dim, 24);
        assert_eq!((c.model.dims.hidden1, c.model.dims.hidden2), (256, 256));
        assert_eq!((c.exhibition.k, c.exhibition.budget), (2, 28));
    }

    #[test]
    fn top_level_seed_reaches_every_section() {
        let c = RunConfig::from_value(json!({"seed": 11, "world": {"seed": 2}})).unwrap();
        assert_eq!((c.world.seed, c.training.seed), (11, 11));
    }

    #[test]
    fn flags_take_precedence_over_overrides() {
        let cli = Cli::try_parse_from(["attractsp", "train", "--k", "3", "--emphasis", "off", "--variant", "augmented", "--features", "profile,preference"]).unwrap();
        let c = resolve_config(&cli, &[("exhibition.k".into(), "1".into())]).unwrap();
        assert_eq!(c.exhibition.k, 3);
        assert!(!c.exhibition.emphasis);
        assert_eq!(c.model.variant, VariantName::Augmented);
        assert_eq!(c.model.features, Some(vec!["profile".to_owned(), "preference".to_owned()]));
    }

    #[test]
    fn bad_strategy_names_the_key() {
        let cli = Cli::try_parse_from(["attractsp", "train", "--strategy", "joint"]).unwrap();
        let err = resolve_config(&cli, &[]).unwrap_err();
        assert!(matches!(err, Error::ConfigKey { ref key, .. } if key == "experiment.strategy"), "{err}");
    }

    #[test]
    fn unknown_command_is_a_usage_error() {
        assert_eq!(main_with_args(&args(&["frobnicate"])), 2);
        assert_eq!(main_with_args(&args(&[])), 2);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.exhibition.budget = 20;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }
}
