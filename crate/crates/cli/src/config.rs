//! Run configuration: JSON file, then command-line flags on top.

use std::path::{Path, PathBuf};

use alignnet::corpus::{BenchmarkConfig, SynthConfig};
use alignnet::model::ModelConfig;
use alignnet::trainer::TrainConfig;
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Environment variable that replaces the configured output directory.
pub const OUT_DIR_ENV: &str = "ALIGNNET_OUT_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Directory holding `train.jsonl`, `dev.jsonl`, `test.jsonl` and `embeddings.txt`.
    pub corpus: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub embeddings: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Subset of the manifest to train on; replicates count from 1.
    pub size: Option<usize>,
    pub replicate: usize,
    /// `dev` or `test`.
    pub split: String,
    /// Seed for corpus synthesis and benchmark subsampling.
    pub seed: u64,
    pub synth: SynthConfig,
    pub sizes: Vec<usize>,
    pub replicates: usize,
    pub min_unseen: f64,
    pub max_tries: usize,
    pub beam: usize,
    pub lambda: f64,
    pub support_size: Option<usize>,
    pub epochs: usize,
    pub init_seed: u64,
    pub data_seed: u64,
    pub support_seed: u64,
    pub aligner: bool,
    pub normalize_score: bool,
    pub rho: f64,
    pub epsilon: f64,
    pub lr_scale: f64,
    pub clip_norm: f64,
    pub min_count: usize,
    pub max_len: usize,
    pub dev_beam: usize,
    pub model: ModelConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let b = BenchmarkConfig::default();
        RunConfig {
            corpus: None,
            train: None,
            dev: None,
            test: None,
            embeddings: None,
            checkpoint: None,
            manifest: None,
            out_dir: PathBuf::from("out"),
            size: None,
            replicate: 1,
            split: "test".into(),
            seed: 13,
            synth: SynthConfig::default(),
            sizes: b.sizes,
            replicates: b.replicates,
            min_unseen: b.min_unseen,
            max_tries: b.max_tries,
            beam: 5,
            lambda: t.lambda,
            support_size: t.support_size,
            epochs: t.epochs,
            init_seed: t.init_seed,
            data_seed: t.data_seed,
            support_seed: t.support_seed,
            aligner: t.aligner,
            normalize_score: t.normalize_score,
            rho: t.rho,
            epsilon: t.epsilon,
            lr_scale: t.lr_scale,
            clip_norm: t.clip_norm,
            min_count: t.min_count,
            max_len: t.max_len,
            dev_beam: t.dev_beam,
            model: t.model,
        }
    }
}

impl RunConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda: self.lambda,
            support_size: self.support_size,
            epochs: self.epochs,
            init_seed: self.init_seed,
            data_seed: self.data_seed,
            support_seed: self.support_seed,
            aligner: self.aligner,
            normalize_score: self.normalize_score,
            rho: self.rho,
            epsilon: self.epsilon,
            lr_scale: self.lr_scale,
            clip_norm: self.clip_norm,
            min_count: self.min_count,
            max_len: self.max_len,
            dev_beam: self.dev_beam,
            model: self.model.clone(),
        }
    }

    pub fn benchmark_config(&self) -> BenchmarkConfig {
        BenchmarkConfig {
            sizes: self.sizes.clone(),
            replicates: self.replicates,
            min_unseen: self.min_unseen,
            max_tries: self.max_tries,
            seed: self.seed,
        }
    }

    /// Explicit path, else `name` inside the corpus directory.
    fn corpus_file(&self, explicit: &Option<PathBuf>, name: &str, key: &str) -> Result<PathBuf, CliError> {
        let path = match (explicit, &self.corpus) {
            (Some(p), _) => p.clone(),
            (None, Some(dir)) => dir.join(name),
            (None, None) => return Err(CliError::Config(format!("`{key}` is required (or `corpus` directory)"))),
        };
        existing(path)
    }

    pub fn train_path(&self) -> Result<PathBuf, CliError> {
        self.corpus_file(&self.train, "train.jsonl", "train")
    }

    pub fn dev_path(&self) -> Result<PathBuf, CliError> {
        self.corpus_file(&self.dev, "dev.jsonl", "dev")
    }

    pub fn test_path(&self) -> Result<PathBuf, CliError> {
        self.corpus_file(&self.test, "test.jsonl", "test")
    }

    pub fn embeddings_path(&self) -> Result<PathBuf, CliError> {
        self.corpus_file(&self.embeddings, "embeddings.txt", "embeddings")
    }

    pub fn split_path(&self) -> Result<PathBuf, CliError> {
        match self.split.as_str() {
            "dev" => self.dev_path(),
            "test" => self.test_path(),
            other => Err(CliError::Config(format!("split must be `dev` or `test`, got `{other}`"))),
        }
    }

    pub fn checkpoint_path(&self) -> Result<PathBuf, CliError> {
        match &self.checkpoint {
            Some(p) => existing(p.clone()),
            None => existing(self.out_dir.join("checkpoint.json")),
        }
    }
}

fn existing(path: PathBuf) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Config(format!("{} does not exist", path.display())))
    }
}

/// Flags shared by every subcommand; each one overrides the config file.
#[derive(Args, Clone, Debug, Default)]
pub struct Flags {
    /// JSON config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory (also settable through ALIGNNET_OUT_DIR).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub dev: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub replicate: Option<usize>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub min_unseen: Option<f64>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub support_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub init_seed: Option<u64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long)]
    pub support_seed: Option<u64>,
    /// Train the Base model (no schema aligner).
    #[arg(long)]
    pub no_aligner: bool,
    #[arg(long)]
    pub normalize_score: bool,
    #[arg(long)]
    pub min_count: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub dev_beam: Option<usize>,
}

/// Reads the config file (if any), applies the environment and then the flags.
pub fn load_config(flags: &Flags) -> Result<RunConfig, CliError> {
    let mut cfg = match &flags.config {
        Some(path) => read_config_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(dir) = std::env::var_os(OUT_DIR_ENV).filter(|d| !d.is_empty()) {
        cfg.out_dir = PathBuf::from(dir);
    }
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = &flags.$field {
                cfg.$field = v.clone();
            })*
        };
    }
    macro_rules! set_some {
        ($($field:ident),*) => {
            $(if let Some(v) = &flags.$field {
                cfg.$field = Some(v.clone());
            })*
        };
    }
    set_some!(corpus, train, dev, test, embeddings, checkpoint, manifest, size, support_size);
    set!(replicate, split, seed, sizes, replicates, min_unseen, beam, lambda, epochs);
    set!(init_seed, data_seed, support_seed, min_count, max_len, dev_beam);
    if let Some(out) = &flags.out {
        cfg.out_dir = out.clone();
    }
    if flags.no_aligner {
        cfg.aligner = false;
    }
    if flags.normalize_score {
        cfg.normalize_score = true;
    }
    cfg.train_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
    if cfg.beam == 0 {
        return Err(CliError::Config("beam must be at least 1".into()));
    }
    Ok(cfg)
}

pub fn read_config_file(path: &Path) -> Result<RunConfig, CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
}
