//! Command-line driver: corpus synthesis, benchmark subsampling, training,
//! generation, evaluation and the full Base/AlignNet benchmark loop.

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use alignnet::aligner::AlignmentRecord;
use alignnet::corpus::{
    generate_synthetic, load_embeddings, read_corpus_file, subsample_benchmark, write_corpus_file, write_embeddings,
    Benchmark, EmbeddingTable, Table,
};
use alignnet::evaluator::{evaluate, write_bucket_csv, BucketStat, EvalReport};
use alignnet::pipeline::SupportPool;
use alignnet::trainer::{train, write_curve_csv, Checkpoint, TrainConfig};
use clap::{Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

pub use config::{load_config, Flags, RunConfig, OUT_DIR_ENV};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] alignnet::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Runtime(alignnet::Error::Config(_)) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "alignnet", version, about = "Table-to-text generation with schema alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic unseen-schema corpus and its embeddings.
    Synth(Flags),
    /// Sample training subsets with mostly unseen dev/test attributes.
    Subsample(Flags),
    /// Train one model and keep the best dev checkpoint.
    Train(Flags),
    /// Generate text for a split with a checkpoint.
    Generate(Flags),
    /// Score a checkpoint on a split.
    Eval(Flags),
    /// Train and evaluate Base and AlignNet on every benchmark subset.
    Bench(Flags),
}

/// Runs the command line and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return 0;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            eprintln!("{first}");
            return 1;
        }
    };
    match dispatch(cli.command) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            0
        }
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            e.exit_code()
        }
    }
}

fn dispatch(command: Command) -> Result<serde_json::Value> {
    let (name, flags) = match &command {
        Command::Synth(f) => ("synth", f),
        Command::Subsample(f) => ("subsample", f),
        Command::Train(f) => ("train", f),
        Command::Generate(f) => ("generate", f),
        Command::Eval(f) => ("eval", f),
        Command::Bench(f) => ("bench", f),
    };
    let cfg = load_config(flags)?;
    let summary = match command {
        Command::Synth(_) => synth(&cfg)?,
        Command::Subsample(_) => subsample(&cfg)?,
        Command::Train(_) => train_cmd(&cfg)?,
        Command::Generate(_) => generate_cmd(&cfg)?,
        Command::Eval(_) => eval_cmd(&cfg)?,
        Command::Bench(_) => bench(&cfg)?,
    };
    write_json(&cfg.out_dir.join(format!("{name}.summary.json")), &summary)?;
    Ok(summary)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::Runtime(e.into()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(alignnet::Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Runtime(e.into()))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> alignnet::Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    std::fs::write(path, buf).map_err(|e| CliError::Runtime(e.into()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Runtime(e.into()))?;
    serde_json::from_str(&text).map_err(|e| CliError::Runtime(e.into()))
}

fn load_embedding_file(cfg: &RunConfig) -> Result<EmbeddingTable> {
    let path = cfg.embeddings_path()?;
    let file = std::fs::File::open(&path).map_err(|e| CliError::Runtime(e.into()))?;
    Ok(load_embeddings(std::io::BufReader::new(file), cfg.model.embedding_dim)?)
}

fn synth(cfg: &RunConfig) -> Result<serde_json::Value> {
    let corpus = generate_synthetic(&cfg.synth, cfg.seed)?;
    let dir = &cfg.out_dir;
    create_dir(dir)?;
    write_corpus_file(&dir.join("train.jsonl"), &corpus.train)?;
    write_corpus_file(&dir.join("dev.jsonl"), &corpus.dev)?;
    write_corpus_file(&dir.join("test.jsonl"), &corpus.test)?;
    write_with(&dir.join("embeddings.txt"), |w| write_embeddings(w, &corpus.embeddings))?;
    write_json(
        &dir.join("synth.json"),
        &json!({ "config": cfg.synth, "seed": cfg.seed, "clusters": corpus.clusters, "combinations": corpus.combinations }),
    )?;
    Ok(json!({
        "subcommand": "synth",
        "seed": cfg.seed,
        "train": corpus.train.len(),
        "dev": corpus.dev.len(),
        "test": corpus.test.len(),
        "embeddings": corpus.embeddings.len(),
        "embedding_fingerprint": format!("{:016x}", corpus.embeddings.fingerprint()),
    }))
}

fn load_splits(cfg: &RunConfig) -> Result<(Vec<Table>, Vec<Table>, Vec<Table>)> {
    Ok((
        read_corpus_file(&cfg.train_path()?)?,
        read_corpus_file(&cfg.dev_path()?)?,
        read_corpus_file(&cfg.test_path()?)?,
    ))
}

fn subsample(cfg: &RunConfig) -> Result<serde_json::Value> {
    let (train, dev, test) = load_splits(cfg)?;
    let bench = subsample_benchmark(&train, &dev, &test, &cfg.benchmark_config())?;
    let path = cfg.out_dir.join("manifest.json");
    write_json(&path, &bench)?;
    Ok(json!({
        "subcommand": "subsample",
        "manifest": path,
        "subsets": bench.subsets.iter().map(|s| json!({
            "size": s.size,
            "replicate": s.replicate,
            "unseen": s.unseen,
            "unseen_dev": s.unseen_dev,
            "unseen_test": s.unseen_test,
            "tries": s.tries,
        })).collect::<Vec<_>>(),
    }))
}

/// The training tables: a manifest subset when `size` is set, else the whole train file.
fn training_tables(cfg: &RunConfig, pool: &[Table]) -> Result<Vec<Table>> {
    let Some(size) = cfg.size else {
        return Ok(pool.to_vec());
    };
    let manifest = cfg
        .manifest
        .clone()
        .ok_or_else(|| CliError::Config("`size` needs a `manifest`".into()))?;
    let bench: Benchmark = read_json(&config_path(manifest)?)?;
    let subset = bench
        .subset(size, cfg.replicate)
        .ok_or_else(|| CliError::Config(format!("manifest has no subset of size {size}, replicate {}", cfg.replicate)))?;
    select(pool, &subset.ids)
}

fn config_path(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::Config(format!("{} does not exist", path.display())))
    }
}

fn select(pool: &[Table], ids: &[String]) -> Result<Vec<Table>> {
    ids.iter()
        .map(|id| {
            pool.iter()
                .find(|t| &t.id == id)
                .cloned()
                .ok_or_else(|| CliError::Config(format!("training table `{id}` is not in the train file")))
        })
        .collect()
}

fn train_cmd(cfg: &RunConfig) -> Result<serde_json::Value> {
    let pool = read_corpus_file(&cfg.train_path()?)?;
    let dev = read_corpus_file(&cfg.dev_path()?)?;
    let embeddings = load_embedding_file(cfg)?;
    let tables = training_tables(cfg, &pool)?;
    let outcome = train(&tables, &dev, &embeddings, &cfg.train_config())?;
    create_dir(&cfg.out_dir)?;
    let ck_path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out_dir.join("checkpoint.json"));
    if let Some(parent) = ck_path.parent() {
        create_dir(parent)?;
    }
    outcome.best.save(&ck_path)?;
    write_with(&cfg.out_dir.join("curve.csv"), |w| write_curve_csv(w, &outcome.curve))?;
    Ok(json!({
        "subcommand": "train",
        "aligner": cfg.aligner,
        "train_size": tables.len(),
        "checkpoint": ck_path,
        "best_epoch": outcome.best.epoch,
        "best_dev_bleu4": outcome.best.dev_bleu4,
        "epochs": outcome.epochs,
    }))
}

/// Checkpoint, its training tables, the chosen split and the embeddings.
fn load_for_inference(cfg: &RunConfig) -> Result<(Checkpoint, Vec<Table>, Vec<Table>, EmbeddingTable)> {
    let checkpoint = Checkpoint::load(&cfg.checkpoint_path()?)?;
    let pool = read_corpus_file(&cfg.train_path()?)?;
    let tables = select(&pool, &checkpoint.train_ids)?;
    let split = read_corpus_file(&cfg.split_path()?)?;
    if split.is_empty() {
        return Err(CliError::Config(format!("split `{}` is empty", cfg.split)));
    }
    let embeddings = load_embedding_file(cfg)?;
    Ok((checkpoint, tables, split, embeddings))
}

fn generate_cmd(cfg: &RunConfig) -> Result<serde_json::Value> {
    let (checkpoint, tables, split, embeddings) = load_for_inference(cfg)?;
    let params = checkpoint.model()?;
    let pool = SupportPool::new(&tables, &embeddings)?;
    let inference = checkpoint.inference(&params, &embeddings, &pool, cfg.beam);
    create_dir(&cfg.out_dir)?;
    let mut text = Vec::new();
    let mut alignments = Vec::new();
    let mut aligned = 0;
    for (i, table) in split.iter().enumerate() {
        let prepared = inference.prepare(table, i)?;
        let words = alignnet::decoder::generate(&params, &checkpoint.vocab, table, &prepared.pairs, cfg.beam, checkpoint.config.max_len)?;
        writeln!(text, "{}\t{}", table.id, words.join(" ")).map_err(alignnet::Error::from)?;
        if let Some((k, alignment)) = &prepared.alignment {
            aligned += 1;
            let record = AlignmentRecord::new(table, &pool.tables[*k], alignment);
            serde_json::to_writer(&mut alignments, &record).map_err(alignnet::Error::from)?;
            alignments.push(b'\n');
        }
    }
    let out = cfg.out_dir.join(format!("generated.{}.txt", cfg.split));
    std::fs::write(&out, text).map_err(|e| CliError::Runtime(e.into()))?;
    let align_path = cfg.out_dir.join(format!("alignments.{}.jsonl", cfg.split));
    std::fs::write(&align_path, alignments).map_err(|e| CliError::Runtime(e.into()))?;
    Ok(json!({
        "subcommand": "generate",
        "split": cfg.split,
        "beam": cfg.beam,
        "instances": split.len(),
        "aligned": aligned,
        "output": out,
        "alignments": align_path,
    }))
}

fn eval_cmd(cfg: &RunConfig) -> Result<serde_json::Value> {
    let (checkpoint, tables, split, embeddings) = load_for_inference(cfg)?;
    let report = evaluate(&checkpoint, &tables, &split, &embeddings, cfg.beam)?;
    let report_path = cfg.out_dir.join(format!("report.{}.json", cfg.split));
    write_json(&report_path, &report)?;
    write_with(&cfg.out_dir.join(format!("buckets.{}.csv", cfg.split)), |w| write_bucket_csv(w, &report))?;
    Ok(json!({
        "subcommand": "eval",
        "split": cfg.split,
        "aligner": checkpoint.config.aligner,
        "beam": report.beam,
        "smoothing": report.smoothing,
        "corpus_bleu4": report.corpus_bleu,
        "buckets": report.buckets,
        "report": report_path,
    }))
}

#[derive(Serialize)]
struct BenchRun {
    size: usize,
    replicate: usize,
    variant: &'static str,
    seed: u64,
    best_epoch: usize,
    dev_bleu4: f64,
    test_bleu4: f64,
    buckets: Vec<BucketStat>,
}

/// Replicate `r` (counting from 1) offsets every configured seed by `r - 1`.
fn replicate_config(base: &TrainConfig, replicate: usize, aligner: bool) -> TrainConfig {
    let r = replicate.saturating_sub(1) as u64;
    TrainConfig {
        aligner,
        init_seed: base.init_seed + r,
        data_seed: base.data_seed + r,
        support_seed: base.support_seed + r,
        ..base.clone()
    }
}

fn bench(cfg: &RunConfig) -> Result<serde_json::Value> {
    let (pool, dev, test) = load_splits(cfg)?;
    let embeddings = load_embedding_file(cfg)?;
    let benchmark = subsample_benchmark(&pool, &dev, &test, &cfg.benchmark_config())?;
    write_json(&cfg.out_dir.join("manifest.json"), &benchmark)?;
    let base = cfg.train_config();
    let mut runs: Vec<BenchRun> = Vec::new();
    for subset in &benchmark.subsets {
        let tables = subset.cloned_tables(&pool);
        for (variant, aligner) in [("base", false), ("alignnet", true)] {
            let config = replicate_config(&base, subset.replicate, aligner);
            let outcome = train(&tables, &dev, &embeddings, &config)?;
            let report: EvalReport = evaluate(&outcome.best, &tables, &test, &embeddings, cfg.beam)?;
            let run = BenchRun {
                size: subset.size,
                replicate: subset.replicate,
                variant,
                seed: config.init_seed,
                best_epoch: outcome.best.epoch,
                dev_bleu4: outcome.best.dev_bleu4,
                test_bleu4: report.corpus_bleu,
                buckets: report.buckets,
            };
            let dir = cfg.out_dir.join("bench").join(format!("size{}", subset.size));
            write_json(&dir.join(format!("rep{}_{variant}.json", subset.replicate)), &run)?;
            runs.push(run);
        }
    }
    let mut sizes = Vec::new();
    for &size in &cfg.sizes {
        let mean = |variant: &str| {
            let scores: Vec<f64> = runs
                .iter()
                .filter(|r| r.size == size && r.variant == variant)
                .map(|r| r.test_bleu4)
                .collect();
            scores.iter().sum::<f64>() / scores.len() as f64
        };
        sizes.push(json!({
            "size": size,
            "replicates": cfg.replicates,
            "base_mean_bleu4": mean("base"),
            "alignnet_mean_bleu4": mean("alignnet"),
        }));
    }
    Ok(json!({
        "subcommand": "bench",
        "beam": cfg.beam,
        "sizes": sizes,
    }))
}
