//! Command-line front end: `gen-data`, `train`, `eval`, `profile-memory`.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 missing input,
//! 4 corrupt artifact, 1 anything else.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    by_split, corpus_stats, gen_activity_windows, gen_captions, gen_ecg_qa, gen_simulation, gen_sleep_epochs,
    gen_trend_qa, read_jsonl, write_jsonl, CorpusStats, Family, MultimodalPrompt, Split,
};
use crate::error::{Result, TslmError};
use crate::eval::profile::{grid_table, profile_config, profile_grid, GRID_L, GRID_N};
use crate::eval::{extract_answer, score_predictions, EvalResult};
use crate::model::{DecodeMode, ModelConfig, TslmModel, Variant};
use crate::train::{freeze_report, train_stage, OptimSettings};

/// Environment variable that overrides the output directory of every verb.
pub const OUT_ENV: &str = "TSLM_OUT";

#[derive(Debug, Parser)]
#[command(name = "tslm", version, about = "Time-series language models: data, training, evaluation, profiling")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with 80/10/10 splits.
    GenData(GenDataArgs),
    /// Run the training stages of a config file.
    Train(TrainArgs),
    /// Generate answers with a checkpoint and score them.
    Eval(EvalArgs),
    /// Peak training memory over the series-count by length grid.
    ProfileMemory(ProfileArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// trend, caption, har, sleep, ecg or simulation.
    pub family: Family,
    /// Number of samples (default 1000; 200 for simulation).
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Series per simulation sample.
    #[arg(long, default_value_t = 1)]
    pub num_series: usize,
    /// Points per simulation series.
    #[arg(long, default_value_t = 100)]
    pub length: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Class set to parse answers against; inferred from the corpus labels
    /// when omitted.
    #[arg(long)]
    pub family: Option<Family>,
    #[arg(long, default_value_t = 256)]
    pub max_new_tokens: usize,
    /// Score only the first `limit` samples of the split (0 means all).
    #[arg(long, default_value_t = 0)]
    pub limit: usize,
    /// Sampling temperature; 0 decodes greedily.
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[arg(long, value_delimiter = ',', default_value = "softprompt,flamingo")]
    pub variants: Vec<Variant>,
    /// Backbone presets: toy, base.
    #[arg(long, value_delimiter = ',', default_value = "toy,base")]
    pub backbones: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    pub lengths: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub series: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One training stage: its datasets and optimiser settings. Which
/// parameters train is fixed by the model variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    /// Corpus files (JSON lines with split tags). Relative paths resolve
    /// against the config file's directory.
    pub datasets: Vec<PathBuf>,
    #[serde(default)]
    pub optim: OptimSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Checkpoint whose backbone weights replace the fresh ones.
    #[serde(default)]
    pub backbone_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    pub stages: Vec<StageConfig>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| TslmError::Config(e.to_string()))?;
        if cfg.stages.is_empty() {
            return Err(TslmError::Config("at least one stage is required".into()));
        }
        for s in &cfg.stages {
            if s.datasets.is_empty() {
                return Err(TslmError::Config(format!("stage '{}' lists no datasets", s.name)));
            }
            s.optim.validate()?;
        }
        cfg.model.backbone.validate()?;
        Ok(cfg)
    }

    /// Make relative paths absolute against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for s in &mut self.stages {
            s.datasets.iter_mut().for_each(fix);
        }
        if let Some(p) = self.backbone_checkpoint.as_mut() {
            fix(p);
        }
        fix(&mut self.output_dir);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataHash {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageSummary {
    pub name: String,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub initial_val_loss: f64,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub config_sha256: String,
    pub data: Vec<DataHash>,
    pub stages: Vec<StageSummary>,
    pub final_val_loss: f64,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenDataManifest {
    pub family: Family,
    pub count: usize,
    pub seed: u64,
    pub num_series: usize,
    pub length: usize,
    pub sha256: String,
    pub stats: CorpusStats,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Prediction {
    pub index: usize,
    pub label: String,
    pub prediction: Option<String>,
    pub output: String,
}

/// Content hash in the style of git's SHA-256 object format:
/// `sha256("blob <len>\0" + bytes)`.
pub fn blob_sha256(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

pub fn exit_code(e: &TslmError) -> i32 {
    match e {
        TslmError::Config(_) | TslmError::Parse(_) => 2,
        TslmError::MissingInput(_) => 3,
        TslmError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => 3,
        TslmError::CorruptCheckpoint(_) => 4,
        _ => 1,
    }
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(TslmError::MissingInput(path.display().to_string()))
    }
}

/// `--out` beats the environment, which beats the config.
fn output_dir(flag: Option<&Path>, configured: &Path) -> PathBuf {
    match (flag, std::env::var_os(OUT_ENV)) {
        (Some(p), _) => p.to_path_buf(),
        (None, Some(env)) if !env.is_empty() => PathBuf::from(env),
        _ => configured.to_path_buf(),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// Parse `args` (program name first), run the command, return the exit
/// code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => cmd_gen_data(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
        Command::ProfileMemory(a) => cmd_profile(&a).map(|_| ()),
    }
}

pub fn generate_family(family: Family, count: usize, seed: u64, num_series: usize, length: usize) -> Result<Vec<MultimodalPrompt>> {
    match family {
        Family::Trend => gen_trend_qa(count, seed),
        Family::Caption => gen_captions(count, seed),
        Family::Har => gen_activity_windows(count, seed),
        Family::Sleep => gen_sleep_epochs(count, seed),
        Family::Ecg => gen_ecg_qa(count, seed),
        Family::Simulation => gen_simulation(num_series, length, count, seed),
    }
}

/// Writes `<family>.jsonl` and `<family>.stats.json`; returns the corpus
/// path.
pub fn cmd_gen_data(a: &GenDataArgs) -> Result<PathBuf> {
    let count = a.count.unwrap_or(if a.family == Family::Simulation { 200 } else { 1000 });
    let dir = output_dir(a.out.as_deref(), Path::new("."));
    std::fs::create_dir_all(&dir)?;
    let corpus = generate_family(a.family, count, a.seed, a.num_series, a.length)?;
    let path = dir.join(format!("{}.jsonl", a.family));
    write_jsonl(&path, &corpus)?;
    let manifest = GenDataManifest {
        family: a.family,
        count,
        seed: a.seed,
        num_series: a.num_series,
        length: a.length,
        sha256: blob_sha256(&std::fs::read(&path)?),
        stats: corpus_stats(a.family, &corpus),
    };
    write_json(&dir.join(format!("{}.stats.json", a.family)), &manifest)?;
    let parts: Vec<String> = manifest.stats.splits.iter().map(|(k, v)| format!("{k}={}", v.n)).collect();
    println!("{} samples -> {} ({})", corpus.len(), path.display(), parts.join(" "));
    Ok(path)
}

fn load_corpora(paths: &[PathBuf]) -> Result<Vec<MultimodalPrompt>> {
    let mut all = Vec::new();
    for p in paths {
        all.extend(read_jsonl(p)?);
    }
    Ok(all)
}

pub fn cmd_train(a: &TrainArgs) -> Result<RunManifest> {
    require(&a.config)?;
    let text = std::fs::read_to_string(&a.config)?;
    let mut cfg = RunConfig::from_toml(&text)?;
    cfg.resolve_paths(a.config.parent().unwrap_or(Path::new(".")));
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    cfg.output_dir = output_dir(a.out.as_deref(), &cfg.output_dir);
    let inputs: Vec<PathBuf> = cfg.stages.iter().flat_map(|s| s.datasets.iter().cloned()).chain(cfg.backbone_checkpoint.clone()).collect();
    for p in &inputs {
        require(p)?;
    }
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out)?;

    let model = TslmModel::new(cfg.model.clone(), cfg.seed)?;
    if let Some(p) = &cfg.backbone_checkpoint {
        let (src, _) = load_checkpoint(p)?;
        let n = model.load_backbone_from(&src)?;
        log::info!("loaded {n} backbone tensors from {}", p.display());
    }
    write_json(&out.join("freeze_report.json"), &freeze_report(&model))?;

    let mut data = Vec::new();
    for s in &cfg.stages {
        for p in &s.datasets {
            data.push(DataHash { path: p.clone(), sha256: blob_sha256(&std::fs::read(p)?) });
        }
    }
    let mut stages = Vec::new();
    let mut step = 0u64;
    for stage in &cfg.stages {
        let corpus = load_corpora(&stage.datasets)?;
        let (train, val) = (by_split(&corpus, Split::Train), by_split(&corpus, Split::Val));
        log::info!("stage {}: {} train / {} val samples", stage.name, train.len(), val.len());
        let report = train_stage(&model, &train, &val, &stage.optim, |e| {
            log::info!("stage {} epoch {}: train {:.4} val {:.4}", stage.name, e.epoch, e.train_loss, e.val_loss);
        })?;
        step += report.steps.len() as u64;
        report.write_metrics_csv(&out.join(format!("{}.metrics.csv", stage.name)))?;
        report.write_step_log(&out.join(format!("{}.steps.csv", stage.name)))?;
        let ckpt = out.join(format!("{}.ckpt", stage.name));
        save_checkpoint(&ckpt, &model, step)?;
        stages.push(StageSummary {
            name: stage.name.clone(),
            epochs_run: report.epochs.len(),
            best_epoch: report.best_epoch,
            initial_val_loss: report.initial_val_loss,
            best_val_loss: report.best_val_loss,
            stopped_early: report.stopped_early,
            checkpoint: ckpt,
        });
    }
    let last = stages.last().expect("at least one stage");
    let manifest = RunManifest {
        config_sha256: hex::encode(Sha256::digest(serde_json::to_vec(&cfg)?)),
        final_val_loss: last.best_val_loss,
        checkpoint: last.checkpoint.clone(),
        config: cfg,
        data,
        stages,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    println!("final val loss {:.4}, checkpoint {}", manifest.final_val_loss, manifest.checkpoint.display());
    Ok(manifest)
}

/// Classes of `family`, or the sorted distinct labels of `corpus`.
pub fn class_set(family: Option<Family>, corpus: &[MultimodalPrompt]) -> Vec<String> {
    match family {
        Some(f) if !f.classes().is_empty() => f.classes(),
        _ => {
            let mut c: Vec<String> = corpus.iter().map(|s| s.label.clone()).collect();
            c.sort();
            c.dedup();
            c
        }
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<EvalResult> {
    require(&a.checkpoint)?;
    require(&a.data)?;
    let split = match a.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(TslmError::Config(format!("unknown split '{other}'"))),
    };
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    let corpus = read_jsonl(&a.data)?;
    let classes = class_set(a.family, &corpus);
    let mut samples = by_split(&corpus, split);
    if a.limit > 0 {
        samples.truncate(a.limit);
    }
    let mode = if a.temperature > 0.0 {
        DecodeMode::Sampled { temperature: a.temperature, seed: a.seed }
    } else {
        DecodeMode::Greedy
    };
    let mut preds = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let output = model.generate(s, a.max_new_tokens, mode)?;
        let prediction = extract_answer(&output, &classes);
        preds.push(Prediction { index: i, label: s.label.clone(), prediction, output });
    }
    let labels: Vec<String> = preds.iter().map(|p| p.label.clone()).collect();
    let parsed: Vec<Option<String>> = preds.iter().map(|p| p.prediction.clone()).collect();
    let result = score_predictions(&parsed, &labels, &classes)?;

    let out = output_dir(a.out.as_deref(), a.checkpoint.parent().unwrap_or(Path::new(".")));
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join(format!("eval_{}.csv", split)), result.to_csv())?;
    let mut lines = String::new();
    for p in &preds {
        lines.push_str(&serde_json::to_string(p)?);
        lines.push('\n');
    }
    std::fs::write(out.join(format!("predictions_{}.jsonl", split)), lines)?;
    println!(
        "{} samples: macro-F1 {:.2}, accuracy {:.2}, unparseable {}",
        result.n_samples, result.macro_f1, result.accuracy, result.invalid_output_count
    );
    Ok(result)
}

pub fn cmd_profile(a: &ProfileArgs) -> Result<PathBuf> {
    let mut models = Vec::new();
    for b in &a.backbones {
        for &v in &a.variants {
            models.push((b.clone(), profile_config(v, b)?));
        }
    }
    let ls = a.lengths.clone().unwrap_or(GRID_L.to_vec());
    let ns = a.series.clone().unwrap_or(GRID_N.to_vec());
    let records = profile_grid(&models, &ls, &ns, a.seed)?;
    let out = output_dir(a.out.as_deref(), Path::new("."));
    std::fs::create_dir_all(&out)?;
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    let path = out.join("memory.jsonl");
    std::fs::write(&path, lines)?;
    let table = grid_table(&records);
    std::fs::write(out.join("memory_table.csv"), &table)?;
    print!("{table}");
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_sha256_format() {
        // `printf 'hello\n' | git hash-object --object-format=sha256 --stdin`
        assert_eq!(blob_sha256(b"hello\n"), "2cf8d83d9ee29543b34a87727421fdecb7e3f3a183d337639025de576db9ebb4");
    }

    #[test]
    fn unknown_family_is_a_usage_error() {
        assert_eq!(run(["tslm", "gen-data", "weather"]), 2);
        assert_eq!(run(["tslm", "frobnicate"]), 2);
    }

    #[test]
    fn run_config_rejects_unknown_fields_and_empty_stages() {
        let ok = "[[stages]]\nname = \"s1\"\ndatasets = [\"a.jsonl\"]\n";
        assert!(RunConfig::from_toml(ok).is_ok());
        assert!(matches!(RunConfig::from_toml("stages = []"), Err(TslmError::Config(_))));
        let bad = format!("{ok}colour = 1\n");
        assert!(matches!(RunConfig::from_toml(&bad), Err(TslmError::Config(_))));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let mut c = RunConfig::from_toml("[[stages]]\nname = \"s\"\ndatasets = [\"d/a.jsonl\", \"/abs.jsonl\"]\n").unwrap();
        c.resolve_paths(Path::new("/cfg"));
        assert_eq!(c.stages[0].datasets, vec![PathBuf::from("/cfg/d/a.jsonl"), PathBuf::from("/abs.jsonl")]);
        assert_eq!(c.output_dir, PathBuf::from("/cfg/runs"));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&TslmError::MissingInput("x".into())), 3);
        assert_eq!(exit_code(&TslmError::CorruptCheckpoint("x".into())), 4);
        assert_eq!(exit_code(&TslmError::Config("x".into())), 2);
        assert_eq!(exit_code(&TslmError::EmptyMask), 1);
    }
}
