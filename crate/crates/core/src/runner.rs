//! The batch pipeline behind the command-line tool: generate data, train,
//! evaluate, run the VCG baseline and aggregate reports.
//!
//! Layout under the output directory:
//!
//! ```text
//! data/train.bin  data/test.bin  data/manifest.json
//! train/checkpoint.bin  train/train_log.csv
//! eval/<method>_C<cap>.json  eval/<method>_C<cap>.csv  eval/hregnet_C<cap>.regret.json
//! report.csv
//! ```

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CheckpointError};
use crate::config::{ConfigError, ExperimentConfig};
use crate::data::{generate, read_dataset, write_dataset, Dataset, DatasetError};
use crate::eval::{self, EvalReport, RegretTable, CSV_HEADER};
use crate::model::ModelError;
use crate::network::NetworkError;
use crate::rng::substream;
use crate::train::{TrainError, TrainState, Trainer, LOG_HEADER};

#[derive(Debug, Error)]
pub enum RunError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl RunError {
    /// Process exit code: 1 usage, 2 data, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Usage(_) => 1,
            RunError::Data(_) => 2,
            RunError::Numerical(_) => 3,
        }
    }
}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Usage(e.to_string())
    }
}

impl From<TrainError> for RunError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite(_) | TrainError::Network(NetworkError::Engine(crate::engine::EngineError::NonFinite { .. })) => {
                RunError::Numerical(e.to_string())
            }
            TrainError::Config(_) => RunError::Usage(e.to_string()),
            TrainError::Network(_) => RunError::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for RunError {
    fn from(e: ModelError) -> Self {
        RunError::Data(e.to_string())
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Data(format!("{}: {e}", path.display()))
}

/// Paths of every artifact under one output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }
    pub fn train_data(&self) -> PathBuf {
        self.data_dir().join("train.bin")
    }
    pub fn test_data(&self) -> PathBuf {
        self.data_dir().join("test.bin")
    }
    pub fn manifest(&self) -> PathBuf {
        self.data_dir().join("manifest.json")
    }
    pub fn train_dir(&self) -> PathBuf {
        self.root.join("train")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.train_dir().join("checkpoint.bin")
    }
    pub fn train_log(&self) -> PathBuf {
        self.train_dir().join("train_log.csv")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn report_json(&self, method: &str, cap: usize) -> PathBuf {
        self.eval_dir().join(format!("{method}_C{cap}.json"))
    }
    pub fn report_csv(&self, method: &str, cap: usize) -> PathBuf {
        self.eval_dir().join(format!("{method}_C{cap}.csv"))
    }
    pub fn regret_table(&self, cap: usize) -> PathBuf {
        self.eval_dir().join(format!("hregnet_C{cap}.regret.json"))
    }
    pub fn summary(&self) -> PathBuf {
        self.root.join("report.csv")
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub seed: u64,
    pub setting: String,
    pub cap: usize,
    pub distribution: String,
    pub density: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub train_sha256: String,
    pub test_sha256: String,
}

pub fn cmd_gen(config: &ExperimentConfig, layout: &Layout, force: bool) -> Result<Manifest, RunError> {
    let setting = config.auction_setting()?;
    let spec = config.population()?;
    if layout.manifest().exists() && !force {
        return Err(RunError::Usage(format!("{} already exists; pass --force to overwrite", layout.manifest().display())));
    }
    let (n_train, n_test) = config.sample_counts();
    let mut encoded = Vec::new();
    for (name, count) in [("data/train", n_train), ("data/test", n_test)] {
        let samples = generate(&spec, count, &mut substream(config.seed, name));
        let mut buf = Vec::new();
        write_dataset(&mut buf, &Dataset { setting: setting.clone(), domain: config.domain(), samples })
            .map_err(|e| RunError::Data(e.to_string()))?;
        encoded.push(buf);
    }
    write_atomic(&layout.train_data(), &encoded[0])?;
    write_atomic(&layout.test_data(), &encoded[1])?;
    let manifest = Manifest {
        config_hash: config.data_hash(),
        seed: config.seed,
        setting: config.setting.clone(),
        cap: config.cap,
        distribution: config.distribution.clone(),
        density: config.density,
        train_count: n_train,
        test_count: n_test,
        train_sha256: sha256_hex(&encoded[0]),
        test_sha256: sha256_hex(&encoded[1]),
    };
    write_atomic(&layout.manifest(), &json_bytes(&manifest))?;
    info!("wrote {n_train} training and {n_test} test samples to {}", layout.data_dir().display());
    Ok(manifest)
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serializable");
    v.push(b'\n');
    v
}

fn load_manifest(config: &ExperimentConfig, layout: &Layout) -> Result<Manifest, RunError> {
    let path = layout.manifest();
    let text = fs::read(&path).map_err(|e| io_err(&path, format!("{e} (run `gen` first)")))?;
    let manifest: Manifest = serde_json::from_slice(&text).map_err(|e| io_err(&path, e))?;
    if manifest.config_hash != config.data_hash() {
        return Err(RunError::Data(format!(
            "dataset in {} was generated from a different configuration; regenerate with `gen --force`",
            layout.data_dir().display()
        )));
    }
    Ok(manifest)
}

fn load_dataset(path: &Path, expected_sha: &str) -> Result<Dataset, RunError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if sha256_hex(&bytes) != expected_sha {
        return Err(RunError::Data(format!("{}: content hash does not match the manifest", path.display())));
    }
    read_dataset(&mut bytes.as_slice()).map_err(|e: DatasetError| io_err(path, e))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, RunError> {
    let file = File::open(path).map_err(|e| io_err(path, format!("{e} (run `train` first)")))?;
    read_checkpoint(&mut BufReader::new(file)).map_err(|e: CheckpointError| io_err(path, e))
}

fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<(), RunError> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, ck).map_err(|e| io_err(path, e))?;
    write_atomic(path, &buf)
}

fn provenance(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash} seed={seed}\n")
}

/// Keeps only the log rows up to and including `iteration`.
fn truncate_log(path: &Path, iteration: u64, preamble: &str) -> Result<(), RunError> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut out = String::from(preamble);
    for line in text.lines().skip(2) {
        let it: u64 = line.split(',').next().and_then(|v| v.parse().ok()).unwrap_or(u64::MAX);
        if it <= iteration {
            out.push_str(line);
            out.push('\n');
        }
    }
    write_atomic(path, out.as_bytes())
}

/// Runs training to the configured iteration count and returns the final
/// checkpoint.
pub fn cmd_train(config: &ExperimentConfig, layout: &Layout, resume: bool, force: bool) -> Result<Checkpoint, RunError> {
    let setting = config.auction_setting()?;
    let train_cfg = config.train_config()?;
    let manifest = load_manifest(config, layout)?;
    let data = load_dataset(&layout.train_data(), &manifest.train_sha256)?;
    let hash = config.train_hash();
    let preamble = format!("{}{LOG_HEADER}\n", provenance(&hash, config.seed));

    let state = if layout.checkpoint().exists() && resume {
        let ck = load_checkpoint(&layout.checkpoint())?;
        if ck.config_hash != hash {
            return Err(RunError::Usage("checkpoint was produced by a different configuration; refusing to resume".into()));
        }
        truncate_log(&layout.train_log(), ck.state.iteration, &preamble)?;
        info!("resuming from iteration {}", ck.state.iteration);
        ck.state
    } else {
        if layout.checkpoint().exists() && !force {
            return Err(RunError::Usage(format!(
                "{} already exists; pass --resume to continue or --force to start over",
                layout.checkpoint().display()
            )));
        }
        write_atomic(&layout.train_log(), preamble.as_bytes())?;
        TrainState::initial(&setting, &train_cfg, config.seed)
    };

    let mut trainer = Trainer::new(train_cfg.clone(), &setting, &data.samples, config.domain(), state)?;
    let snapshot = |trainer: &Trainer| Checkpoint {
        setting: setting.clone(),
        config: train_cfg.clone(),
        config_hash: hash.clone(),
        state: trainer.state.clone(),
    };
    let log_path = layout.train_log();
    let mut log = BufWriter::new(fs::OpenOptions::new().append(true).open(&log_path).map_err(|e| io_err(&log_path, e))?);
    if trainer.state.iteration == 0 {
        save_checkpoint(&layout.checkpoint(), &snapshot(&trainer))?;
    }
    while trainer.state.iteration < config.iterations {
        let stats = trainer.step()?;
        writeln!(log, "{}", stats.csv_row()).map_err(|e| io_err(&log_path, e))?;
        if stats.iteration % 100 == 0 {
            info!(
                "iteration {}: loss {:.4} revenue {:.4} regret {:.5} rho {}",
                stats.iteration, stats.loss, stats.revenue, stats.regret, stats.rho
            );
        }
        if stats.iteration % config.checkpoint_every == 0 || stats.iteration == config.iterations {
            log.flush().map_err(|e| io_err(&log_path, e))?;
            save_checkpoint(&layout.checkpoint(), &snapshot(&trainer))?;
        }
    }
    log.flush().map_err(|e| io_err(&log_path, e))?;
    Ok(snapshot(&trainer))
}

/// Per-sample regret search results saved next to an evaluation report.
#[derive(Serialize, Deserialize)]
pub struct PersistedRegret {
    pub config_hash: String,
    pub seed: u64,
    pub table: RegretTable,
}

fn write_report(layout: &Layout, report: &EvalReport) -> Result<(), RunError> {
    write_atomic(&layout.report_json(&report.mechanism, report.cap), &json_bytes(report))?;
    let csv = format!("{}{CSV_HEADER}\n{}\n", provenance(&report.config_hash, report.seed), report.csv_row());
    write_atomic(&layout.report_csv(&report.mechanism, report.cap), csv.as_bytes())
}

/// Evaluates the trained checkpoint on the test set.
pub fn cmd_eval(config: &ExperimentConfig, layout: &Layout, resume: bool) -> Result<EvalReport, RunError> {
    let setting = config.auction_setting()?;
    let manifest = load_manifest(config, layout)?;
    let test = load_dataset(&layout.test_data(), &manifest.test_sha256)?;
    let ck = load_checkpoint(&layout.checkpoint())?;
    if ck.config_hash != config.train_hash() {
        return Err(RunError::Usage("checkpoint was produced by a different configuration".into()));
    }
    if ck.state.iteration < config.iterations {
        return Err(RunError::Usage(format!(
            "checkpoint is at iteration {} of {}; finish training first",
            ck.state.iteration, config.iterations
        )));
    }
    let params = &ck.state.params;
    let eval_cfg = config.eval_config();
    let hash = config.eval_hash();
    let table_path = layout.regret_table(config.cap);

    let upto = match eval_cfg.regret_samples {
        0 => test.samples.len(),
        n => n.min(test.samples.len()),
    };
    let mut table = RegretTable::default();
    if resume && table_path.exists() {
        let saved: PersistedRegret =
            serde_json::from_slice(&fs::read(&table_path).map_err(|e| io_err(&table_path, e))?).map_err(|e| io_err(&table_path, e))?;
        if saved.config_hash == hash && saved.seed == config.seed {
            info!("resuming regret search after {} samples", saved.table.len());
            table = saved.table;
        }
    }
    let persist = |t: &RegretTable| {
        let saved = PersistedRegret { config_hash: hash.clone(), seed: config.seed, table: t.clone() };
        if let Err(e) = write_atomic(&table_path, &serde_json::to_vec(&saved).expect("serializable")) {
            log::warn!("could not persist regret table: {e}");
        }
        info!("regret search: {}/{upto} samples", t.len());
    };
    let eval_seed = crate::rng::substream_seed(config.seed, "eval");
    eval::extend_learned_regret(params, &setting, &test.samples, &eval_cfg, config.domain(), eval_seed, &mut table, upto, persist)?;
    let outcomes = eval::learned_outcomes(params, &setting, &test.samples, eval_cfg.chunk_size)?;
    let mut report = EvalReport::build("hregnet", &setting, &test.samples, &outcomes, &table);
    report.config_hash = hash;
    report.seed = config.seed;
    write_report(layout, &report)?;
    Ok(report)
}

/// Evaluates the VCG baseline on the test set.
pub fn cmd_vcg(config: &ExperimentConfig, layout: &Layout) -> Result<EvalReport, RunError> {
    let setting = config.auction_setting()?;
    let manifest = load_manifest(config, layout)?;
    let test = load_dataset(&layout.test_data(), &manifest.test_sha256)?;
    let outcomes = eval::vcg_outcomes(&setting, &test.samples)?;
    let table = eval::vcg_regret(&setting, &test.samples, config.grid_points, config.domain())?;
    let mut report = EvalReport::build("vcg", &setting, &test.samples, &outcomes, &table);
    report.config_hash = config.vcg_hash();
    report.seed = config.seed;
    write_report(layout, &report)?;
    Ok(report)
}

/// Collects every report under `dir` (and `dir/eval`), one row per
/// (method, C), and writes `dir/report.csv`. Returns the table text.
pub fn cmd_report(dir: &Path) -> Result<String, RunError> {
    let mut files: Vec<PathBuf> = Vec::new();
    for d in [dir.to_path_buf(), dir.join("eval")] {
        if let Ok(entries) = fs::read_dir(&d) {
            for e in entries.flatten() {
                let p = e.path();
                let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if name.ends_with(".json") && !name.ends_with(".regret.json") {
                    files.push(p);
                }
            }
        }
    }
    files.sort();
    let mut rows: std::collections::BTreeMap<(String, usize), EvalReport> = std::collections::BTreeMap::new();
    for f in &files {
        let Ok(bytes) = fs::read(f) else { continue };
        let Ok(report) = serde_json::from_slice::<EvalReport>(&bytes) else { continue };
        rows.entry((report.mechanism.clone(), report.cap)).or_insert(report);
    }
    let mut sources = Sha256::new();
    let mut body = String::new();
    for r in rows.values() {
        sources.update(r.config_hash.as_bytes());
        let mut flags = Vec::new();
        if r.mechanism != "vcg" && r.regret_flagged() {
            flags.push("regret>0.001");
        }
        if r.ru.flagged() {
            flags.push("ru>=0.065");
        }
        body.push_str(&format!("{},{}\n", r.csv_row(), flags.join(";")));
    }
    let text = format!("# sources={}\n{CSV_HEADER},flag\n{body}", hex::encode(sources.finalize()));
    if dir.exists() {
        write_atomic(&dir.join("report.csv"), text.as_bytes())?;
    }
    Ok(text)
}
