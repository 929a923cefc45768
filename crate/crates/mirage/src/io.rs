//! File formats and run plumbing: JSONL datasets and samples, JSON
//! checkpoints, run configuration, and evaluation reports.
//!
//! Datasets are one JSON object per line with a 3x3 `lattice` in
//! angstroms, an `N x 3` array of `frac_coords` in `[0, 1)`, positive
//! integer `atom_types`, and an optional `id`. Invalid lines are never
//! silently dropped: every rejection is returned with its line number
//! and reason. Sample output uses the same schema, so generated files
//! feed straight back into evaluation and training.
//!
//! Checkpoints are a single JSON document carrying a format version,
//! the config echo, the schedule tables, every parameter tensor with
//! its declared shape, and the full optimizer state. All floats ride
//! through JSON in shortest round-trip decimal form, so a load
//! reproduces every value bit for bit and a resumed run continues
//! exactly as an uninterrupted one would.

use crate::crystal::{Crystal, CrystalError};
use crate::engine::{Adam, EngineError, SampleOutcome, TrainConfig, Trainer};
use crate::eval::{atom_count_histogram, novelty, uniqueness, validity_screen};
use crate::linalg::Mat3;
use crate::net::{ModelConfig, ModelParams};
use crate::schedule::ScheduleConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Version tag of the checkpoint layout.
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path} is not valid JSON at line {line}, column {column} (byte {offset}): {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        column: usize,
        offset: usize,
        message: String,
    },
    #[error("{path} contains no valid records ({rejected} rejected)")]
    NoValidRecords { path: PathBuf, rejected: usize },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint tensor mismatch: {reason}")]
    TensorMismatch { reason: String },
    #[error("checkpoint schedule tables do not match the configuration they claim")]
    ScheduleDrift,
    #[error("parameters contain non-finite values; refusing to serialize")]
    NonFiniteState,
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// One dataset or sample line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub lattice: [[f64; 3]; 3],
    pub frac_coords: Vec<[f64; 3]>,
    pub atom_types: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
}

impl DatasetRecord {
    pub fn from_crystal(c: &Crystal, id: Option<String>) -> Self {
        DatasetRecord {
            lattice: c.lattice.0,
            frac_coords: c.frac_coords.clone(),
            atom_types: c.atom_types.clone(),
            id,
        }
    }

    pub fn into_crystal(self) -> Result<Crystal, CrystalError> {
        Crystal::new(Mat3(self.lattice), self.frac_coords, self.atom_types)
    }
}

/// A rejected input line: kept alongside the successes so bad data is
/// visible, never silently dropped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct RejectedLine {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

/// Parse result of one dataset file.
#[derive(Debug)]
pub struct LoadedDataset {
    pub crystals: Vec<Crystal>,
    pub rejected: Vec<RejectedLine>,
}

impl LoadedDataset {
    pub fn max_atoms(&self) -> usize {
        self.crystals.iter().map(|c| c.n_atoms()).max().unwrap_or(0)
    }
}

fn crystal_rejection(err: CrystalError) -> String {
    match err {
        CrystalError::MirageTypeInInput { atom } => {
            format!("mirage type in input (atom {atom})")
        }
        other => other.to_string(),
    }
}

/// Reads a JSONL dataset. Every line must parse to a valid crystal;
/// failures are logged with line number and reason. Zero valid records
/// is an error.
pub fn load_dataset(path: &Path) -> Result<LoadedDataset, IoError> {
    let file = fs::File::open(path).map_err(|source| IoError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut crystals = Vec::new();
    let mut rejected = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| IoError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let number = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<DatasetRecord>(&line) {
            Err(e) => rejected.push(RejectedLine {
                line: number,
                reason: format!("not a valid record: {e}"),
            }),
            Ok(record) => match record.into_crystal() {
                Err(e) => rejected.push(RejectedLine {
                    line: number,
                    reason: crystal_rejection(e),
                }),
                Ok(c) => crystals.push(c),
            },
        }
    }
    if crystals.is_empty() {
        return Err(IoError::NoValidRecords {
            path: path.to_path_buf(),
            rejected: rejected.len(),
        });
    }
    Ok(LoadedDataset { crystals, rejected })
}

/// Writes crystals as JSONL; `tag` prefixes the generated ids.
pub fn write_crystals(path: &Path, crystals: &[Crystal], tag: &str) -> Result<(), IoError> {
    let as_write = |source| IoError::Write {
        path: path.to_path_buf(),
        source,
    };
    let file = fs::File::create(path).map_err(as_write)?;
    let mut out = std::io::BufWriter::new(file);
    for (i, c) in crystals.iter().enumerate() {
        let record = DatasetRecord::from_crystal(c, Some(format!("{tag}-{i:06}")));
        let line = serde_json::to_string(&record).expect("record serialization cannot fail");
        writeln!(out, "{line}").map_err(as_write)?;
    }
    out.flush().map_err(as_write)
}

/// Companion metadata written next to a sample file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub requested: usize,
    pub produced: usize,
    pub discarded: usize,
    pub seed: u64,
}

/// `<file>.meta.json` next to a sample output path.
pub fn meta_path(sample_path: &Path) -> PathBuf {
    let mut name = sample_path.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    sample_path.with_file_name(name)
}

/// Writes samples plus their metadata sidecar.
pub fn write_samples(path: &Path, outcome: &SampleOutcome, seed: u64) -> Result<(), IoError> {
    write_crystals(path, &outcome.crystals, "sample")?;
    let meta = SampleMeta {
        requested: outcome.crystals.len() + outcome.discarded,
        produced: outcome.crystals.len(),
        discarded: outcome.discarded,
        seed,
    };
    let side = meta_path(path);
    fs::write(&side, serde_json::to_string_pretty(&meta).expect("meta serializes"))
        .map_err(|source| IoError::Write { path: side, source })
}

pub fn read_sample_meta(sample_path: &Path) -> Option<SampleMeta> {
    let side = meta_path(sample_path);
    let text = fs::read_to_string(side).ok()?;
    serde_json::from_str(&text).ok()
}

/// Full-file JSON parse with the error located by line, column, and
/// byte offset.
fn parse_json<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<T, IoError> {
    serde_json::from_str::<T>(text).map_err(|e| {
        let (line, column) = (e.line(), e.column());
        let offset = text
            .lines()
            .take(line.saturating_sub(1))
            .map(|l| l.len() + 1)
            .sum::<usize>()
            + column.saturating_sub(1);
        IoError::Parse {
            path: path.to_path_buf(),
            line,
            column,
            offset,
            message: e.to_string(),
        }
    })
}

/// One tensor with its declared shape, stored row-major.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Schedule tables echoed into the checkpoint for drift detection.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTables {
    pub beta: Vec<f64>,
    pub sigma: Vec<f64>,
    pub q_beta: Vec<f64>,
}

/// Optimizer state matching the tensor list one to one.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub count: u64,
    pub m: Vec<NamedTensor>,
    pub v: Vec<NamedTensor>,
}

/// Serialized training state.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub step: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleConfig,
    pub schedule_tables: ScheduleTables,
    pub tensors: Vec<NamedTensor>,
    pub adam: AdamState,
}

fn named_tensors(params: &ModelParams) -> Vec<NamedTensor> {
    params
        .tensors()
        .into_iter()
        .map(|(name, t)| NamedTensor {
            name,
            shape: [t.nrows(), t.ncols()],
            data: t.iter().cloned().collect(),
        })
        .collect()
}

fn schedule_tables(trainer: &Trainer) -> ScheduleTables {
    let t_max = trainer.schedule.t_max();
    ScheduleTables {
        beta: (1..=t_max).map(|t| trainer.schedule.beta(t)).collect(),
        sigma: (1..=t_max).map(|t| trainer.schedule.sigma(t)).collect(),
        q_beta: (1..=t_max).map(|t| trainer.schedule.q_beta(t)).collect(),
    }
}

impl Checkpoint {
    pub fn capture(trainer: &Trainer) -> Result<Self, IoError> {
        if !trainer.params.all_finite() {
            return Err(IoError::NonFiniteState);
        }
        let moments = |tensors: &[ndarray::Array2<f64>]| -> Vec<NamedTensor> {
            trainer
                .params
                .tensors()
                .iter()
                .zip(tensors)
                .map(|((name, _), t)| NamedTensor {
                    name: name.clone(),
                    shape: [t.nrows(), t.ncols()],
                    data: t.iter().cloned().collect(),
                })
                .collect()
        };
        // The slot count is stored resolved, so a checkpoint suffices
        // to sample from without the original dataset on hand.
        let mut train = trainer.config.clone();
        train.n_m = Some(trainer.n_m);
        Ok(Checkpoint {
            format_version: CHECKPOINT_VERSION,
            step: trainer.step,
            model: trainer.params.config,
            train,
            schedule: trainer.schedule_config,
            schedule_tables: schedule_tables(trainer),
            tensors: named_tensors(&trainer.params),
            adam: AdamState {
                count: trainer.opt.count,
                m: moments(&trainer.opt.m),
                v: moments(&trainer.opt.v),
            },
        })
    }

    /// Rebuilds the trainer. The schedule is rederived from the config
    /// echo and must reproduce the stored tables exactly.
    pub fn into_trainer(self, dataset_max_atoms: usize) -> Result<Trainer, IoError> {
        let mut seed_rng = ChaCha8Rng::seed_from_u64(0);
        let mut params =
            ModelParams::init(self.model, &mut seed_rng).map_err(EngineError::from)?;
        fill_tensors(&mut params, &self.tensors, "params")?;
        let mut opt = Adam::new(&params, self.train.learning_rate);
        opt.count = self.adam.count;
        fill_moments(&mut opt.m, &params, &self.adam.m, "adam.m")?;
        fill_moments(&mut opt.v, &params, &self.adam.v, "adam.v")?;
        let trainer = Trainer::resume(
            params,
            opt,
            self.train,
            self.schedule,
            dataset_max_atoms,
            self.step,
        )?;
        let fresh = schedule_tables(&trainer);
        if fresh != self.schedule_tables {
            return Err(IoError::ScheduleDrift);
        }
        Ok(trainer)
    }
}

fn fill_array(
    target: &mut ndarray::Array2<f64>,
    name: &str,
    stored: &NamedTensor,
    group: &str,
) -> Result<(), IoError> {
    if stored.name != name {
        return Err(IoError::TensorMismatch {
            reason: format!("{group}: expected tensor {name}, found {}", stored.name),
        });
    }
    let (rows, cols) = target.dim();
    if stored.shape != [rows, cols] || stored.data.len() != rows * cols {
        return Err(IoError::TensorMismatch {
            reason: format!(
                "{group}: tensor {name} has shape {:?} with {} values, expected [{rows}, {cols}]",
                stored.shape,
                stored.data.len(),
            ),
        });
    }
    for (slot, &value) in target.iter_mut().zip(&stored.data) {
        *slot = value;
    }
    Ok(())
}

fn fill_tensors(
    params: &mut ModelParams,
    stored: &[NamedTensor],
    group: &str,
) -> Result<(), IoError> {
    let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
    if stored.len() != names.len() {
        return Err(IoError::TensorMismatch {
            reason: format!(
                "{group}: {} tensors stored, model wants {}",
                stored.len(),
                names.len()
            ),
        });
    }
    for ((target, name), s) in params.tensors_mut().into_iter().zip(&names).zip(stored) {
        fill_array(target, name, s, group)?;
    }
    Ok(())
}

fn fill_moments(
    target: &mut [ndarray::Array2<f64>],
    params: &ModelParams,
    stored: &[NamedTensor],
    group: &str,
) -> Result<(), IoError> {
    let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
    if stored.len() != names.len() {
        return Err(IoError::TensorMismatch {
            reason: format!(
                "{group}: {} tensors stored, optimizer wants {}",
                stored.len(),
                names.len()
            ),
        });
    }
    for ((t, name), s) in target.iter_mut().zip(&names).zip(stored) {
        fill_array(t, name, s, group)?;
    }
    Ok(())
}

pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<(), IoError> {
    let checkpoint = Checkpoint::capture(trainer)?;
    let text = serde_json::to_string(&checkpoint).expect("checkpoint serializes");
    fs::write(path, text).map_err(|source| IoError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    let checkpoint: Checkpoint = parse_json(path, &text)?;
    if checkpoint.format_version != CHECKPOINT_VERSION {
        return Err(IoError::VersionMismatch {
            found: checkpoint.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(checkpoint)
}

/// Defaults for the `sample` run section.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SampleSection {
    pub num: usize,
    pub seed: u64,
}

impl Default for SampleSection {
    fn default() -> Self {
        SampleSection { num: 100, seed: 0 }
    }
}

/// Defaults for the `eval` run section.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Distance cutoff in angstroms.
    pub cutoff: f64,
    /// Distance quantization in angstroms.
    pub delta_d: f64,
    /// Validity screen threshold in angstroms.
    pub min_dist: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            cutoff: crate::eval::DEFAULT_CUTOFF,
            delta_d: crate::eval::DEFAULT_DELTA_D,
            min_dist: crate::eval::DEFAULT_MIN_DIST,
        }
    }
}

/// Whole-run configuration; every section falls back to defaults, so
/// `{}` is a valid file.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleSection,
    pub eval: EvalSection,
}

pub fn load_config(path: &Path) -> Result<RunConfig, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_json(path, &text)
}

/// Uniqueness and novelty report. Stability is never computed, so the
/// metric is labeled U&N.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub uniqueness: f64,
    pub novelty: f64,
    pub histogram: BTreeMap<usize, usize>,
    pub validity_rate: f64,
    pub discards: usize,
}

/// Computes the full report for a sample set against a reference set.
pub fn evaluate(
    samples: &[Crystal],
    reference: &[Crystal],
    section: &EvalSection,
    discards: usize,
) -> Result<EvalReport, crate::eval::EvalError> {
    let unique = uniqueness(samples, section.cutoff, section.delta_d)?;
    let novel = novelty(samples, reference, section.cutoff, section.delta_d)?;
    let mut valid = 0usize;
    for c in samples {
        if validity_screen(c, section.min_dist)? {
            valid += 1;
        }
    }
    Ok(EvalReport {
        metric: "U&N".to_string(),
        uniqueness: unique,
        novelty: novel,
        histogram: atom_count_histogram(samples),
        validity_rate: valid as f64 / samples.len() as f64,
        discards,
    })
}

/// Writes the JSON report plus a plain CSV histogram next to it
/// (`<report>.hist.csv`), rows sorted by atom count.
pub fn write_report(report: &EvalReport, path: &Path) -> Result<(), IoError> {
    let text = serde_json::to_string_pretty(report).expect("report serializes");
    fs::write(path, text).map_err(|source| IoError::Write {
        path: path.to_path_buf(),
        source,
    })?;
    let csv_path = path.with_extension("hist.csv");
    let mut csv = String::from("n_atoms,count\n");
    for (n, count) in &report.histogram {
        csv.push_str(&format!("{n},{count}\n"));
    }
    fs::write(&csv_path, csv).map_err(|source| IoError::Write {
        path: csv_path,
        source,
    })
}

/// Deterministic synthetic corpus: cubic cells with edge 4.0 to 5.5
/// angstroms, 2 to 8 atoms of 3 species at uniform positions.
pub fn synthetic_dataset(count: usize, seed: u64) -> Vec<Crystal> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let a = rng.random_range(4.0..5.5);
            let n = rng.random_range(2..=8);
            let coords = (0..n)
                .map(|_| [rng.random(), rng.random(), rng.random()])
                .collect();
            let types = (0..n).map(|_| rng.random_range(1..=3)).collect();
            Crystal::new(Mat3::cubic(a), coords, types).unwrap()
        })
        .collect()
}
