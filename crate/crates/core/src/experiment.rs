//! Subcommand bodies: train, search, eval, enumerate, and the end-to-end run.
//!
//! Every artifact lands in `<output root>/seed-<seed>/` under a fixed name.
//! Apart from wall times and the training log, outputs depend only on the config.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::architecture::Architecture;
use crate::checkpoint::{write_atomic, Checkpoint, Dtype, FORMAT_VERSION};
use crate::config::{DataConfig, ExperimentConfig};
use crate::data::{self, CsvSchema, Dataset, Split};
use crate::error::{DataError, Error, Result};
use crate::oracle::{enumerate_all, MAX_CHOICES};
use crate::search::{self, report_line, run_search, score_architecture, summary_line, EvalSet};
use crate::supernet::SuperNet;
use crate::trainer::Trainer;

pub const CHECKPOINT_FILE: &str = "supernet.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const REPORT_FILE: &str = "search_report.jsonl";
pub const ARCHITECTURE_FILE: &str = "architecture.toml";
pub const ENUMERATION_FILE: &str = "enumeration.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const MANIFEST_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    /// `None` for [`Split::Full`], which is never materialized.
    pub fn get(&self, split: Split) -> Option<&Dataset> {
        match split {
            Split::Train => Some(&self.train),
            Split::Val => Some(&self.val),
            Split::Test => Some(&self.test),
            Split::Full => None,
        }
    }
}

/// Loads or generates the dataset and splits it under the global seed.
pub fn load_data(cfg: &ExperimentConfig) -> Result<Splits> {
    let full = match &cfg.data {
        DataConfig::Planted { .. } => data::generate_planted(&cfg.data.planted_spec(&cfg.space).expect("planted"))?,
        DataConfig::Csv { path, has_header, .. } => data::load_csv(
            path,
            &CsvSchema {
                input_shape: cfg.space.input_shape,
                num_classes: cfg.space.num_classes,
                has_header: *has_header,
            },
        )?,
        DataConfig::Idx { images, labels, .. } => data::load_idx(images, labels, cfg.space.num_classes)?,
    };
    if full.input_shape() != cfg.space.input_shape {
        return Err(DataError::Invalid(format!(
            "dataset examples have shape {:?} but the search space expects {:?}",
            full.input_shape(),
            cfg.space.input_shape
        ))
        .into());
    }
    let (train, val, test) = data::split(&full, cfg.data.fractions(), cfg.split_seed())?;
    Ok(Splits { train, val, test })
}

fn prepare_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

/// Loads a checkpoint and checks it belongs to the configured search space.
pub fn load_snapshot(cfg: &ExperimentConfig, path: &Path) -> Result<SuperNet> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.spec != cfg.space {
        return Err(Error::Checkpoint(format!(
            "{} was trained on a different search space than the config describes",
            path.display()
        )));
    }
    ckpt.to_net()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub examples: usize,
    pub accuracy: f64,
    pub loss: f64,
    pub param_count: usize,
}

fn metrics(net: &SuperNet, arch: &Architecture, data: &Dataset) -> Result<Metrics> {
    let (accuracy, loss) = score_architecture(net, arch, &EvalSet::new(data)?)?;
    Ok(Metrics {
        examples: data.len(),
        accuracy,
        loss,
        param_count: arch.param_count(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub converged: bool,
    pub expected_param_count: f64,
    pub mean_keep_per_layer: Vec<f64>,
    /// Full super-network on the validation split.
    pub val: Metrics,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<(TrainSummary, PathBuf)> {
    let dir = cfg.run_dir();
    prepare_dir(&dir)?;
    let splits = load_data(cfg)?;
    let net = SuperNet::build(&cfg.space, cfg.init_seed(), &cfg.init)?;
    let ckpt_dir = dir.join("checkpoints");
    if cfg.train.checkpoint_every > 0 {
        prepare_dir(&ckpt_dir)?;
    }
    let out = Trainer::new(net, &cfg.resolved_train(), &cfg.prior, splits.train.len())?
        .run(&splits.train, Some(&ckpt_dir))?;
    out.log.write(&dir.join(TRAIN_LOG_FILE))?;
    let mut ckpt = Checkpoint::from_net(&out.net);
    ckpt.meta.insert("steps".into(), out.steps.to_string());
    ckpt.meta.insert("config_digest".into(), cfg.digest());
    let path = dir.join(CHECKPOINT_FILE);
    ckpt.save(&path, Dtype::F64)?;
    let summary = TrainSummary {
        steps: out.steps,
        converged: out.converged,
        expected_param_count: out.net.expected_param_count(),
        mean_keep_per_layer: out.net.mean_keep_per_layer(),
        val: metrics(&out.net, &Architecture::full(out.net.layout()), &splits.val)?,
    };
    Ok((summary, path))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub candidates: usize,
    pub best_index: usize,
    pub architecture_digest: String,
    pub val: Metrics,
    pub dropped_channel_fraction: f64,
    pub dropped_operation_fraction: f64,
}

/// Searches the checkpoint and writes the report and the winning architecture.
pub fn cmd_search(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<SearchSummary> {
    let dir = cfg.run_dir();
    prepare_dir(&dir)?;
    let net = load_snapshot(cfg, checkpoint)?;
    let splits = load_data(cfg)?;
    let out = run_search(&net, &splits.val, &cfg.resolved_search())?;
    let best = out.best_report();
    search::export_search_report(&dir.join(REPORT_FILE), &out.reports, best)?;
    write_atomic(&dir.join(ARCHITECTURE_FILE), best.architecture.to_toml().as_bytes())?;
    Ok(SearchSummary {
        candidates: out.reports.len(),
        best_index: best.index,
        architecture_digest: best.architecture.digest(),
        val: Metrics {
            examples: splits.val.len(),
            accuracy: best.accuracy,
            loss: best.loss,
            param_count: best.param_count,
        },
        dropped_channel_fraction: best.architecture.dropped_channel_fraction(),
        dropped_operation_fraction: best.architecture.dropped_operation_fraction(),
    })
}

/// Prunes the checkpoint to `architecture` (full if `None`) and scores one split.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    architecture: Option<&Path>,
    split: Split,
) -> Result<Metrics> {
    let net = load_snapshot(cfg, checkpoint)?;
    let arch = match architecture {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            Architecture::from_toml(&text, &cfg.space)?
        }
        None => Architecture::full(net.layout()),
    };
    let splits = load_data(cfg)?;
    let data = splits
        .get(split)
        .ok_or_else(|| Error::InvalidArgument("evaluate on train, val or test".into()))?;
    if data.is_empty() {
        return Err(DataError::EmptySplit(split.name()).into());
    }
    metrics(&net, &arch, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnumerationSummary {
    pub num_choices: usize,
    pub evaluated: usize,
    pub rejected: usize,
    pub best_index: usize,
    pub best: Metrics,
}

/// Scores every architecture and writes them, best first, in report-line format.
pub fn cmd_enumerate(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<EnumerationSummary> {
    let dir = cfg.run_dir();
    prepare_dir(&dir)?;
    let net = load_snapshot(cfg, checkpoint)?;
    let splits = load_data(cfg)?;
    let result = enumerate_all(&net, &splits.val, MAX_CHOICES)?;
    let mut text = String::new();
    for line in result
        .entries
        .iter()
        .map(report_line)
        .chain([summary_line(&result.entries, result.best())])
    {
        text.push_str(&serde_json::to_string(&line).expect("report line serializes"));
        text.push('\n');
    }
    write_atomic(&dir.join(ENUMERATION_FILE), text.as_bytes())?;
    let best = result.best();
    Ok(EnumerationSummary {
        num_choices: result.num_choices,
        evaluated: result.entries.len(),
        rejected: result.rejected,
        best_index: best.index,
        best: Metrics {
            examples: splits.val.len(),
            accuracy: best.accuracy,
            loss: best.loss,
            param_count: best.param_count,
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Results {
    pub train: TrainSummary,
    pub search: SearchSummary,
    /// Absent when the space has more than the enumeration cap of choices.
    pub enumeration: Option<EnumerationSummary>,
    /// The selected architecture on the test split, when there is one.
    pub test: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub manifest_version: u32,
    pub checkpoint_version: u32,
    pub report_version: u32,
    pub tool_version: String,
    pub config_digest: String,
    /// The full configuration; `postnas run` on it reproduces the run.
    pub config: String,
    pub spec_digest: String,
    pub snapshot_digest: String,
    /// SHA-256 of each deterministic artifact.
    pub artifacts: BTreeMap<String, String>,
    pub results: Results,
    pub wall_time_s: BTreeMap<String, f64>,
}

impl Manifest {
    /// The manifest with wall times removed, for comparing runs.
    pub fn without_wall_times(&self) -> Self {
        Self {
            wall_time_s: BTreeMap::new(),
            ..self.clone()
        }
    }
}

/// Train, search, enumerate (when small enough), test-evaluate, and write the manifest.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<Manifest> {
    cfg.validate()?;
    let dir = cfg.run_dir();
    prepare_dir(&dir)?;
    write_atomic(&dir.join(CONFIG_FILE), cfg.to_toml().as_bytes())?;
    let mut wall = BTreeMap::new();
    let start = Instant::now();

    let t = Instant::now();
    let (train, ckpt) = cmd_train(cfg)?;
    wall.insert("train".to_string(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let search = cmd_search(cfg, &ckpt)?;
    wall.insert("search".to_string(), t.elapsed().as_secs_f64());

    let net = load_snapshot(cfg, &ckpt)?;
    let mut artifacts = BTreeMap::new();
    for name in [CHECKPOINT_FILE, REPORT_FILE, ARCHITECTURE_FILE] {
        artifacts.insert(name.to_string(), sha256_file(&dir.join(name))?);
    }

    let enumeration = if net.layout().num_slices() <= MAX_CHOICES {
        let t = Instant::now();
        let e = cmd_enumerate(cfg, &ckpt)?;
        wall.insert("enumerate".to_string(), t.elapsed().as_secs_f64());
        artifacts.insert(ENUMERATION_FILE.to_string(), sha256_file(&dir.join(ENUMERATION_FILE))?);
        Some(e)
    } else {
        None
    };

    let t = Instant::now();
    let splits = load_data(cfg)?;
    let test = if splits.test.is_empty() {
        None
    } else {
        let text = fs::read_to_string(dir.join(ARCHITECTURE_FILE)).map_err(|e| Error::io(dir.join(ARCHITECTURE_FILE), e))?;
        let arch = Architecture::from_toml(&text, &cfg.space)?;
        Some(metrics(&net, &arch, &splits.test)?)
    };
    wall.insert("eval".to_string(), t.elapsed().as_secs_f64());
    wall.insert("total".to_string(), start.elapsed().as_secs_f64());

    let manifest = Manifest {
        manifest_version: MANIFEST_VERSION,
        checkpoint_version: FORMAT_VERSION,
        report_version: REPORT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_digest: cfg.digest(),
        config: cfg.to_toml(),
        spec_digest: cfg.space.digest(),
        snapshot_digest: net.digest(),
        artifacts,
        results: Results {
            train,
            search,
            enumeration,
            test,
        },
        wall_time_s: wall,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}
