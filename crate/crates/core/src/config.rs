//! Experiment configuration: one TOML document with nested sections.
//!
//! Unknown keys are rejected. `--set section.key=value` overrides are applied to
//! the parsed document before typing, so they obey the same rules as the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::PlantedSpec;
use crate::error::{Error, Result};
use crate::objective::PriorConfig;
use crate::rng::derive_seed;
use crate::search::SearchConfig;
use crate::space::{SearchSpaceSpec, SliceId};
use crate::supernet::InitConfig;
use crate::trainer::TrainConfig;

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "POSTNAS_OUTPUT_ROOT";

fn default_fractions() -> [f64; 3] {
    [0.8, 0.2, 0.0]
}

fn default_gain() -> f64 {
    InitConfig::default().weight_gain
}

fn default_retries() -> u32 {
    8
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Labels from a planted sub-network of `space`.
    Planted {
        planted: Vec<SliceId>,
        teacher_seed: u64,
        noise: f64,
        examples: usize,
        #[serde(default = "default_gain")]
        teacher_gain: f64,
        #[serde(default = "default_retries")]
        max_retries: u32,
        /// Train, validation and test fractions.
        #[serde(default = "default_fractions")]
        split: [f64; 3],
    },
    Csv {
        path: PathBuf,
        #[serde(default)]
        has_header: bool,
        #[serde(default = "default_fractions")]
        split: [f64; 3],
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default = "default_fractions")]
        split: [f64; 3],
    },
}

impl DataConfig {
    pub fn fractions(&self) -> [f64; 3] {
        match self {
            Self::Planted { split, .. } | Self::Csv { split, .. } | Self::Idx { split, .. } => *split,
        }
    }

    pub fn planted_spec(&self, space: &SearchSpaceSpec) -> Option<PlantedSpec> {
        match self {
            Self::Planted {
                planted,
                teacher_seed,
                noise,
                examples,
                teacher_gain,
                max_retries,
                ..
            } => Some(PlantedSpec {
                space: space.clone(),
                planted: planted.clone(),
                teacher_seed: *teacher_seed,
                noise: *noise,
                examples: *examples,
                teacher_gain: *teacher_gain,
                max_retries: *max_retries,
            }),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Global seed. The `seed` fields of `train` and `search` select streams under it.
    pub seed: u64,
    /// Run directories go under this root; falls back to `$POSTNAS_OUTPUT_ROOT`, then `runs`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub space: SearchSpaceSpec,
    #[serde(default)]
    pub init: InitConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub search: SearchConfig,
    pub data: DataConfig,
}

impl ExperimentConfig {
    /// Every problem with the configuration, each prefixed by its section.
    pub fn violations(&self) -> Vec<String> {
        let mut v: Vec<String> = self.space.violations().into_iter().map(|s| format!("space: {s}")).collect();
        v.extend(self.init.violations());
        v.extend(self.train.violations());
        v.extend(self.prior.violations());
        v.extend(self.search.violations());
        let f = self.data.fractions();
        if f.iter().any(|x| !(0.0..=1.0).contains(x)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            v.push(format!("data.split {f:?} must be fractions in [0, 1] summing to 1"));
        }
        if f[0] == 0.0 || f[1] == 0.0 {
            v.push("data.split needs non-empty train and validation parts".into());
        }
        if self.seed > i64::MAX as u64 {
            v.push("seed must fit in a signed 64-bit integer".into());
        }
        match &self.data {
            DataConfig::Planted { .. } => {
                if self.space.violations().is_empty() {
                    let spec = self.data.planted_spec(&self.space).expect("planted");
                    v.extend(spec.violations().into_iter().map(|s| s.replacen("planted.", "data.", 1)));
                }
            }
            DataConfig::Csv { path, .. } => {
                if !path.is_file() {
                    v.push(format!("data.path {} is not a readable file", path.display()));
                }
            }
            DataConfig::Idx { images, labels, .. } => {
                for (k, p) in [("images", images), ("labels", labels)] {
                    if !p.is_file() {
                        v.push(format!("data.{k} {} is not a readable file", p.display()));
                    }
                }
            }
        }
        v
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// Parses, applies overrides, and validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(vec![e.to_string()]))?;
        let mut bad = Vec::new();
        for o in overrides {
            if let Err(e) = apply_override(&mut doc, o) {
                bad.push(e);
            }
        }
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, overrides)
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn output_root(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_root().join(format!("seed-{}", self.seed))
    }

    pub fn init_seed(&self) -> u64 {
        derive_seed(self.seed, "init", 0)
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, "split", 0)
    }

    /// Train configuration with its seed resolved under the global seed.
    pub fn resolved_train(&self) -> TrainConfig {
        TrainConfig {
            seed: derive_seed(self.seed, "train", self.train.seed),
            ..self.train.clone()
        }
    }

    pub fn resolved_search(&self) -> SearchConfig {
        SearchConfig {
            seed: derive_seed(self.seed, "search", self.search.seed),
            ..self.search.clone()
        }
    }
}

/// Applies `a.b.c=value`. The value is read as a TOML literal, or as a bare
/// string when it does not parse as one.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> std::result::Result<(), String> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| format!("override `{spec}` is not of the form key.path=value"))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(format!("override `{spec}` has an empty key"));
    }
    let value = match format!("v = {}", raw.trim()).parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.trim().to_string()),
    };
    let mut table = doc;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| format!("override `{spec}`: `{k}` is not a section"))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
