//! Run configuration files and the data sources they name.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use attribank::data::{generate_synthetic, generate_synthetic_pair, EmbeddingFile, SyntheticSpec, TaskStream};
use attribank::encoders::{EncoderSpec, ImageBackendSpec};
use attribank::trainer::{Mode, TrainConfig};

use crate::error::CliError;
use crate::manifest::InputLog;

/// Where a task stream comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Train and test embedding files sharing one class-token table.
    /// Relative paths resolve against the config file's directory.
    EmbeddingFiles { train: PathBuf, test: PathBuf },
}

/// Config for `train` and `sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    /// Defaults to a seeded encoder pair sized from the data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    pub data: DataSource,
}

/// The two streams of a cross-dataset run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairSource {
    /// Two synthetic streams drawn from one attribute pool, overlapping in
    /// `shared_attributes` attributes.
    SyntheticPair {
        a: SyntheticSpec,
        b: SyntheticSpec,
        shared_attributes: usize,
    },
    /// Independent sources; B's class and sample ids are shifted past A's.
    Separate { a: DataSource, b: DataSource },
}

/// Config for `cdcl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdclConfig {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderSpec>,
    pub streams: PairSource,
}

/// Parse a JSON config; unreadable or malformed files are config errors.
pub fn load_config<T: DeserializeOwned>(path: &Path, inputs: &mut InputLog) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    inputs.record(path, &bytes);
    serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

fn shift_seed(spec: &mut SyntheticSpec, old_base: u64, new_base: u64) {
    spec.seed = spec.seed.wrapping_sub(old_base).wrapping_add(new_base);
}

impl DataSource {
    fn reseed(&mut self, old_base: u64, new_base: u64) {
        if let DataSource::Synthetic(s) = self {
            shift_seed(s, old_base, new_base);
        }
    }

    fn seed(&self) -> Option<u64> {
        match self {
            DataSource::Synthetic(s) => Some(s.seed),
            DataSource::EmbeddingFiles { .. } => None,
        }
    }

    pub fn build(&self, name: &str, base: &Path, inputs: &mut InputLog) -> Result<TaskStream, CliError> {
        match self {
            DataSource::Synthetic(spec) => Ok(generate_synthetic(spec)?),
            DataSource::EmbeddingFiles { train, test } => {
                let train = load_embeddings(&base.join(train), inputs)?;
                let test = load_embeddings(&base.join(test), inputs)?;
                Ok(EmbeddingFile::into_stream(name, &train, &test)?)
            }
        }
    }
}

fn load_embeddings(path: &Path, inputs: &mut InputLog) -> Result<EmbeddingFile, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))?;
    inputs.record(path, &bytes);
    EmbeddingFile::from_bytes(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

impl RunConfig {
    /// `--seed` sets the training seed, the encoder seed and the data seed.
    pub fn apply_seed(&mut self, seed: u64) {
        let old = self.data.seed().unwrap_or(self.train.seed);
        self.data.reseed(old, seed);
        self.train.seed = seed;
        if let Some(e) = self.encoder.as_mut() {
            e.seed = seed;
        }
    }
}

impl CdclConfig {
    /// Sets every seed; B keeps its offset from A.
    pub fn apply_seed(&mut self, seed: u64) {
        match &mut self.streams {
            PairSource::SyntheticPair { a, b, .. } => {
                let old = a.seed;
                shift_seed(a, old, seed);
                shift_seed(b, old, seed);
            }
            PairSource::Separate { a, b } => {
                let old = a.seed().or(b.seed()).unwrap_or(self.train.seed);
                a.reseed(old, seed);
                b.reseed(old, seed);
            }
        }
        self.train.seed = seed;
        if let Some(e) = self.encoder.as_mut() {
            e.seed = seed;
        }
    }
}

impl PairSource {
    pub fn build(&self, base: &Path, inputs: &mut InputLog) -> Result<(TaskStream, TaskStream), CliError> {
        match self {
            PairSource::SyntheticPair { a, b, shared_attributes } => {
                Ok(generate_synthetic_pair(a, b, *shared_attributes)?)
            }
            PairSource::Separate { a, b } => {
                let sa = a.build("stream-a", base, inputs)?;
                let sb = b.build("stream-b", base, inputs)?;
                let class_offset = sa.class_tokens.keys().next_back().map_or(0, |c| c.0 + 1);
                let id_offset = sa
                    .tasks
                    .iter()
                    .flat_map(|t| t.train.iter().chain(&t.test))
                    .map(|s| s.id + 1)
                    .max()
                    .unwrap_or(0);
                let sb = sb.relabeled("stream-b", class_offset, id_offset);
                Ok((sa, sb))
            }
        }
    }
}

/// The configured encoder, or a default sized from `stream`: the image
/// tower passes embeddings through when features already have the token
/// width and projects them otherwise.
pub fn resolve_encoder(configured: Option<&EncoderSpec>, train: &TrainConfig, stream: &TaskStream) -> Result<EncoderSpec, CliError> {
    if let Some(e) = configured {
        return Ok(e.clone());
    }
    let dim = stream
        .class_tokens
        .values()
        .next()
        .map(|t| t.dim())
        .ok_or_else(|| CliError::Data("stream has no class tokens".into()))?;
    let width = stream
        .tasks
        .iter()
        .flat_map(|t| t.train.iter())
        .map(|s| s.features.len())
        .next()
        .ok_or_else(|| CliError::Data("stream has no training samples".into()))?;
    let image = if width == dim {
        ImageBackendSpec::Precomputed
    } else {
        ImageBackendSpec::Linear { input_width: width }
    };
    Ok(EncoderSpec {
        seed: train.seed,
        dim,
        max_len: 128.max(train.c * train.m + 1),
        image,
    })
}

/// Directory relative data paths resolve against.
pub fn config_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}
