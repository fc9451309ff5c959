//! Frozen image and text encoders.
//!
//! The image side is either a seeded linear map from raw features to the
//! embedding width, or an identity/lookup over precomputed embeddings. It is
//! gradient-free.
//!
//! The text side maps a token matrix `[L, D]` to a `D`-vector:
//!
//! ```text
//! X = tokens + pos[0..L]
//! A = softmax_rows((X · mix) · Xᵀ / sqrt(D))
//! w = mean_rows(A · X) · proj
//! ```
//!
//! Its weights are tape constants, so gradient only reaches the input tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::rng::SplitMix64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("empty token sequence")]
    EmptySequence,
    #[error("token dimension {got} does not match encoder dimension {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("sequence length {len} exceeds the positional table ({max})")]
    SequenceTooLong { len: usize, max: usize },
    #[error("sample width {got} does not match image backend width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("no precomputed embedding for sample id {0}")]
    UnknownSample(u64),
    #[error("invalid encoder setting: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Class identifier shared by samples, tokens and accuracy tables.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize,
)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: u64,
    /// Raw features for the linear backend, or a precomputed embedding.
    pub features: Vec<f64>,
    pub label: ClassId,
    pub task_id: u32,
}

/// Ordered list of `D`-dimensional tokens, stored as an `[L, D]` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence(Tensor);

impl TokenSequence {
    pub fn new(tokens: &[Vec<f64>]) -> Result<Self, EncoderError> {
        let first = tokens.first().ok_or(EncoderError::EmptySequence)?;
        let d = first.len();
        if d == 0 {
            return Err(EncoderError::DimensionMismatch { expected: 1, got: 0 });
        }
        let mut data = Vec::with_capacity(tokens.len() * d);
        for t in tokens {
            if t.len() != d {
                return Err(EncoderError::DimensionMismatch {
                    expected: d,
                    got: t.len(),
                });
            }
            data.extend_from_slice(t);
        }
        Ok(Self(Tensor::matrix(tokens.len(), d, data)?))
    }

    pub fn single(token: Vec<f64>) -> Result<Self, EncoderError> {
        Self::new(&[token])
    }

    pub fn from_tensor(t: Tensor) -> Result<Self, EncoderError> {
        if t.shape().len() != 2 {
            return Err(EncoderError::InvalidSpec(format!(
                "token sequence must be a matrix, got shape {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }
}

/// How the image tower turns a sample into `z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ImageBackendSpec {
    /// Seeded frozen linear map from `input_width` features to `D`.
    Linear { input_width: usize },
    /// Samples already carry `z`; returned verbatim.
    Precomputed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub seed: u64,
    pub dim: usize,
    /// Rows in the positional table; bounds the composed sequence length.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    pub image: ImageBackendSpec,
}

fn default_max_len() -> usize {
    128
}

#[derive(Debug, Clone)]
pub enum ImageBackend {
    /// `z = W x` with `W` of shape `[D, input_width]`.
    Linear { weights: Tensor },
    Precomputed { dim: usize },
    /// Embeddings keyed by sample id.
    Lookup {
        dim: usize,
        table: HashMap<u64, Vec<f64>>,
    },
}

impl ImageBackend {
    pub fn input_width(&self) -> Option<usize> {
        match self {
            ImageBackend::Linear { weights } => Some(weights.cols()),
            ImageBackend::Precomputed { dim } => Some(*dim),
            ImageBackend::Lookup { .. } => None,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ImageBackend::Linear { weights } => weights.rows(),
            ImageBackend::Precomputed { dim } | ImageBackend::Lookup { dim, .. } => *dim,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    dim: usize,
    mix: Tensor,
    proj: Tensor,
    pos: Tensor,
}

fn seeded_matrix(seed: u64, tag: &str, rows: usize, cols: usize, scale: f64) -> Tensor {
    let mut rng = SplitMix64::derive(seed, tag);
    Tensor::matrix(rows, cols, rng.normal_vec(rows * cols, scale)).expect("positive dims")
}

impl TextEncoder {
    pub fn seeded(seed: u64, dim: usize, max_len: usize) -> Self {
        let s = 1.0 / (dim as f64).sqrt();
        Self {
            dim,
            mix: seeded_matrix(seed, "text.mix", dim, dim, s),
            proj: seeded_matrix(seed, "text.proj", dim, dim, s),
            pos: seeded_matrix(seed, "text.pos", max_len, dim, s),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn max_len(&self) -> usize {
        self.pos.rows()
    }

    pub fn positional(&self) -> &Tensor {
        &self.pos
    }

    /// Register the weights on `tape` as constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape) -> TextGraph<'a> {
        TextGraph {
            enc: self,
            mix: tape.constant(self.mix.clone()),
            proj: tape.constant(self.proj.clone()),
            pos: HashMap::new(),
        }
    }

    /// Gradient-free encoding of a standalone sequence.
    pub fn encode(&self, seq: &TokenSequence) -> Result<Vec<f64>, EncoderError> {
        let mut tape = Tape::new();
        let mut g = self.bind(&mut tape);
        let x = tape.constant(seq.tensor().clone());
        let w = g.encode(&mut tape, x)?;
        Ok(tape.value(w).data().to_vec())
    }

    fn parameters(&self) -> [&Tensor; 3] {
        [&self.mix, &self.proj, &self.pos]
    }
}

/// Text encoder weights bound to one tape.
pub struct TextGraph<'a> {
    enc: &'a TextEncoder,
    mix: Var,
    proj: Var,
    pos: HashMap<usize, Var>,
}

impl TextGraph<'_> {
    pub fn weight_vars(&self) -> Vec<Var> {
        let mut v = vec![self.mix, self.proj];
        v.extend(self.pos.values().copied());
        v
    }

    /// Encode an `[L, D]` token node into a `[D]` embedding node.
    pub fn encode(&mut self, tape: &mut Tape, tokens: Var) -> Result<Var, EncoderError> {
        let shape = tape.value(tokens).shape().to_vec();
        if shape.len() != 2 {
            return Err(EncoderError::InvalidSpec(format!(
                "token input must be [L, D], got {shape:?}"
            )));
        }
        let (len, d) = (shape[0], shape[1]);
        if d != self.enc.dim {
            return Err(EncoderError::DimensionMismatch {
                expected: self.enc.dim,
                got: d,
            });
        }
        if len > self.enc.max_len() {
            return Err(EncoderError::SequenceTooLong {
                len,
                max: self.enc.max_len(),
            });
        }
        let pos = match self.pos.get(&len) {
            Some(v) => *v,
            None => {
                let rows = self.enc.pos.data()[..len * d].to_vec();
                let v = tape.constant(Tensor::matrix(len, d, rows)?);
                self.pos.insert(len, v);
                v
            }
        };
        let x = tape.add(tokens, pos)?;
        let q = tape.matmul(x, self.mix)?;
        let xt = tape.transpose(x)?;
        let scores = tape.matmul(q, xt)?;
        let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
        let attn = tape.softmax_rows(scores)?;
        let mixed = tape.matmul(attn, x)?;
        let pooled = tape.mean_rows(mixed)?;
        let pooled = tape.reshape(pooled, &[1, d])?;
        let w = tape.matmul(pooled, self.proj)?;
        Ok(tape.reshape(w, &[d])?)
    }
}

/// The frozen pair plus the seed and spec that produced it.
#[derive(Debug, Clone)]
pub struct FrozenEncoders {
    pub spec: EncoderSpec,
    pub text: TextEncoder,
    pub image: ImageBackend,
}

impl FrozenEncoders {
    pub fn from_spec(spec: &EncoderSpec) -> Result<Self, EncoderError> {
        if spec.dim == 0 || spec.max_len == 0 {
            return Err(EncoderError::InvalidSpec(
                "dim and max_len must be positive".into(),
            ));
        }
        let image = match spec.image {
            ImageBackendSpec::Linear { input_width } => {
                if input_width == 0 {
                    return Err(EncoderError::InvalidSpec(
                        "input_width must be positive".into(),
                    ));
                }
                ImageBackend::Linear {
                    weights: seeded_matrix(
                        spec.seed,
                        "image.linear",
                        spec.dim,
                        input_width,
                        1.0 / (input_width as f64).sqrt(),
                    ),
                }
            }
            ImageBackendSpec::Precomputed => ImageBackend::Precomputed { dim: spec.dim },
        };
        Ok(Self {
            spec: spec.clone(),
            text: TextEncoder::seeded(spec.seed, spec.dim, spec.max_len),
            image,
        })
    }

    /// Swap the image side for a lookup table keyed by sample id.
    pub fn with_lookup(mut self, table: HashMap<u64, Vec<f64>>) -> Self {
        self.image = ImageBackend::Lookup {
            dim: self.spec.dim,
            table,
        };
        self
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn encode_image(&self, sample: &ImageSample) -> Result<Vec<f64>, EncoderError> {
        match &self.image {
            ImageBackend::Linear { weights } => {
                let (rows, cols) = (weights.rows(), weights.cols());
                if sample.features.len() != cols {
                    return Err(EncoderError::WidthMismatch {
                        expected: cols,
                        got: sample.features.len(),
                    });
                }
                Ok((0..rows)
                    .map(|r| {
                        weights
                            .row(r)
                            .iter()
                            .zip(&sample.features)
                            .map(|(w, x)| w * x)
                            .sum()
                    })
                    .collect())
            }
            ImageBackend::Precomputed { dim } => {
                if sample.features.len() != *dim {
                    return Err(EncoderError::WidthMismatch {
                        expected: *dim,
                        got: sample.features.len(),
                    });
                }
                Ok(sample.features.clone())
            }
            ImageBackend::Lookup { table, .. } => table
                .get(&sample.id)
                .cloned()
                .ok_or(EncoderError::UnknownSample(sample.id)),
        }
    }

    pub fn encode_text(&self, seq: &TokenSequence) -> Result<Vec<f64>, EncoderError> {
        self.text.encode(seq)
    }

    /// Content hash over every frozen parameter, bit-exact.
    pub fn checksum(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.spec.seed.to_le_bytes());
        let mut feed = |t: &Tensor| {
            for e in t.shape() {
                h.update((*e as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        };
        for t in self.text.parameters() {
            feed(t);
        }
        match &self.image {
            ImageBackend::Linear { weights } => feed(weights),
            ImageBackend::Precomputed { .. } => {}
            ImageBackend::Lookup { table, .. } => {
                let mut ids: Vec<_> = table.keys().copied().collect();
                ids.sort_unstable();
                for id in ids {
                    feed(&Tensor::vector(table[&id].clone()));
                }
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}
