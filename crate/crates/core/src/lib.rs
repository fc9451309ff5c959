//! Rehearsal-free continual learning with an attribute bank.
//!
//! A frozen pair of encoders maps images and token sequences into a shared
//! embedding space. A bank of `N` (key, prompt) pairs is trained task by task:
//! each image selects the `C` keys closest to its embedding, the matching
//! prompts are prepended to every class token, and classification uses cosine
//! similarity between the image and the resulting text embeddings. No samples
//! from earlier tasks are stored or replayed.
//!
//! ```no_run
//! use std::sync::Arc;
//! use attribank::data::{generate_synthetic, SyntheticSpec};
//! use attribank::encoders::{EncoderSpec, FrozenEncoders, ImageBackendSpec};
//! use attribank::trainer::{Learner, Mode, TrainConfig};
//!
//! let stream = generate_synthetic(&SyntheticSpec::benchmark(1)).unwrap();
//! let enc = FrozenEncoders::from_spec(&EncoderSpec {
//!     seed: 1,
//!     dim: 32,
//!     max_len: 128,
//!     image: ImageBackendSpec::Precomputed,
//! })
//! .unwrap();
//! let mut learner = Learner::new(Arc::new(enc), TrainConfig::default(), Mode::Attriclip).unwrap();
//! let matrix = learner.run_sequence(&stream, &mut |_, _, _| Ok(())).unwrap();
//! println!("{:?}", matrix.final_average());
//! ```

pub mod autodiff;
pub mod bank;
pub mod data;
pub mod encoders;
pub mod eval;
pub mod gradcheck;
pub mod objective;
pub mod rng;
pub mod trainer;

pub use bank::{select_top_c, AttributeBank, Selection};
pub use encoders::{ClassId, EncoderSpec, FrozenEncoders, ImageSample, TokenSequence};
pub use eval::{AccuracyMatrix, CdclReport};
pub use rng::SplitMix64;
pub use trainer::{Learner, LearnerState, Mode, TrainConfig};
