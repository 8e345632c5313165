//! KV-cache-sharing selective distillation lab.
//!
//! A frozen text-only decoder supervises a multimodal student by reading the
//! student's per-layer key/value cache. Everything here runs on the CPU in
//! double precision: a tape autodiff engine, decoder and vision tower,
//! the mixed soft/hard objective, synthetic data, staged training, evaluation
//! and the recovery report.

pub mod autograd;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod objective;
pub mod params;
pub mod pipeline;
pub mod seed;
pub mod selfcheck;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use eval::{EvalResults, EvalSuite, RecoveryReport};
pub use model::{ModelConfig, TeacherEmbeds, Tower};
pub use objective::{AlphaPolicy, LossBreakdown, SourceCategory, SourceTag};
pub use params::ParamSet;
pub use pipeline::{EvalConfig, Layout};
pub use tensor::Tensor;
pub use train::{RunConfig, Stage};
pub use transformer::{AttentionMask, KvCache, TransformerConfig};
