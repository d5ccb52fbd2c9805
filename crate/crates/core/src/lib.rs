//! Local-attention transformer laboratory.
//!
//! Masked multi-head self-attention with the `prev-k` / `next-k` / `band-k` /
//! `identity` mask family, `W_q`/`W_k` tying across heads and layers, exact
//! attention-parameter counting, a reverse-mode tape for training and exact
//! sensitivity gradients, and the locality/syntactic attention-bias analyses.
//!
//! Numeric code is generic over [`Scalar`] (`f32`, `f64`); the aliases below
//! fix the `f64` instantiation used by training and analysis.

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod mask;
pub mod optim;
pub mod parallel;
pub mod scalar;
pub mod task;
pub mod tensor;
pub mod train;

pub use attention::{
    banded_attention, count_attention_params, head_attention, multi_head_forward, AttentionRecord, HeadParams,
    LayerAttention,
};
pub use config::{resolve_preset, MaskMode, ModelConfig};
pub use encoder::{Encoder, EncoderOutput, EncoderParams};
pub use error::{Error, Result};
pub use mask::{make_mask, union_support, Mask, MaskKind};
pub use scalar::Scalar;
pub use tensor::{seeded_uniform_init, Matrix, Rng};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type Encoder64 = Encoder<f64>;
pub type Encoder32 = Encoder<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tagger64 = train::Tagger<f64>;
