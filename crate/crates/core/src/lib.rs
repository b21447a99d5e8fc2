//! Prototype-guided concept erasure on a synthetic semantic world with an
//! analytic denoiser.
//!
//! Pipeline: paired generations under concept and contrastive prompts →
//! embedding differences → k-means image prototypes → soft-prompt textual
//! prototypes → top-1 prototype selection as negative guidance at sampling time.

pub mod encoders;
pub mod erasure;
pub mod error;
pub mod evalkit;
pub mod guidance;
pub mod linalg;
pub mod pipeline;
pub mod protolab;
pub mod rng;
pub mod semworld;

pub use encoders::{cosine, encode_image, encode_prompt, encode_text, encode_text_grad, JointEmbedding, SoftPrompt};
pub use erasure::{ErasureSession, GenerationRecord};
pub use error::{Error, Result};
pub use guidance::{GuidanceConfig, SamplerKind};
pub use pipeline::PipelineConfig;
pub use protolab::{ImagePrototype, PrototypeBank, TextualPrototype};
pub use semworld::{build_world, ConceptSpec, Prompt, TokenId, World, WorldConfig};
