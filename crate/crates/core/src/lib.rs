//! Resolution extrapolation for image diffusion transformers.
//!
//! Two mechanisms live here:
//!
//! * [`rope`] and [`extrapolation`]: frequency analysis of 2D rotary
//!   embeddings and correction of the dominant frequency so that the
//!   extrapolated axis stays within a single period.
//! * [`attention`]: a block-wise online-softmax attention engine that measures
//!   per-head attention entropy and sharpens each head with its own focus
//!   factor.
//!
//! [`oracle`] holds dense reference implementations, [`harness`] a toy layer
//! wiring everything together, and [`tensor_io`] the tensor file format.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! name the common instantiations.

pub mod attention;
pub mod error;
pub mod extrapolation;
pub mod harness;
pub mod oracle;
pub mod rope;
pub mod scalar;
pub mod tensor;
pub mod tensor_io;

pub use attention::{
    attention_forward, concentrated_attention, entropy_pass, focus_map, memory_report, AttentionInputs,
    BlockConfig, ConcentratedOutput, ConcentrationConfig, Concentrator, Engine, EntropyReport, FocusMap,
    MemoryReport, MemoryShape, ScratchMeter,
};
pub use error::{Error, Result};
pub use extrapolation::{
    auto_detector, correct_dominant, corrected_frequency, rdfc, scale_ntk, scale_pi, scale_yarn, Axis,
    CollisionDetector, PeriodDetector, RdfcIteration, RdfcLog, WindowDetector, YarnParams,
};
pub use rope::{
    apply_rope_1d, apply_rope_2d, build_schedule, check_non_repetition, encoding_collisions, period_table,
    Correction, FrequencySchedule, PeriodTable, ResolutionSpec, RopeConfig,
};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type AttentionInputs32 = AttentionInputs<f32>;
pub type AttentionInputs64 = AttentionInputs<f64>;
pub type TokenGrid32 = harness::TokenGrid<f32>;
pub type TokenGrid64 = harness::TokenGrid<f64>;
