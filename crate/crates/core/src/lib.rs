//! Aggregation-aware mixed-precision quantization for small graph neural
//! networks.
//!
//! The crate is organised by pipeline stage:
//!
//! * [`graph`] – CSR graphs, dataset files, normalization, aggregation and
//!   synthetic power-law generators.
//! * [`quant`] – the learnable quantizer: forward rule, straight-through
//!   gradients, quantization error and the memory penalty.
//! * [`nns`] – nearest-neighbour parameter banks for graphs whose nodes are
//!   not known at training time.
//! * [`model`] – fake-quantized GCN/GIN forward and manual backward, Adam,
//!   training loop and checkpoints.
//! * [`runtime`] – integer inference with fused rescaling passes.
//! * [`accel`] – analytic cycle and energy model of a bit-serial accelerator.
//! * [`report`] – experiment configs, metrics and the command implementations
//!   behind the `a2q` binary.

pub mod accel;
pub mod error;
pub mod graph;
pub mod model;
pub mod nns;
pub mod quant;
pub mod report;
pub mod runtime;
pub mod util;

pub use error::{Error, Result};
