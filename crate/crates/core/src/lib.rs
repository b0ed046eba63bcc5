//! Slot labeling recast as extractive question answering.
//!
//! The crate turns dialog slot-labeling (SL) data into span-QA examples,
//! fine-tunes a span-extraction model in staged regimes (full, head-only,
//! bias-only, adapters), decodes start/end logits back into slot values, and
//! scores predictions with exact-span-match F1. A small trainable encoder
//! ships with the crate so the whole pipeline runs on CPU; real pretrained
//! backbones plug in behind [`model::EncoderBackbone`].
//!
//! Pipeline in one breath: [`corpus::load_sl`] -> [`corpus::sl_to_qa`] ->
//! [`train::run_schedule`] -> [`decode::predict_dataset`] ->
//! [`eval::evaluate`], with [`audit`] linting the SL data on the side.
//!
//! All character offsets throughout the crate count Unicode scalar values,
//! not bytes.

pub mod audit;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod eval;
pub mod model;
pub mod reformulate;
pub mod synth;
pub mod text;
pub mod train;
pub mod types;

pub use error::{Error, Result};
