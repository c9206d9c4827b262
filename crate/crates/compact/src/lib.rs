//! Training-free structured pruning for decoder-only transformer checkpoints.
//!
//! Two knobs shrink a model without changing its architecture:
//!
//! * **Vocabulary pruning** removes the rare suffix of the token-id space:
//!   embedding / LM-head rows are sliced and the matching tokenizer merges
//!   deleted, so removed tokens can never be produced again.
//! * **FFN channel pruning** removes the intermediate channels whose squared
//!   activations — accumulated over a calibration corpus and weighted to the
//!   tokens that survive vocabulary pruning — contribute least.
//!
//! The output is a standard-architecture checkpoint (safetensors-layout
//! container, rewritten config, pruned tokenizer) that ordinary loaders
//! accept unchanged. Supporting analytics cover parameter-distribution
//! census, (V', I') planning against a target ratio, and retokenization
//! churn measurement.

pub mod cli;
pub mod forward;
pub mod pruner;
pub mod scoring;
pub mod synth;
pub mod tensorstore;
pub mod tokenizer;

pub use tensorstore::{
    load_container, save_container, take_cols, take_rows, validate, ModelConfig, TensorView,
    ValidationReport, WeightMap,
};
pub use tokenizer::{load_tokenizer, retok_stats, BpeTokenizer, RareTokenSet};
