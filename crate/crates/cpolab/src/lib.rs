//! A desk-scale laboratory for contrastive preference training of small
//! autoregressive transformers, with sentence-level consistency annotation,
//! per-layer linear probing, and dynamic layer selection.

pub mod annotate;
pub mod checkpoint;
pub mod cli;
pub mod corpus;
pub mod cpo;
pub mod model;
pub mod probe;
pub mod synth;
pub mod trainer;
pub mod tensor;
