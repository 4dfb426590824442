//! Core library for a linguistic-steganalysis toolkit built around a small
//! decoder-only transformer with low-rank adapters.
//!
//! The toolkit detects whether short texts carry hidden payloads, in two
//! interchangeable modes: a generative detector that writes its verdict as
//! text, and a classification detector that reads a score off a linear
//! head. Supporting modules synthesise stego/cover corpora, prepare
//! balanced splits, train with AdamW, and report accuracy and macro F1.

pub mod clsmode;
pub mod datapipe;
pub mod genmode;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod selfcheck;
pub mod stegsynth;
pub mod tokenizer;
pub mod trainer;
