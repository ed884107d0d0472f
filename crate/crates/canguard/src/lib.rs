//! CANGuard: spatio-temporal intrusion detection for in-vehicle CAN traffic.
//!
//! The crate covers the full pipeline: CSV ingestion and synthetic traffic
//! generation, imbalance-aware preprocessing (sliding windows, stratified
//! splitting, borderline SMOTE, z-score scaling, class weights), a
//! CNN-BiGRU-attention classifier built on an in-crate reverse-mode autodiff
//! core, Adam training with early stopping and an ablation harness,
//! attribution (Kernel SHAP and permutation importance), and an online
//! sliding-window detector. The `canguard` binary exposes each stage as a
//! subcommand.

pub mod cli;
pub mod error;
pub mod explain;
pub mod ingest;
pub mod layers;
pub mod model;
pub mod preprocess;
pub mod stream;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

/// Seed derivation: every stochastic component draws its seed from the one
/// user-facing seed plus a fixed stream tag, so runs are reproducible and
/// components stay decoupled.
pub mod seeds {
    pub fn derive(base: u64, stream: &str) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64 ^ base.rotate_left(17);
        for b in stream.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

}
