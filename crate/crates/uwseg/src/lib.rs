//! Underwater semantic segmentation in pure Rust.
//!
//! The crate implements a hierarchical transformer encoder, a channel
//! self-attention feature enhancement stage (UIQA), a gated multi-scale
//! aggregation decoder (MAA) plus the classic all-MLP decoder for ablations,
//! an edge-aware composite training loss, and the surrounding machinery:
//! a small reverse-mode autodiff tensor engine, dataset ingestion with a
//! synthetic scene generator, an AdamW training loop with poly learning-rate
//! decay, metrics, and analytic cost accounting.
//!
//! Everything runs on the CPU in f32 and is deterministic under a seed.

pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod uiqa;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Raise glibc's mmap threshold so large activation buffers are served from
/// the heap instead of fresh mmap/munmap pairs on every op. Idempotent;
/// called by model construction and the training loop.
pub fn tune_allocator() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| {
        #[cfg(target_os = "linux")]
        unsafe {
            libc::mallopt(libc::M_MMAP_THRESHOLD, 256 * 1024 * 1024);
            libc::mallopt(libc::M_TRIM_THRESHOLD, 256 * 1024 * 1024);
        }
    });
}
