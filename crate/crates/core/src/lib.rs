//! Streaming video inpainting on synthetic clips.
//!
//! The engine fills masked regions of a video with a small windowed
//! transformer. Three inference modes share one numeric path: `offline`
//! tiles the clip into fixed windows, `online` recomputes a causal window
//! for every arriving frame, and `memory` caches per-block token
//! representations so each new frame costs one single-query pass. A fourth
//! configuration layers a second, slower inpainter on top of the memory
//! mode and feeds refined representations back into the cache.

pub mod attention;
pub mod codec;
pub mod error;
pub mod metrics;
pub mod numeric;
pub mod pipeline;
pub mod scheduler;
pub mod store;
pub mod video;
pub mod weights;

pub use error::{Error, Result};
