//! framekv: a toy-scale transformer inference engine for long frame-token
//! streams.
//!
//! The engine processes a long stream of visual-group tokens with two
//! efficiency mechanisms:
//!
//! * **Chunked prefill** — the stream is encoded in sliding-window chunks.
//!   Each chunk attends only to itself, the system prompt, the historical
//!   timestamp tokens, and the overlap of the previous window, instead of
//!   the full quadratic context.
//! * **Bi-level KV decoding** — per-chunk dense KVs are pooled into sparse
//!   KVs; at decode time a relevance oracle picks a few chunks to load
//!   dense while the rest are loaded sparse, forming a mixed cache.
//!
//! Everything is deterministic given the seeds, and every attention
//! operation is metered so measured FLOP/byte counts can be checked against
//! the closed-form cost model.

pub mod cli;
pub mod cost;
pub mod kv_store;
pub mod model;
pub mod prefill;
pub mod sequence;
pub mod verify;
