//! Deterministic discrete-event simulator of a multi-node LLM inference
//! cluster with tiered KV-cache management.

pub mod config;
pub mod costmodel;
pub mod engine;
pub mod kvstore;
pub mod nodemanager;
pub mod scheduler;
pub mod simcore;
pub mod time;
pub mod workload;

pub use time::Nanos;
