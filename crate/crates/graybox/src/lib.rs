//! Gray-box fine-tuning toolkit.
//!
//! A frozen dual-encoder backbone lives inside a sealed "vault" that exposes
//! nothing but entry-point descriptors, output features, and entry
//! gradients. Clients adapt it to new tasks by training small modules on
//! their side of the boundary:
//!
//! - input/output adapters around the original entry and exit (the
//!   strictest access mode), or
//! - proxy tokens injected at per-layer entry points (a more permissive
//!   mode),
//!
//! with white-box baselines (full/last-layers fine-tuning, low-rank
//! adaptation, linear probing) implemented against the same backbone for
//! controlled comparisons. The vault can be driven in-process or over a
//! binary wire protocol in which weights are unrepresentable.
//!
//! Start with the `examples/` directory: each file is a runnable tour of one
//! capability. The `gbx` binary wraps the same entry points as subcommands.

pub mod harness;
pub mod protocol;
pub mod rng;
pub mod train;
pub mod adapters;
pub mod tensor;
pub mod vault;
