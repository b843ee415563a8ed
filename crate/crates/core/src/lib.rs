//! Core of a reversible simulator for a miniature LLVM-like IR.
//!
//! * [`mir`]: the IR, its text format and frame layouts.
//! * [`heap`]: object-granular memory with pointer tracking and persistent
//!   copy-on-write snapshots.
//! * [`machine`]: the deterministic evaluator, including hypercalls and
//!   thread scheduling at interrupt points.
//! * [`debug`]: typed debug graph over snapshots.
//! * [`session`]: interactive simulation (stepping, states, rewind, traces).

pub mod mir;
pub mod heap;
pub mod machine;
pub mod debug;
pub mod session;
