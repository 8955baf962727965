//! Binary-analysis toolkit that lifts disassembled functions into
//! source-level abstract logic trees (SALTs) and drives an LLM-backed
//! decompilation pipeline around them.
//!
//! The crate is organised as a pipeline of small, independently testable
//! stages:
//!
//! * [`ingest`] — parse disassembly listings into typed functions and
//!   data-section images, plus a canonical JSON interchange form.
//! * [`cfg`] — recover basic blocks, terminators and control-flow edges.
//! * [`loops`] — back edges, dominators and the nested loop forest.
//! * [`normalize`] — position-independent jump labels and data-reference
//!   annotations.
//! * [`salt`] — build, serialize and parse the logic tree itself.
//! * [`prompts`] — the fixed prompt template set and placeholder binding.
//! * [`pipeline`] — chat-endpoint transport, error fixers and symbol
//!   recovery with full transcripts.
//! * [`eval`] — compile-and-run scoring (RC / RE / TCP).
//! * [`dataset`] — corpus filtering and compile–strip–disassemble pair
//!   construction.

pub mod cfg;
pub mod dataset;
pub mod eval;
pub mod ingest;
pub mod loops;
pub mod normalize;
pub mod pipeline;
pub mod prompts;
pub mod salt;

#[cfg(doctest)]
mod book;
