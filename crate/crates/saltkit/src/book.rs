//! Doc-test bindings for the guide: each module inlines one chapter so
//! the chapter's code fences run under `cargo test --doc`.

#[doc = include_str!("../../../book/src/introduction.md")]
mod introduction {}

#[doc = include_str!("../../../book/src/listings.md")]
mod listings {}

#[doc = include_str!("../../../book/src/control-flow.md")]
mod control_flow {}

#[doc = include_str!("../../../book/src/loops.md")]
mod loops {}

#[doc = include_str!("../../../book/src/normalization.md")]
mod normalization {}

#[doc = include_str!("../../../book/src/logic-trees.md")]
mod logic_trees {}

#[doc = include_str!("../../../book/src/prompts.md")]
mod prompts {}

#[doc = include_str!("../../../book/src/pipeline.md")]
mod pipeline {}

#[doc = include_str!("../../../book/src/scoring.md")]
mod scoring {}

#[doc = include_str!("../../../book/src/datasets.md")]
mod datasets {}

#[doc = include_str!("../../../book/src/cli.md")]
mod cli {}
