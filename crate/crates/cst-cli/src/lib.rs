//! Pipeline front end: a JSON run config plus five subcommands — synth,
//! augment, train, eval, report — that carry a preference dataset from raw
//! prompts to a scored behavior table. The binary in `main.rs` is a thin
//! wrapper; integration tests drive the same entry points in-process.

pub mod commands;
pub mod config;
