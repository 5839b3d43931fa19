//! File formats, checkpoints, reports and the command-line front end for
//! [`stunet_core`].
//!
//! The numeric work happens in the core crate; this crate reads and writes
//! CSV adjacency and series files, the binary checkpoint container, flat
//! `key=value` configs and the text/CSV reports.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod report;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{Error, Result};

// The training loop allocates and frees large tapes every batch; mimalloc
// keeps those pages mapped instead of returning them to the OS each time.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;
