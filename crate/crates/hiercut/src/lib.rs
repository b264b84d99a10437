//! File formats, training schedules, experiment runners and the `hiercut`
//! command line, on top of `hiercut-core`.

pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod experiment;
pub mod gradcheck;
pub mod hierarchy_io;
pub mod netpbm;
pub mod schedule;

pub use error::{Error, Result};
pub use hiercut_core as core;
