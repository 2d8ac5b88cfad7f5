//! Experiment lab for the targeted downstream-agnostic attack: the `tdaa`
//! command line, the TDAC1 checkpoint format, report CSVs and manifests.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod fsutil;
pub mod manifest;
pub mod ppm;
pub mod report;
