//! Oracles shared by the core test suites and the acceptance target.
#![allow(dead_code)]

pub mod conv_oracle;
pub mod gradcheck;
