//! Shared oracles and checkers for the integration tests and the acceptance
//! suite.
#![allow(dead_code)]

pub mod checks;
pub mod grad;
pub mod oracles;
