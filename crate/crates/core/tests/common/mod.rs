//! Shared fixtures, independent oracles, and the acceptance checks.
#![allow(dead_code)]

pub mod criteria;
pub mod fixtures;
pub mod oracles;
