//! Shared oracle and sweep machinery for the integration suites. Each test
//! target pulls in only what it needs.
#![allow(dead_code)]

pub mod attend_reference;
pub mod gradient_sweep;
pub mod linker_world;
pub mod search_reference;
