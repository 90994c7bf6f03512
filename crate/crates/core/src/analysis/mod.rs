//! Host-side localization and variable mapping.

pub mod dataflow;
pub mod diff;
pub mod mapping;
pub mod sidecar;
pub mod update_point;
