//! Exception-driven hot patching for a simulated 32-bit MCU.
//!
//! The pipeline: diff a vulnerable and a fixed firmware build, pick a safe
//! update point, map source variables onto exception stack-frame slots,
//! compile a patch, check it against the watchdog budget, ship it over a
//! framed protocol and run it from the exception handler.

pub mod analysis;
pub mod asm;
pub mod corpus;
pub mod dispatcher;
pub mod frames;
pub mod image;
pub mod isa;
pub mod layout;
pub mod machine;
pub mod measure;
pub mod parallel;
pub mod patchgen;
pub mod runtime;
pub mod scenario;
pub mod updsvc;
pub mod verifier;
