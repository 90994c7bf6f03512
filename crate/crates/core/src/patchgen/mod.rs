//! Patch generation: PatchScript compilation, resume-address arithmetic,
//! global-variable plans and macro-site expansion.

pub mod binary;
pub mod globals;
pub mod lower;
pub mod macros;
pub mod ra;
pub mod script;

pub use binary::{LoopAnnotation, PatchBinary};
pub use globals::{
    plan_global_change, resolved_globals, GlobalChangeKind, GlobalEditPlan, GlobalError, MemRegion, MemWrite,
    PatchAllocator,
};
pub use lower::{compile, compile_str, CompileError};
pub use macros::{expand_macro_sites, MacroExpansion};
pub use ra::{compute_ra, RaTargets};
pub use script::{PatchSource, ReturnKind};
