//! One shared patch body for every expansion site of a macro.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::analysis::mapping::MappingTable;
use crate::analysis::sidecar::DebugSidecar;
use crate::dispatcher::Strategy;
use crate::patchgen::binary::PatchBinary;
use crate::patchgen::lower::{compile, CompileError};
use crate::patchgen::ra::RaTargets;
use crate::patchgen::script::PatchSource;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MacroError {
    #[error("macro `{0}` has no expansion sites")]
    NoSites(String),
    #[error("no mapping table for site {0:#010x}")]
    SiteMappingMissing(u32),
    #[error("site {0:#010x} compiles to a different body; it cannot share one")]
    DivergentSite(u32),
    #[error("site {site:#010x}: {source}")]
    Compile { site: u32, source: CompileError },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MacroExpansion {
    pub body: PatchBinary,
    pub sites: Vec<(u32, Strategy)>,
}

/// Compiles `src` once per site and checks all sites agree byte for byte,
/// so a single copy in `.patch` can serve them.
pub fn expand_macro_sites(
    macro_name: &str,
    sidecar: &DebugSidecar,
    src: &PatchSource,
    per_site: &BTreeMap<u32, (MappingTable, RaTargets)>,
    globals: &BTreeMap<String, u32>,
) -> Result<MacroExpansion, MacroError> {
    let sites = sidecar
        .macro_sites(macro_name)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| MacroError::NoSites(macro_name.to_string()))?;
    let mut body: Option<PatchBinary> = None;
    let mut out = Vec::new();
    for &site in sites {
        let (map, ra) = per_site
            .get(&site)
            .ok_or(MacroError::SiteMappingMissing(site))?;
        let p = compile(src, map, ra, globals).map_err(|source| MacroError::Compile { site, source })?;
        match &body {
            None => body = Some(p.clone()),
            Some(b) if b.code != p.code => return Err(MacroError::DivergentSite(site)),
            Some(_) => {}
        }
        out.push((site, p.strategy));
    }
    Ok(MacroExpansion {
        body: body.expect("at least one site"),
        sites: out,
    })
}
