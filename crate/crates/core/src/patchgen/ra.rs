//! Resume-address arithmetic for the three return strategies.

use thiserror::Error;

use crate::analysis::diff::FuncDiff;
use crate::analysis::sidecar::DebugSidecar;
use crate::dispatcher::Strategy;
use crate::image::FirmwareImage;
use crate::patchgen::script::ReturnKind;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RaError {
    #[error("redirect-skip needs the diff of the vulnerable region")]
    MissingDiff,
    #[error("redirect-skip over an empty region at {0:#010x} would re-trigger forever")]
    EmptySkip(u32),
    #[error("no function with a return sequence contains {0:#010x}")]
    MissingReturnAddr(u32),
    #[error("update point {0:#010x} does not decode")]
    Undecodable(u32),
}

/// Absolute resume address for `kind` at `update_addr`.
pub fn compute_ra(
    kind: ReturnKind,
    update_addr: u32,
    image: &FirmwareImage,
    sidecar: &DebugSidecar,
    diff: Option<&FuncDiff>,
) -> Result<u32, RaError> {
    match kind {
        ReturnKind::Pass => image
            .instr_length_at(update_addr)
            .map(|n| update_addr + n)
            .map_err(|_| RaError::Undecodable(update_addr)),
        ReturnKind::RedirectSkip => {
            let d = diff.ok_or(RaError::MissingDiff)?;
            if d.old_len == 0 {
                return Err(RaError::EmptySkip(update_addr));
            }
            Ok(update_addr + d.old_len)
        }
        ReturnKind::RedirectCaller => sidecar
            .function_at(update_addr)
            .map(|f| f.ret_addr)
            .ok_or(RaError::MissingReturnAddr(update_addr)),
    }
}

/// Resume addresses available to one patch. Missing entries make the
/// matching `return_*` statement a compile error.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RaTargets {
    pub update_addr: u32,
    pub pass: Option<u32>,
    pub skip: Option<u32>,
    pub caller: Option<u32>,
}

impl RaTargets {
    /// Every strategy that can be resolved at `update_addr`.
    pub fn resolve(
        update_addr: u32,
        image: &FirmwareImage,
        sidecar: &DebugSidecar,
        diff: Option<&FuncDiff>,
    ) -> Self {
        let get = |k| compute_ra(k, update_addr, image, sidecar, diff).ok();
        RaTargets {
            update_addr,
            pass: get(ReturnKind::Pass),
            skip: get(ReturnKind::RedirectSkip),
            caller: get(ReturnKind::RedirectCaller),
        }
    }

    pub fn with_skip_len(mut self, len: u32) -> Self {
        self.skip = (len > 0).then_some(self.update_addr + len);
        self
    }

    pub fn target(&self, kind: ReturnKind) -> Result<u32, RaError> {
        match kind {
            ReturnKind::Pass => self.pass.ok_or(RaError::Undecodable(self.update_addr)),
            ReturnKind::RedirectSkip => self.skip.ok_or(RaError::MissingDiff),
            ReturnKind::RedirectCaller => self
                .caller
                .ok_or(RaError::MissingReturnAddr(self.update_addr)),
        }
    }

    /// Signed distance from the update point, added to the saved ra.
    pub fn delta(&self, kind: ReturnKind) -> Result<i32, RaError> {
        Ok(self.target(kind)?.wrapping_sub(self.update_addr) as i32)
    }

    pub fn strategy(&self, kind: ReturnKind) -> Result<Strategy, RaError> {
        Ok(match kind {
            ReturnKind::Pass => Strategy::Pass,
            ReturnKind::RedirectSkip => {
                Strategy::RedirectSkip(self.target(kind)? - self.update_addr)
            }
            ReturnKind::RedirectCaller => Strategy::RedirectCaller(self.target(kind)?),
        })
    }
}
