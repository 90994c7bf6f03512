//! Update-point selection: the first divergence of a diffed function, kept
//! only if it passes the placement rules. Never shifted to another address.

use std::fmt;

use crate::analysis::diff::DiffReport;
use crate::analysis::sidecar::DebugSidecar;
use crate::dispatcher::TriggerKind;
use crate::image::FirmwareImage;
use crate::layout;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Rejection {
    /// Inside the prologue or epilogue, or the instruction moves sp.
    StackOp,
    /// Software breakpoints cannot be planted in FLASH.
    FlashSwBreak,
    /// Inside the update service itself.
    ServiceRange,
    VarNotLive(String),
    /// Hook trigger requested where no hook stub guards the address.
    NotHookSite,
    NotInFunction,
    NoDivergence(String),
    Undecodable,
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Rejection::StackOp => f.write_str("StackOp"),
            Rejection::FlashSwBreak => f.write_str("FlashSwBreak"),
            Rejection::ServiceRange => f.write_str("ServiceRange"),
            Rejection::VarNotLive(v) => write!(f, "VarNotLive({v})"),
            Rejection::NotHookSite => f.write_str("NotHookSite"),
            Rejection::NotInFunction => f.write_str("NotInFunction"),
            Rejection::NoDivergence(func) => write!(f, "NoDivergence({func})"),
            Rejection::Undecodable => f.write_str("Undecodable"),
        }
    }
}

impl std::error::Error for Rejection {}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdatePoint {
    pub addr: u32,
    pub function: String,
    pub instr_len: u32,
    pub trigger: TriggerKind,
}

/// Picks the update point for `function` from `diff`.
pub fn select_update_point(
    diff: &DiffReport,
    function: &str,
    sidecar: &DebugSidecar,
    patch_vars: &[&str],
    trigger: TriggerKind,
    image: &FirmwareImage,
) -> Result<UpdatePoint, Rejection> {
    let d = diff
        .function(function)
        .ok_or_else(|| Rejection::NoDivergence(function.to_string()))?;
    check_update_point(d.first_divergence_addr, sidecar, patch_vars, trigger, image)
}

/// Applies the placement rules to an explicit address. Rules are checked in
/// a fixed order so the reported reason is deterministic.
pub fn check_update_point(
    addr: u32,
    sidecar: &DebugSidecar,
    patch_vars: &[&str],
    trigger: TriggerKind,
    image: &FirmwareImage,
) -> Result<UpdatePoint, Rejection> {
    let func = sidecar.function_at(addr).ok_or(Rejection::NotInFunction)?;
    let instr = image.decode_at(addr).map_err(|_| Rejection::Undecodable)?;
    let in_range = |r: (u32, u32)| (r.0..r.1).contains(&addr);
    if in_range(func.prologue) || in_range(func.epilogue) || instr.writes_sp() {
        return Err(Rejection::StackOp);
    }
    if trigger == TriggerKind::SwBp && layout::in_flash(addr) {
        return Err(Rejection::FlashSwBreak);
    }
    if sidecar.in_service(addr) {
        return Err(Rejection::ServiceRange);
    }
    let mut vars: Vec<&str> = patch_vars.to_vec();
    vars.sort_unstable();
    vars.dedup();
    for v in vars {
        if !sidecar.vars.iter().any(|x| x.name == v && x.covers(addr)) {
            return Err(Rejection::VarNotLive(v.to_string()));
        }
    }
    if trigger == TriggerKind::Hook && sidecar.hook_at(addr).is_none() {
        return Err(Rejection::NotHookSite);
    }
    Ok(UpdatePoint {
        addr,
        function: func.name.clone(),
        instr_len: instr.len(),
        trigger,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::diff::bindiff;
    use crate::asm;

    fn build(base: u32, fixed: bool) -> (FirmwareImage, DebugSidecar) {
        let extra = if fixed { "bltu r6, r5, out" } else { "" };
        let src = format!(
            "
            .section .text code {base:#x}
            .func f
                addi sp, sp, -4
            .endprologue
            .var len r5
                addi r5, r0, 8
            .hook 0
                {extra}
                add r7, r5, r6
            out:
            .endvar len
            .epilogue
                addi sp, sp, 4
                jalr r0, r1, 0
            .endfunc
            "
        );
        let a = asm::assemble(&src, &[]).unwrap();
        (a.to_image(), a.sidecar)
    }

    #[test]
    fn accepts_live_point_and_orders_rules() {
        let (a, s) = build(layout::SRAM_TEXT_BASE, false);
        let (b, t) = build(layout::SRAM_TEXT_BASE, true);
        let d = bindiff(&a, &b, &s, &t).unwrap();
        let u = select_update_point(&d, "f", &s, &["len"], TriggerKind::SwBp, &a).unwrap();
        assert_eq!(Some(u.addr), s.hooks.first().map(|h| h.site));
        assert_eq!(u.instr_len, 4);
        let hook = select_update_point(&d, "f", &s, &["len"], TriggerKind::Hook, &a);
        assert!(hook.is_ok());
        assert_eq!(
            select_update_point(&d, "f", &s, &["len", "nope"], TriggerKind::HwBp, &a),
            Err(Rejection::VarNotLive("nope".into()))
        );
        assert_eq!(
            select_update_point(&d, "f", &s, &["nope", "len"], TriggerKind::HwBp, &a),
            Err(Rejection::VarNotLive("nope".into()))
        );
    }

    #[test]
    fn prologue_is_stack_op() {
        let (a, s) = build(layout::SRAM_TEXT_BASE, false);
        let entry = s.functions[0].entry;
        assert_eq!(
            check_update_point(entry, &s, &[], TriggerKind::HwBp, &a),
            Err(Rejection::StackOp)
        );
    }

    #[test]
    fn flash_text_rejects_only_software_breakpoints() {
        let (a, s) = build(layout::FLASH_TEXT_BASE, false);
        let (b, t) = build(layout::FLASH_TEXT_BASE, true);
        let d = bindiff(&a, &b, &s, &t).unwrap();
        assert_eq!(
            select_update_point(&d, "f", &s, &[], TriggerKind::SwBp, &a),
            Err(Rejection::FlashSwBreak)
        );
        assert!(select_update_point(&d, "f", &s, &[], TriggerKind::HwBp, &a).is_ok());
    }
}
