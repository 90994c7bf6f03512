use proptest::prelude::*;

use spatch::corpus;
use spatch::dispatcher::Strategy as Resume;
use spatch::isa::{encode_all, BranchCond, ImmOp, Instruction, Reg, RegOp};
use spatch::layout;
use spatch::machine::{ArchProfile, Machine, Stop};
use spatch::patchgen::{LoopAnnotation, PatchBinary};
use spatch::scenario;
use spatch::verifier::{admit, structural_check, worst_case_cycles, Budget, Reason, TimingModel};

/// Loop counter; the generated bodies never touch it.
const COUNTER: u8 = 9;

#[derive(Clone, Copy, Debug)]
enum Piece {
    Alu(RegOp, u8, u8, u8),
    Imm(ImmOp, u8, u8, i32),
    /// Forward branch skipping the next `skip` pieces of the same block.
    Skip(BranchCond, u8, u8, usize),
}

fn work_reg() -> impl Strategy<Value = u8> {
    3u8..9
}

fn piece() -> impl Strategy<Value = Piece> {
    let regop = prop_oneof![Just(RegOp::Add), Just(RegOp::Sub), Just(RegOp::Xor), Just(RegOp::Slt)];
    let immop = prop_oneof![Just(ImmOp::Addi), Just(ImmOp::Xori), Just(ImmOp::Andi)];
    let cond = prop_oneof![Just(BranchCond::Eq), Just(BranchCond::Ne), Just(BranchCond::Ltu), Just(BranchCond::Geu)];
    prop_oneof![
        (regop, work_reg(), work_reg(), work_reg()).prop_map(|(o, a, b, c)| Piece::Alu(o, a, b, c)),
        (immop, work_reg(), work_reg(), -64i32..64).prop_map(|(o, a, b, i)| Piece::Imm(o, a, b, i)),
        (cond, work_reg(), work_reg(), 0usize..4).prop_map(|(c, a, b, s)| Piece::Skip(c, a, b, s)),
    ]
}

fn lower(block: &[Piece]) -> Vec<Instruction> {
    let r = Reg::r;
    let n = block.len();
    block
        .iter()
        .enumerate()
        .map(|(i, p)| match *p {
            Piece::Alu(op, d, a, b) => Instruction::Op { op, rd: r(d), rs1: r(a), rs2: r(b) },
            Piece::Imm(op, d, a, imm) => Instruction::OpImm { op, rd: r(d), rs1: r(a), imm },
            Piece::Skip(cond, a, b, s) => {
                let s = s.min(n - i - 1) as i32;
                Instruction::Branch { cond, rs1: r(a), rs2: r(b), offset: 4 * (s + 1) }
            }
        })
        .collect()
}

/// prefix, optional counted loop around `body`, suffix, then the epilogue.
fn program(prefix: &[Piece], body: &[Piece], bound: u32, suffix: &[Piece]) -> PatchBinary {
    let r = Reg::r;
    let mut code = lower(prefix);
    let mut annotations = Vec::new();
    if bound > 0 {
        code.push(Instruction::OpImm { op: ImmOp::Addi, rd: r(COUNTER), rs1: r(0), imm: bound as i32 });
        let head = 4 * code.len() as u32;
        code.extend(lower(body));
        code.push(Instruction::OpImm { op: ImmOp::Addi, rd: r(COUNTER), rs1: r(COUNTER), imm: -1 });
        let backedge = 4 * code.len() as u32;
        code.push(Instruction::Branch {
            cond: BranchCond::Ne,
            rs1: r(COUNTER),
            rs2: r(0),
            offset: head as i32 - backedge as i32,
        });
        annotations.push(LoopAnnotation { head, backedge, bound });
    }
    code.extend(lower(suffix));
    code.push(Instruction::Nop);
    code.push(Instruction::TRAMPOLINE);
    PatchBinary {
        code: encode_all(&code).unwrap(),
        annotations,
        strategy: Resume::Pass,
        worst_case_cycles: None,
    }
}

fn machine() -> Machine {
    let sc = corpus::by_name("integer_overflow").unwrap();
    let b = scenario::build(&sc, &ArchProfile::soft16(), layout::SRAM_TEXT_BASE).unwrap();
    scenario::boot(&b.vuln).unwrap().machine
}

/// Runs the patch from PATCH_BASE to its trampoline; returns cycles spent.
fn execute(m: &mut Machine, p: &PatchBinary, regs: &[u32; 6]) -> u64 {
    m.write_bytes(layout::PATCH_BASE, &p.code).unwrap();
    for (i, v) in regs.iter().enumerate() {
        m.regs[3 + i] = *v;
    }
    m.pc = layout::PATCH_BASE;
    let exit = layout::PATCH_BASE + p.size() - 4;
    let c0 = m.cycles;
    m.run(Stop::pc(exit, 1_000_000));
    assert_eq!(m.pc, exit, "patch did not reach its trampoline");
    m.cycles - c0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    /// The static bound covers every concrete run, and is tight for code
    /// without data-dependent branches.
    #[test]
    fn worst_case_bounds_execution(
        prefix in proptest::collection::vec(piece(), 0..8),
        body in proptest::collection::vec(piece(), 0..6),
        bound in 0u32..20,
        suffix in proptest::collection::vec(piece(), 0..8),
        states in proptest::collection::vec(any::<[u32; 6]>(), 1..6),
    ) {
        let p = program(&prefix, &body, bound, &suffix);
        prop_assert_eq!(structural_check(&p), Ok(()));
        let wc = worst_case_cycles(&p).unwrap();
        let mut m = machine();
        let per = m.profile.instr_cost;
        let mut worst_seen = 0;
        for s in &states {
            // the run stops before the trampoline, which the bound counts
            let ran = execute(&mut m, &p, s) + per;
            prop_assert!(ran <= wc * per, "ran {} > bound {}", ran, wc * per);
            worst_seen = worst_seen.max(ran);
        }
        let branch_free = |b: &[Piece]| b.iter().all(|x| !matches!(x, Piece::Skip(..)));
        if branch_free(&prefix) && branch_free(&body) && branch_free(&suffix) {
            prop_assert_eq!(worst_seen, wc * per);
        }
    }
}

#[test]
fn loop_without_annotation_is_unbounded() {
    let mut p = program(&[], &[Piece::Imm(ImmOp::Addi, 3, 3, 1)], 5, &[]);
    p.annotations.clear();
    assert!(matches!(structural_check(&p), Err(Reason::UnboundedLoop { .. })));
}

#[test]
fn control_register_stores_are_refused() {
    let r = Reg::r;
    let code = [
        Instruction::Lui { rd: r(3), imm: layout::MMIO_BASE >> 12 },
        Instruction::Store {
            width: spatch::isa::Width::Word,
            src: r(0),
            base: r(3),
            offset: layout::mmio::BP_ENABLE as i32,
        },
        Instruction::Nop,
        Instruction::TRAMPOLINE,
    ];
    let p = PatchBinary { code: encode_all(&code).unwrap(), annotations: vec![], strategy: Resume::Pass, worst_case_cycles: None };
    assert!(matches!(structural_check(&p), Err(Reason::Dangerous { .. })));
}

#[test]
fn admission_threshold_is_exact() {
    let p = program(&[Piece::Imm(ImmOp::Addi, 3, 3, 1); 10], &[], 0, &[]);
    let wc = worst_case_cycles(&p).unwrap();
    let model = TimingModel { t_trigger: 5, t_exception: 50, t_dispatch_worst: 77, instr_cost: 1 };
    let fixed = 5 + 50 + 77;
    let fits = Budget::new(fixed + wc + 1000, 1000).unwrap();
    assert_eq!(fits.threshold(), fixed + wc);
    assert!(admit(&p, &model, &fits).admitted());
    let tight = Budget::new(fixed + wc - 1 + 1000, 1000).unwrap();
    let v = admit(&p, &model, &tight);
    assert!(matches!(v.reason, Some(Reason::OverBudget { t_total, .. }) if t_total == fixed + wc));
}
