use crate::isa::Reg;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stacking {
    Software,
    Hardware,
}

/// Architecture profile: how exception entry saves state and what it costs.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ArchProfile {
    pub name: &'static str,
    pub stacking: Stacking,
    /// Registers pushed by hardware after mepc, in push order.
    pub hw_stacked_set: Vec<Reg>,
    pub dual_stack: bool,
    pub trap_entry_cost: u64,
    pub instr_cost: u64,
    pub hw_bp_count: usize,
}

impl ArchProfile {
    /// Software stacking, single stack.
    pub fn soft16() -> Self {
        ArchProfile {
            name: "soft16",
            stacking: Stacking::Software,
            hw_stacked_set: Vec::new(),
            dual_stack: false,
            trap_entry_cost: 1,
            instr_cost: 1,
            hw_bp_count: 4,
        }
    }

    /// Hardware (lazy) stacking of mepc, r10..r13 with MSP/PSP banking.
    pub fn hard16() -> Self {
        let set: Vec<Reg> = (10..=13).map(Reg::r).collect();
        ArchProfile {
            name: "hard16",
            stacking: Stacking::Hardware,
            trap_entry_cost: 1 + set.len() as u64,
            hw_stacked_set: set,
            dual_stack: true,
            instr_cost: 1,
            hw_bp_count: 4,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "soft16" => Some(Self::soft16()),
            "hard16" => Some(Self::hard16()),
            _ => None,
        }
    }

    pub fn all() -> [ArchProfile; 2] {
        [Self::soft16(), Self::hard16()]
    }

    /// Words pushed by hardware on trap entry (mepc included).
    pub fn hw_frame_words(&self) -> u32 {
        match self.stacking {
            Stacking::Software => 0,
            Stacking::Hardware => 1 + self.hw_stacked_set.len() as u32,
        }
    }

    pub fn is_hw_stacked(&self, r: Reg) -> bool {
        self.stacking == Stacking::Hardware && self.hw_stacked_set.contains(&r)
    }
}
