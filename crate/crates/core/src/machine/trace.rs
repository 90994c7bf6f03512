use std::fmt;

/// Exception causes; the discriminant indexes the vector table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Cause {
    SwBreak = 0,
    HwBreak = 1,
    Hook = 2,
    WatchdogReset = 3,
    Fault = 4,
}

impl Cause {
    pub fn from_u32(v: u32) -> Option<Cause> {
        Some(match v {
            0 => Cause::SwBreak,
            1 => Cause::HwBreak,
            2 => Cause::Hook,
            3 => Cause::WatchdogReset,
            4 => Cause::Fault,
            _ => return None,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FaultKind {
    Decode,
    FlashWrite,
    Unmapped,
    NotExecutable,
    Misaligned,
    NestingOverflow,
    NoVector,
    BadEret,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Event {
    Trap { cause: Cause, pc: u32 },
    Output(u8),
    Idle { pc: u32 },
    WatchdogReset,
    Fault { pc: u32, kind: FaultKind },
    /// Host-side probe: execution reached a watched address.
    Reached(u32),
}

/// Externally visible behavior, with timing stripped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Observable {
    Output(u8),
    WatchdogReset,
    Fault,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub events: Vec<(u64, Event)>,
}

impl Trace {
    pub fn push(&mut self, cycle: u64, event: Event) {
        self.events.push((cycle, event));
    }

    pub fn extend(&mut self, other: Trace) {
        self.events.extend(other.events);
    }

    pub fn output_bytes(&self) -> Vec<u8> {
        self.events
            .iter()
            .filter_map(|(_, e)| match e {
                Event::Output(b) => Some(*b),
                _ => None,
            })
            .collect()
    }

    pub fn observable(&self) -> Vec<Observable> {
        self.events
            .iter()
            .filter_map(|(_, e)| match e {
                Event::Output(b) => Some(Observable::Output(*b)),
                Event::WatchdogReset => Some(Observable::WatchdogReset),
                Event::Fault { .. } => Some(Observable::Fault),
                _ => None,
            })
            .collect()
    }

    pub fn traps(&self) -> impl Iterator<Item = (u64, Cause, u32)> + '_ {
        self.events.iter().filter_map(|(c, e)| match e {
            Event::Trap { cause, pc } => Some((*c, *cause, *pc)),
            _ => None,
        })
    }

    /// Cycle stamps at which `addr` was reached.
    pub fn reached(&self, addr: u32) -> Vec<u64> {
        self.events
            .iter()
            .filter_map(|(c, e)| matches!(e, Event::Reached(a) if *a == addr).then_some(*c))
            .collect()
    }

    pub fn has_watchdog_reset(&self) -> bool {
        self.events
            .iter()
            .any(|(_, e)| matches!(e, Event::WatchdogReset))
    }

    pub fn has_fault(&self) -> bool {
        self.events
            .iter()
            .any(|(_, e)| matches!(e, Event::Fault { .. }))
    }
}

/// Text form: one `cycle event` pair per line, probes elided.
impl fmt::Display for Trace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (c, e) in &self.events {
            match e {
                Event::Trap { cause, pc } => writeln!(f, "{c} TRAP {cause:?} {pc:#010x}")?,
                Event::Output(b) => writeln!(f, "{c} OUT {b:02x}")?,
                Event::Idle { pc } => writeln!(f, "{c} IDLE {pc:#010x}")?,
                Event::WatchdogReset => writeln!(f, "{c} WDT_RESET")?,
                Event::Fault { pc, kind } => writeln!(f, "{c} FAULT {kind:?} {pc:#010x}")?,
                Event::Reached(_) => {}
            }
        }
        Ok(())
    }
}
