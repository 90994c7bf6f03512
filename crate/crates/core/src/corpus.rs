//! The bundled vulnerability corpus: nine vulnerable/fixed firmware pairs,
//! their patch scripts, packet inputs and golden output traces.

use std::fmt;
use std::path::PathBuf;

use crate::dispatcher::Strategy;
use crate::machine::Observable;
use crate::patchgen::GlobalChangeKind;

/// Packet loop every scenario links against.
pub const COMMON: &str = include_str!("../corpus/common.s");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Category {
    OutOfBoundsRead,
    MissingBoundsCheck,
    IntegerOverflow,
    LogicBug,
    MacroConstant,
    GlobalSizeIncrease,
    GlobalValueChange,
    GlobalRemoval,
    GlobalAddition,
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Category::OutOfBoundsRead => "out-of-bounds read",
            Category::MissingBoundsCheck => "missing bounds check",
            Category::IntegerOverflow => "integer overflow",
            Category::LogicBug => "logic bug",
            Category::MacroConstant => "macro constant",
            Category::GlobalSizeIncrease => "global size increase",
            Category::GlobalValueChange => "global value change",
            Category::GlobalRemoval => "global removal",
            Category::GlobalAddition => "global addition",
        })
    }
}

/// How the code part of a repair is produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodePlan {
    /// Patch the first divergence of `function`.
    Divergence {
        function: &'static str,
        vars: &'static [&'static str],
    },
    /// One body shared by every expansion site of a macro.
    MacroSites {
        name: &'static str,
        vars: &'static [&'static str],
    },
    /// Only data changes (plus any generated relocation patches).
    DataOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GlobalSpec {
    pub kind: GlobalChangeKind,
    pub name: &'static str,
}

/// Return strategy each shipped patch is expected to use.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpectedStrategy {
    Pass,
    RedirectSkip,
    RedirectCaller,
    None,
}

impl ExpectedStrategy {
    pub fn matches(self, s: Strategy) -> bool {
        matches!(
            (self, s),
            (ExpectedStrategy::Pass, Strategy::Pass)
                | (ExpectedStrategy::RedirectSkip, Strategy::RedirectSkip(_))
                | (ExpectedStrategy::RedirectCaller, Strategy::RedirectCaller(_))
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Scenario {
    pub name: &'static str,
    pub category: Category,
    pub vuln: &'static str,
    pub fixed: &'static str,
    pub patch: Option<&'static str>,
    pub code: CodePlan,
    pub global: Option<GlobalSpec>,
    pub expected: ExpectedStrategy,
    benign: &'static str,
    exploit: &'static str,
}

macro_rules! files {
    ($dir:literal) => {
        (
            include_str!(concat!("../corpus/", $dir, "/vuln.s")),
            include_str!(concat!("../corpus/", $dir, "/fixed.s")),
            include_str!(concat!("../corpus/", $dir, "/benign.in")),
            include_str!(concat!("../corpus/", $dir, "/exploit.in")),
        )
    };
}

fn scenario(
    name: &'static str,
    category: Category,
    (vuln, fixed, benign, exploit): (&'static str, &'static str, &'static str, &'static str),
    patch: Option<&'static str>,
    code: CodePlan,
    global: Option<GlobalSpec>,
    expected: ExpectedStrategy,
) -> Scenario {
    Scenario {
        name,
        category,
        vuln,
        fixed,
        patch,
        code,
        global,
        expected,
        benign,
        exploit,
    }
}

/// Every bundled scenario, in a fixed order.
pub fn all() -> Vec<Scenario> {
    use CodePlan::*;
    use ExpectedStrategy as E;
    let process = |vars| Divergence {
        function: "process",
        vars,
    };
    let g = |kind, name| Some(GlobalSpec { kind, name });
    vec![
        scenario(
            "oob_read",
            Category::OutOfBoundsRead,
            files!("oob_read"),
            Some(include_str!("../corpus/oob_read/patch.ps")),
            process(&["hdr", "len", "buf"]),
            None,
            E::RedirectCaller,
        ),
        scenario(
            "missing_bounds",
            Category::MissingBoundsCheck,
            files!("missing_bounds"),
            Some(include_str!("../corpus/missing_bounds/patch.ps")),
            process(&["idx"]),
            None,
            E::RedirectSkip,
        ),
        scenario(
            "integer_overflow",
            Category::IntegerOverflow,
            files!("integer_overflow"),
            Some(include_str!("../corpus/integer_overflow/patch.ps")),
            process(&["a", "b"]),
            None,
            E::Pass,
        ),
        scenario(
            "logic_bug",
            Category::LogicBug,
            files!("logic_bug"),
            Some(include_str!("../corpus/logic_bug/patch.ps")),
            process(&["role"]),
            None,
            E::Pass,
        ),
        scenario(
            "macro_const",
            Category::MacroConstant,
            files!("macro_const"),
            Some(include_str!("../corpus/macro_const/patch.ps")),
            MacroSites {
                name: "MAX_REC",
                vars: &["n"],
            },
            None,
            E::Pass,
        ),
        scenario(
            "global_size",
            Category::GlobalSizeIncrease,
            files!("global_size"),
            None,
            DataOnly,
            g(GlobalChangeKind::SizeIncrease, "name"),
            E::RedirectSkip,
        ),
        scenario(
            "global_value",
            Category::GlobalValueChange,
            files!("global_value"),
            None,
            DataOnly,
            g(GlobalChangeKind::ValueChange, "max_len"),
            E::None,
        ),
        scenario(
            "global_removed",
            Category::GlobalRemoval,
            files!("global_removed"),
            Some(include_str!("../corpus/global_removed/patch.ps")),
            process(&[]),
            g(GlobalChangeKind::Removal, "dbg_mode"),
            E::RedirectSkip,
        ),
        scenario(
            "global_added",
            Category::GlobalAddition,
            files!("global_added"),
            Some(include_str!("../corpus/global_added/patch.ps")),
            process(&["pin_ok"]),
            g(GlobalChangeKind::Addition, "fails"),
            E::RedirectCaller,
        ),
    ]
}

pub fn by_name(name: &str) -> Option<Scenario> {
    all().into_iter().find(|s| s.name == name)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InputKind {
    Benign,
    Exploit,
}

impl InputKind {
    pub const ALL: [InputKind; 2] = [InputKind::Benign, InputKind::Exploit];

    pub fn name(self) -> &'static str {
        match self {
            InputKind::Benign => "benign",
            InputKind::Exploit => "exploit",
        }
    }
}

impl Scenario {
    /// Complete firmware source: the shared loop followed by the scenario.
    pub fn source(&self, fixed: bool) -> String {
        format!("{COMMON}\n{}", if fixed { self.fixed } else { self.vuln })
    }

    pub fn input(&self, kind: InputKind) -> Vec<u8> {
        parse_hex(match kind {
            InputKind::Benign => self.benign,
            InputKind::Exploit => self.exploit,
        })
        .expect("bundled inputs are valid hex")
    }

    pub fn golden_path(&self, kind: InputKind) -> PathBuf {
        corpus_dir()
            .join(self.name)
            .join("golden")
            .join(format!("{}.trace", kind.name()))
    }
}

/// Location of the corpus in the source tree.
pub fn corpus_dir() -> PathBuf {
    PathBuf::from(concat!(env!("CARGO_MANIFEST_DIR"), "/corpus"))
}

/// Whitespace-separated hex bytes; `#` starts a comment.
pub fn parse_hex(text: &str) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split_whitespace() {
            out.push(u8::from_str_radix(tok, 16).map_err(|_| format!("bad hex byte `{tok}`"))?);
        }
    }
    Ok(out)
}

/// Golden trace text: one observable per line.
pub fn format_observables(obs: &[Observable]) -> String {
    let mut s = String::new();
    for o in obs {
        match o {
            Observable::Output(b) => s.push_str(&format!("OUT {b:02x}\n")),
            Observable::WatchdogReset => s.push_str("WDT_RESET\n"),
            Observable::Fault => s.push_str("FAULT\n"),
        }
    }
    s
}

pub fn parse_observables(text: &str) -> Result<Vec<Observable>, String> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let mut it = l.split_whitespace();
            match (it.next(), it.next()) {
                (Some("OUT"), Some(b)) => u8::from_str_radix(b, 16)
                    .map(Observable::Output)
                    .map_err(|_| format!("bad byte in `{l}`")),
                (Some("WDT_RESET"), None) => Ok(Observable::WatchdogReset),
                (Some("FAULT"), None) => Ok(Observable::Fault),
                _ => Err(format!("bad trace line `{l}`")),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hex_and_trace_text() {
        assert_eq!(parse_hex("01 ff # x\n 0a").unwrap(), vec![1, 0xff, 10]);
        assert!(parse_hex("zz").is_err());
        let obs = vec![Observable::Output(0x41), Observable::WatchdogReset, Observable::Fault];
        assert_eq!(parse_observables(&format_observables(&obs)).unwrap(), obs);
    }

    #[test]
    fn nine_scenarios_cover_nine_categories() {
        let all = all();
        assert_eq!(all.len(), 9);
        let mut cats: Vec<_> = all.iter().map(|s| s.category).collect();
        cats.dedup();
        assert_eq!(cats.len(), 9);
    }
}
