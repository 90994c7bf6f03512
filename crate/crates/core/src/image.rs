//! Firmware container (`SPFW`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPFW" version:u16 entry:u32 msp_init:u32 wdt:u32 count:u16
//! count × { name:[u8;8] kind:u8 load_addr:u32 size:u32 bytes:[u8;size] }
//! ```
//!
//! Sections of kind `Reserved` carry no bytes; `size` is the reserved length.

use thiserror::Error;

use crate::isa::{self, Instruction, IsaError};

pub const MAGIC: &[u8; 4] = b"SPFW";
pub const VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported container version {0}")]
    BadVersion(u16),
    #[error("container truncated")]
    Truncated,
    #[error("unknown section kind {0}")]
    BadKind(u8),
    #[error("section name `{0}` longer than 8 bytes")]
    NameTooLong(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SectionKind {
    Code = 1,
    Data = 2,
    Reserved = 3,
}

impl SectionKind {
    fn from_u8(v: u8) -> Result<Self, ImageError> {
        match v {
            1 => Ok(SectionKind::Code),
            2 => Ok(SectionKind::Data),
            3 => Ok(SectionKind::Reserved),
            _ => Err(ImageError::BadKind(v)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub kind: SectionKind,
    pub load_addr: u32,
    pub size: u32,
    /// Empty for reserved sections.
    pub bytes: Vec<u8>,
}

impl Section {
    pub fn new(name: &str, kind: SectionKind, load_addr: u32, bytes: Vec<u8>) -> Self {
        Section {
            name: name.to_string(),
            kind,
            load_addr,
            size: bytes.len() as u32,
            bytes,
        }
    }

    pub fn reserved(name: &str, load_addr: u32, size: u32) -> Self {
        Section {
            name: name.to_string(),
            kind: SectionKind::Reserved,
            load_addr,
            size,
            bytes: Vec::new(),
        }
    }

    pub fn end(&self) -> u32 {
        self.load_addr + self.size
    }

    pub fn contains(&self, addr: u32) -> bool {
        (self.load_addr..self.end()).contains(&addr)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FirmwareImage {
    pub entry: u32,
    pub msp_init: u32,
    pub wdt: u32,
    pub sections: Vec<Section>,
}

impl FirmwareImage {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn code_sections(&self) -> impl Iterator<Item = &Section> {
        self.sections.iter().filter(|s| s.kind == SectionKind::Code)
    }

    /// The code section holding `addr`.
    pub fn code_section_at(&self, addr: u32) -> Option<&Section> {
        self.code_sections().find(|s| s.contains(addr))
    }

    /// Reads initialized bytes from whichever section holds them.
    pub fn read(&self, addr: u32, len: u32) -> Option<&[u8]> {
        self.sections
            .iter()
            .filter(|s| s.kind != SectionKind::Reserved)
            .find(|s| s.contains(addr) && addr + len <= s.end())
            .map(|s| {
                let off = (addr - s.load_addr) as usize;
                &s.bytes[off..off + len as usize]
            })
    }

    pub fn read_u32(&self, addr: u32) -> Option<u32> {
        self.read(addr, 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    /// Length of the instruction at `addr` from its first byte alone.
    pub fn instr_length_at(&self, addr: u32) -> Result<u32, IsaError> {
        if addr % 2 != 0 {
            return Err(IsaError::Misaligned(addr));
        }
        let sec = self
            .code_section_at(addr)
            .ok_or(IsaError::OutOfSection(addr))?;
        let b = sec.bytes[(addr - sec.load_addr) as usize];
        Ok(isa::length_from_first_byte(b))
    }

    pub fn decode_at(&self, addr: u32) -> Result<Instruction, IsaError> {
        if addr % 2 != 0 {
            return Err(IsaError::Misaligned(addr));
        }
        let sec = self
            .code_section_at(addr)
            .ok_or(IsaError::OutOfSection(addr))?;
        isa::decode(&sec.bytes[(addr - sec.load_addr) as usize..])
    }

    /// Decodes `[lo, hi)` as a straight instruction run.
    pub fn decode_range(&self, lo: u32, hi: u32) -> Result<Vec<(u32, Instruction)>, IsaError> {
        let sec = self.code_section_at(lo).ok_or(IsaError::OutOfSection(lo))?;
        if hi > sec.end() || hi < lo {
            return Err(IsaError::OutOfSection(hi));
        }
        let start = (lo - sec.load_addr) as usize;
        let end = (hi - sec.load_addr) as usize;
        isa::decode_all(lo, &sec.bytes[start..end])
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ImageError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.entry.to_le_bytes());
        out.extend_from_slice(&self.msp_init.to_le_bytes());
        out.extend_from_slice(&self.wdt.to_le_bytes());
        out.extend_from_slice(&(self.sections.len() as u16).to_le_bytes());
        for s in &self.sections {
            if s.name.len() > 8 {
                return Err(ImageError::NameTooLong(s.name.clone()));
            }
            let mut name = [0u8; 8];
            name[..s.name.len()].copy_from_slice(s.name.as_bytes());
            out.extend_from_slice(&name);
            out.push(s.kind as u8);
            out.extend_from_slice(&s.load_addr.to_le_bytes());
            out.extend_from_slice(&s.size.to_le_bytes());
            if s.kind != SectionKind::Reserved {
                out.extend_from_slice(&s.bytes);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ImageError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(ImageError::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(ImageError::BadVersion(version));
        }
        let entry = r.u32()?;
        let msp_init = r.u32()?;
        let wdt = r.u32()?;
        let count = r.u16()?;
        let mut sections = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let raw = r.take(8)?;
            let end = raw.iter().position(|&b| b == 0).unwrap_or(8);
            let name = String::from_utf8_lossy(&raw[..end]).into_owned();
            let kind = SectionKind::from_u8(r.u8()?)?;
            let load_addr = r.u32()?;
            let size = r.u32()?;
            let bytes = if kind == SectionKind::Reserved {
                Vec::new()
            } else {
                r.take(size as usize)?.to_vec()
            };
            sections.push(Section {
                name,
                kind,
                load_addr,
                size,
                bytes,
            });
        }
        Ok(FirmwareImage {
            entry,
            msp_init,
            wdt,
            sections,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ImageError> {
        let end = self.pos.checked_add(n).ok_or(ImageError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(ImageError::Truncated)?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, ImageError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, ImageError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }
    fn u32(&mut self) -> Result<u32, ImageError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::isa::{encode_all, Instruction, Reg};
    use crate::layout::*;

    fn sample() -> FirmwareImage {
        let code = encode_all(&[
            Instruction::CMv {
                rd: Reg::r(3),
                rs: Reg::r(4),
            },
            Instruction::Load {
                width: crate::isa::Width::Word,
                rd: Reg::r(5),
                base: Reg::SP,
                offset: 8,
            },
            Instruction::Idle,
        ])
        .unwrap();
        FirmwareImage {
            entry: FLASH_TEXT_BASE,
            msp_init: MSP_TOP,
            wdt: 1000,
            sections: vec![
                Section::new(".text", SectionKind::Code, FLASH_TEXT_BASE, code),
                Section::new(".data", SectionKind::Data, DATA_BASE, vec![1, 2, 3, 4]),
                Section::reserved(".patch", PATCH_BASE, PATCH_SIZE),
            ],
        }
    }

    #[test]
    fn container_round_trip() {
        let img = sample();
        let bytes = img.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SPFW");
        assert_eq!(FirmwareImage::from_bytes(&bytes).unwrap(), img);
    }

    #[test]
    fn length_probe() {
        let img = sample();
        assert_eq!(img.instr_length_at(FLASH_TEXT_BASE).unwrap(), 2);
        assert_eq!(img.instr_length_at(FLASH_TEXT_BASE + 2).unwrap(), 4);
        assert_eq!(
            img.instr_length_at(FLASH_TEXT_BASE + 1),
            Err(IsaError::Misaligned(FLASH_TEXT_BASE + 1))
        );
        assert!(matches!(
            img.instr_length_at(DATA_BASE),
            Err(IsaError::OutOfSection(_))
        ));
    }

    #[test]
    fn truncated_container() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(
            FirmwareImage::from_bytes(&bytes[..bytes.len() - 1]),
            Err(ImageError::Truncated)
        );
        assert_eq!(
            FirmwareImage::from_bytes(b"XXXX"),
            Err(ImageError::BadMagic)
        );
    }
}
