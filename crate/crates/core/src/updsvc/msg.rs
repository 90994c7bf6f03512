//! Protocol messages and their payload encodings. All integers are
//! little-endian.

use thiserror::Error;

use crate::updsvc::frame::{self, Frame, FrameError};

pub mod kind {
    pub const HELLO: u8 = 0x01;
    pub const PATCH_LIST: u8 = 0x02;
    pub const ACK: u8 = 0x03;
    pub const NACK: u8 = 0x04;
    pub const STATUS: u8 = 0x05;
    pub const REMOVE: u8 = 0x06;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NackReason {
    FlashSwBreak = 1,
    TableFull = 2,
    PatchRegionFull = 3,
    NotIdle = 4,
    BadCrc = 5,
    NotFound = 6,
    NoComparator = 7,
    Duplicate = 8,
    Malformed = 9,
    BadTarget = 10,
}

impl NackReason {
    pub fn from_u8(v: u8) -> Option<Self> {
        use NackReason::*;
        Some(match v {
            1 => FlashSwBreak,
            2 => TableFull,
            3 => PatchRegionFull,
            4 => NotIdle,
            5 => BadCrc,
            6 => NotFound,
            7 => NoComparator,
            8 => Duplicate,
            9 => Malformed,
            10 => BadTarget,
            _ => return None,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MsgError {
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("unknown message type {0:#04x}")]
    UnknownKind(u8),
    #[error("malformed {0} payload")]
    Malformed(&'static str),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviceInfo {
    pub profile: String,
    pub table_capacity: u16,
    pub installed: u16,
    pub free_patch_bytes: u32,
    pub free_comparators: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchNode {
    pub update_addr: u32,
    pub patch_addr: u32,
    pub size: u32,
    /// Table flags: trigger in bits 0-1, strategy in bits 2-3.
    pub flags: u8,
    pub strategy_arg: u32,
    /// Hook slot address for hook triggers; zero otherwise.
    pub trigger_arg: u32,
    pub orig_len: u8,
    /// `None` when the node reuses code shipped by an earlier node.
    pub code: Option<Vec<u8>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MemPoke {
    pub addr: u32,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PatchList {
    pub nodes: Vec<PatchNode>,
    pub writes: Vec<MemPoke>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StatusEntry {
    pub update_addr: u32,
    pub patch_addr: u32,
    pub size: u32,
    pub flags: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Message {
    /// Request when empty, device reply otherwise.
    Hello(Option<DeviceInfo>),
    PatchList(PatchList),
    Ack,
    Nack(NackReason),
    Status(Option<Vec<StatusEntry>>),
    /// Original bytes travel with the request so a software breakpoint
    /// can be undone; empty for other triggers.
    Remove { update_addr: u32, original: Vec<u8> },
}

struct W(Vec<u8>);

impl W {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.0.extend(v.to_le_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn bytes16(&mut self, b: &[u8]) {
        self.u16(b.len() as u16);
        self.0.extend(b);
    }
}

struct R<'a> {
    b: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> R<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], MsgError> {
        let s = self
            .b
            .get(self.pos..self.pos + n)
            .ok_or(MsgError::Malformed(self.what))?;
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, MsgError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, MsgError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2")))
    }
    fn u32(&mut self) -> Result<u32, MsgError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }
    fn bytes16(&mut self) -> Result<Vec<u8>, MsgError> {
        let n = self.u16()? as usize;
        Ok(self.take(n)?.to_vec())
    }
    fn done(&self) -> Result<(), MsgError> {
        if self.pos == self.b.len() {
            Ok(())
        } else {
            Err(MsgError::Malformed(self.what))
        }
    }
}

impl Message {
    pub fn kind(&self) -> u8 {
        match self {
            Message::Hello(_) => kind::HELLO,
            Message::PatchList(_) => kind::PATCH_LIST,
            Message::Ack => kind::ACK,
            Message::Nack(_) => kind::NACK,
            Message::Status(_) => kind::STATUS,
            Message::Remove { .. } => kind::REMOVE,
        }
    }

    pub fn payload(&self) -> Vec<u8> {
        let mut w = W(Vec::new());
        match self {
            Message::Hello(None) | Message::Ack | Message::Status(None) => {}
            Message::Hello(Some(i)) => {
                w.bytes16(i.profile.as_bytes());
                w.u16(i.table_capacity);
                w.u16(i.installed);
                w.u32(i.free_patch_bytes);
                w.u8(i.free_comparators);
            }
            Message::PatchList(l) => {
                w.u16(l.nodes.len() as u16);
                for n in &l.nodes {
                    w.u32(n.update_addr);
                    w.u32(n.patch_addr);
                    w.u32(n.size);
                    w.u8(n.flags);
                    w.u32(n.strategy_arg);
                    w.u32(n.trigger_arg);
                    w.u8(n.orig_len);
                    match &n.code {
                        Some(c) => {
                            w.u8(1);
                            w.bytes16(c);
                        }
                        None => w.u8(0),
                    }
                }
                w.u16(l.writes.len() as u16);
                for p in &l.writes {
                    w.u32(p.addr);
                    w.bytes16(&p.bytes);
                }
            }
            Message::Nack(r) => w.u8(*r as u8),
            Message::Status(Some(es)) => {
                w.u16(es.len() as u16);
                for e in es {
                    w.u32(e.update_addr);
                    w.u32(e.patch_addr);
                    w.u32(e.size);
                    w.u8(e.flags);
                }
            }
            Message::Remove {
                update_addr,
                original,
            } => {
                w.u32(*update_addr);
                w.bytes16(original);
            }
        }
        w.0
    }

    pub fn encode(&self) -> Result<Vec<u8>, FrameError> {
        frame::encode_frame(self.kind(), &self.payload())
    }

    pub fn from_frame(f: &Frame) -> Result<Message, MsgError> {
        let p = &f.payload;
        let reader = |what| R { b: p, pos: 0, what };
        let m = match f.kind {
            kind::HELLO if p.is_empty() => Message::Hello(None),
            kind::HELLO => {
                let mut r = reader("HELLO");
                let name = r.bytes16()?;
                let info = DeviceInfo {
                    profile: String::from_utf8(name).map_err(|_| MsgError::Malformed("HELLO"))?,
                    table_capacity: r.u16()?,
                    installed: r.u16()?,
                    free_patch_bytes: r.u32()?,
                    free_comparators: r.u8()?,
                };
                r.done()?;
                Message::Hello(Some(info))
            }
            kind::PATCH_LIST => {
                let mut r = reader("PATCH_LIST");
                let n = r.u16()?;
                let mut nodes = Vec::with_capacity(n.min(64) as usize);
                for _ in 0..n {
                    let update_addr = r.u32()?;
                    let patch_addr = r.u32()?;
                    let size = r.u32()?;
                    let flags = r.u8()?;
                    let strategy_arg = r.u32()?;
                    let trigger_arg = r.u32()?;
                    let orig_len = r.u8()?;
                    let code = match r.u8()? {
                        0 => None,
                        1 => Some(r.bytes16()?),
                        _ => return Err(MsgError::Malformed("PATCH_LIST")),
                    };
                    nodes.push(PatchNode {
                        update_addr,
                        patch_addr,
                        size,
                        flags,
                        strategy_arg,
                        trigger_arg,
                        orig_len,
                        code,
                    });
                }
                let k = r.u16()?;
                let mut writes = Vec::new();
                for _ in 0..k {
                    let addr = r.u32()?;
                    writes.push(MemPoke {
                        addr,
                        bytes: r.bytes16()?,
                    });
                }
                r.done()?;
                Message::PatchList(PatchList { nodes, writes })
            }
            kind::ACK if p.is_empty() => Message::Ack,
            kind::NACK if p.len() == 1 => Message::Nack(
                NackReason::from_u8(p[0]).ok_or(MsgError::Malformed("NACK"))?,
            ),
            kind::STATUS if p.is_empty() => Message::Status(None),
            kind::STATUS => {
                let mut r = reader("STATUS");
                let n = r.u16()?;
                let mut es = Vec::new();
                for _ in 0..n {
                    es.push(StatusEntry {
                        update_addr: r.u32()?,
                        patch_addr: r.u32()?,
                        size: r.u32()?,
                        flags: r.u8()?,
                    });
                }
                r.done()?;
                Message::Status(Some(es))
            }
            kind::REMOVE => {
                let mut r = reader("REMOVE");
                let update_addr = r.u32()?;
                let original = r.bytes16()?;
                r.done()?;
                Message::Remove {
                    update_addr,
                    original,
                }
            }
            kind::ACK => return Err(MsgError::Malformed("ACK")),
            kind::NACK => return Err(MsgError::Malformed("NACK")),
            k => return Err(MsgError::UnknownKind(k)),
        };
        Ok(m)
    }

    pub fn decode(bytes: &[u8]) -> Result<Message, MsgError> {
        let (f, _) = frame::decode_frame(bytes)?;
        Message::from_frame(&f)
    }
}
