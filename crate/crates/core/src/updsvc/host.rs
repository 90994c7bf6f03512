//! Host side: bundles, transports and the synchronous client.

use std::collections::BTreeMap;
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::dispatcher::{Strategy, TriggerKind};
use crate::machine::{Machine, Stop, Trace};
use crate::patchgen::{MemWrite, PatchAllocator};
use crate::runtime::Firmware;
use crate::updsvc::device::DeviceService;
use crate::updsvc::frame::{self, FrameError, HEADER};
use crate::updsvc::msg::{DeviceInfo, MemPoke, Message, MsgError, NackReason, PatchList, PatchNode, StatusEntry};

#[derive(Debug, Error)]
pub enum HostError {
    #[error("transport: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Msg(#[from] MsgError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("device refused: {0:?}")]
    Nack(NackReason),
    #[error("unexpected reply {0:?}")]
    Unexpected(Box<Message>),
    #[error("bundle: {0}")]
    Bundle(String),
}

/// One request/response exchange of raw frames.
pub trait Transport {
    fn transact(&mut self, request: &[u8]) -> io::Result<Vec<u8>>;
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn transact(&mut self, request: &[u8]) -> io::Result<Vec<u8>> {
        (**self).transact(request)
    }
}

/// Reads one whole frame off a stream.
pub fn read_frame<R: Read>(r: &mut R) -> io::Result<Vec<u8>> {
    let mut buf = vec![0u8; HEADER];
    r.read_exact(&mut buf)?;
    let total = frame::frame_len(&buf).expect("header read");
    buf.resize(total, 0);
    r.read_exact(&mut buf[HEADER..])?;
    Ok(buf)
}

/// Framing over any byte stream, such as a TCP socket.
pub struct StreamTransport<S> {
    stream: S,
}

impl<S: Read + Write> StreamTransport<S> {
    pub fn new(stream: S) -> Self {
        StreamTransport { stream }
    }
}

impl<S: Read + Write> Transport for StreamTransport<S> {
    fn transact(&mut self, request: &[u8]) -> io::Result<Vec<u8>> {
        self.stream.write_all(request)?;
        self.stream.flush()?;
        read_frame(&mut self.stream)
    }
}

/// A simulated board: machine plus update service, driven in lock-step.
pub struct SimDevice {
    pub machine: Machine,
    pub service: DeviceService,
}

impl SimDevice {
    pub fn new(fw: &Firmware) -> Result<Self, crate::machine::MachineError> {
        Ok(SimDevice {
            machine: Machine::load_image(&fw.image, fw.profile.clone())?,
            service: DeviceService::new(fw),
        })
    }

    /// Runs until the firmware parks at IDLE.
    pub fn run_to_idle(&mut self, budget: u64) -> Trace {
        self.machine.run(Stop::idle(budget))
    }

    /// Power cycle: code, table and triggers are gone.
    pub fn reset(&mut self) {
        self.machine.reset();
        self.service.power_cycle();
    }
}

impl Transport for SimDevice {
    fn transact(&mut self, request: &[u8]) -> io::Result<Vec<u8>> {
        Ok(self.service.handle_bytes(&mut self.machine, request))
    }
}

/// Serves frames from `stream` until it closes. A frame with a bad magic
/// byte gets a NACK and its header is dropped.
pub fn serve<S: Read + Write>(stream: &mut S, dev: &mut SimDevice) -> io::Result<()> {
    loop {
        let mut head = [0u8; HEADER];
        match stream.read_exact(&mut head) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        }
        let reply = if head[0] != frame::MAGIC {
            Message::Nack(NackReason::Malformed)
                .encode()
                .expect("small frame")
        } else {
            let total = frame::frame_len(&head).expect("full header");
            let mut buf = head.to_vec();
            buf.resize(total, 0);
            stream.read_exact(&mut buf[HEADER..])?;
            dev.transact(&buf)?
        };
        stream.write_all(&reply)?;
        stream.flush()?;
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BundleNode {
    pub update_addr: u32,
    pub trigger: TriggerKind,
    pub strategy: Strategy,
    pub patch_addr: u32,
    pub code: Vec<u8>,
    /// Bytes of the instruction at the update point, kept host-side so a
    /// software breakpoint can be undone.
    pub original: Vec<u8>,
    pub hook_slot: u32,
}

/// Everything one deployment ships.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PatchBundle {
    pub nodes: Vec<BundleNode>,
    pub writes: Vec<MemWrite>,
}

const BUNDLE_MAGIC: &[u8; 4] = b"SPBN";

impl PatchBundle {
    /// Places `code` in `.patch` unless an identical payload is already
    /// placed, as happens for macro sites sharing one patch.
    pub fn place(&self, alloc: &mut PatchAllocator, code: &[u8]) -> Result<u32, crate::patchgen::GlobalError> {
        if let Some(n) = self.nodes.iter().find(|n| n.code == code) {
            return Ok(n.patch_addr);
        }
        alloc.alloc(code.len() as u32)
    }

    pub fn to_patch_list(&self) -> PatchList {
        let mut nodes = Vec::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            let dup = self.nodes[..i]
                .iter()
                .any(|p| p.patch_addr == n.patch_addr && p.code == n.code);
            nodes.push(PatchNode {
                update_addr: n.update_addr,
                patch_addr: n.patch_addr,
                size: n.code.len() as u32,
                flags: ((n.trigger as u32) | (n.strategy.code() << 2)) as u8,
                strategy_arg: n.strategy.arg(),
                trigger_arg: n.hook_slot,
                orig_len: n.original.len() as u8,
                code: (!dup).then(|| n.code.clone()),
            });
        }
        PatchList {
            nodes,
            writes: self
                .writes
                .iter()
                .map(|w| MemPoke {
                    addr: w.addr,
                    bytes: w.bytes.clone(),
                })
                .collect(),
        }
    }

    pub fn code_bytes(&self) -> usize {
        self.to_patch_list()
            .nodes
            .iter()
            .filter_map(|n| n.code.as_ref())
            .map(Vec::len)
            .sum()
    }

    /// File form: magic, the PATCH_LIST payload, then per node the full
    /// code and original bytes so shared payloads survive the trip.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = BUNDLE_MAGIC.to_vec();
        let body = Message::PatchList(self.to_patch_list()).payload();
        out.extend((body.len() as u32).to_le_bytes());
        out.extend(body);
        for n in &self.nodes {
            out.extend((n.code.len() as u16).to_le_bytes());
            out.extend(&n.code);
            out.extend((n.original.len() as u16).to_le_bytes());
            out.extend(&n.original);
        }
        out.extend((self.writes.len() as u16).to_le_bytes());
        for w in &self.writes {
            out.push(matches!(w.region, crate::patchgen::MemRegion::Patch) as u8);
        }
        out
    }

    pub fn from_bytes(b: &[u8]) -> Result<Self, HostError> {
        let bad = |m: &str| HostError::Bundle(m.to_string());
        if b.len() < 8 || &b[..4] != BUNDLE_MAGIC {
            return Err(bad("bad magic"));
        }
        let n = u32::from_le_bytes(b[4..8].try_into().expect("4")) as usize;
        let body = b.get(8..8 + n).ok_or_else(|| bad("truncated"))?;
        let list = match Message::from_frame(&frame::Frame {
            kind: crate::updsvc::msg::kind::PATCH_LIST,
            payload: body.to_vec(),
        })? {
            Message::PatchList(l) => l,
            _ => return Err(bad("not a patch list")),
        };
        let mut pos = 8 + n;
        let take16 = |pos: &mut usize| -> Result<Vec<u8>, HostError> {
            let len = b.get(*pos..*pos + 2).ok_or_else(|| bad("truncated"))?;
            let len = u16::from_le_bytes([len[0], len[1]]) as usize;
            let v = b.get(*pos + 2..*pos + 2 + len).ok_or_else(|| bad("truncated"))?;
            *pos += 2 + len;
            Ok(v.to_vec())
        };
        let mut nodes = Vec::new();
        for pn in &list.nodes {
            let code = take16(&mut pos)?;
            let original = take16(&mut pos)?;
            let trigger = TriggerKind::from_bits(pn.flags as u32).ok_or_else(|| bad("trigger"))?;
            let strategy = Strategy::from_parts((pn.flags as u32 >> 2) & 3, pn.strategy_arg)
                .ok_or_else(|| bad("strategy"))?;
            nodes.push(BundleNode {
                update_addr: pn.update_addr,
                trigger,
                strategy,
                patch_addr: pn.patch_addr,
                code,
                original,
                hook_slot: pn.trigger_arg,
            });
        }
        let k = b.get(pos..pos + 2).ok_or_else(|| bad("truncated"))?;
        let k = u16::from_le_bytes([k[0], k[1]]) as usize;
        pos += 2;
        if k != list.writes.len() || b.len() != pos + k {
            return Err(bad("write table mismatch"));
        }
        let writes = list
            .writes
            .into_iter()
            .zip(&b[pos..])
            .map(|(p, &r)| MemWrite {
                region: if r == 1 {
                    crate::patchgen::MemRegion::Patch
                } else {
                    crate::patchgen::MemRegion::Data
                },
                addr: p.addr,
                bytes: p.bytes,
            })
            .collect();
        Ok(PatchBundle { nodes, writes })
    }
}

/// Synchronous client; one request in flight.
pub struct HostClient<T> {
    transport: T,
    originals: BTreeMap<u32, Vec<u8>>,
}

impl<T: Transport> HostClient<T> {
    pub fn new(transport: T) -> Self {
        HostClient {
            transport,
            originals: BTreeMap::new(),
        }
    }

    pub fn transport(&mut self) -> &mut T {
        &mut self.transport
    }

    pub fn into_transport(self) -> T {
        self.transport
    }

    pub fn request(&mut self, msg: &Message) -> Result<Message, HostError> {
        let raw = self.transport.transact(&msg.encode()?)?;
        Ok(Message::decode(&raw)?)
    }

    fn expect_ack(reply: Message) -> Result<(), HostError> {
        match reply {
            Message::Ack => Ok(()),
            Message::Nack(r) => Err(HostError::Nack(r)),
            other => Err(HostError::Unexpected(Box::new(other))),
        }
    }

    pub fn hello(&mut self) -> Result<DeviceInfo, HostError> {
        match self.request(&Message::Hello(None))? {
            Message::Hello(Some(i)) => Ok(i),
            Message::Nack(r) => Err(HostError::Nack(r)),
            other => Err(HostError::Unexpected(Box::new(other))),
        }
    }

    pub fn status(&mut self) -> Result<Vec<StatusEntry>, HostError> {
        match self.request(&Message::Status(None))? {
            Message::Status(Some(e)) => Ok(e),
            Message::Nack(r) => Err(HostError::Nack(r)),
            other => Err(HostError::Unexpected(Box::new(other))),
        }
    }

    pub fn send_bundle(&mut self, b: &PatchBundle) -> Result<(), HostError> {
        Self::expect_ack(self.request(&Message::PatchList(b.to_patch_list()))?)?;
        for n in &b.nodes {
            if n.trigger == TriggerKind::SwBp {
                self.originals.insert(n.update_addr, n.original.clone());
            }
        }
        Ok(())
    }

    pub fn remove(&mut self, update_addr: u32) -> Result<(), HostError> {
        let original = self.originals.get(&update_addr).cloned().unwrap_or_default();
        Self::expect_ack(self.request(&Message::Remove {
            update_addr,
            original,
        })?)?;
        self.originals.remove(&update_addr);
        Ok(())
    }
}
