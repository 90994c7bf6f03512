//! Patch delivery: framed protocol, device-side installer and host client.

pub mod device;
pub mod frame;
pub mod host;
pub mod msg;

pub use device::DeviceService;
pub use frame::{decode_frame, encode_frame, Frame, FrameError};
pub use host::{BundleNode, HostClient, HostError, PatchBundle, SimDevice, StreamTransport, Transport};
pub use msg::{DeviceInfo, Message, NackReason, PatchList, PatchNode};
