//! Wire framing: `0xA5, type u8, len u16 LE, payload, crc32 LE`. The CRC
//! (IEEE, reflected, init and final xor all ones) covers type through the
//! last payload byte.

use thiserror::Error;

pub const MAGIC: u8 = 0xA5;
pub const HEADER: usize = 4;
pub const TRAILER: usize = 4;
pub const MAX_PAYLOAD: usize = u16::MAX as usize;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum FrameError {
    #[error("bad frame magic {0:#04x}")]
    BadMagic(u8),
    #[error("frame crc mismatch")]
    BadCrc,
    #[error("frame truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("payload of {0} bytes exceeds the frame limit")]
    TooLong(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    pub kind: u8,
    pub payload: Vec<u8>,
}

pub fn encode_frame(kind: u8, payload: &[u8]) -> Result<Vec<u8>, FrameError> {
    if payload.len() > MAX_PAYLOAD {
        return Err(FrameError::TooLong(payload.len()));
    }
    let mut out = Vec::with_capacity(HEADER + payload.len() + TRAILER);
    out.push(MAGIC);
    out.push(kind);
    out.extend((payload.len() as u16).to_le_bytes());
    out.extend(payload);
    let crc = crc32fast::hash(&out[1..]);
    out.extend(crc.to_le_bytes());
    Ok(out)
}

/// Total frame length announced by a header, if enough bytes are present.
pub fn frame_len(header: &[u8]) -> Option<usize> {
    (header.len() >= HEADER)
        .then(|| HEADER + u16::from_le_bytes([header[2], header[3]]) as usize + TRAILER)
}

/// Decodes one frame from the front of `bytes`; returns it with the number
/// of bytes consumed.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), FrameError> {
    let need = frame_len(bytes).ok_or(FrameError::Truncated {
        need: HEADER,
        have: bytes.len(),
    })?;
    if bytes[0] != MAGIC {
        return Err(FrameError::BadMagic(bytes[0]));
    }
    if bytes.len() < need {
        return Err(FrameError::Truncated {
            need,
            have: bytes.len(),
        });
    }
    let body = &bytes[1..need - TRAILER];
    let crc = u32::from_le_bytes(bytes[need - TRAILER..need].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != crc {
        return Err(FrameError::BadCrc);
    }
    Ok((
        Frame {
            kind: bytes[1],
            payload: bytes[HEADER..need - TRAILER].to_vec(),
        },
        need,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crc_matches_reference_vector() {
        // standard check value for "123456789"
        assert_eq!(crc32fast::hash(b"123456789"), 0xCBF4_3926);
    }

    #[test]
    fn round_trip_and_corruption() {
        let f = encode_frame(1, b"hello").unwrap();
        let (d, n) = decode_frame(&f).unwrap();
        assert_eq!(n, f.len());
        assert_eq!(d.kind, 1);
        assert_eq!(d.payload, b"hello");
        let mut bad = f.clone();
        bad[5] ^= 0x10;
        assert_eq!(decode_frame(&bad), Err(FrameError::BadCrc));
        assert!(matches!(decode_frame(&f[..6]), Err(FrameError::Truncated { .. })));
        let mut m = f;
        m[0] = 0;
        assert_eq!(decode_frame(&m), Err(FrameError::BadMagic(0)));
    }
}
