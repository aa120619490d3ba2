//! Payload framing: an 8-byte little-endian element count followed by the
//! elements as little-endian `f64`.
//!
//! Traffic counters charge the element bytes as payload and the header as
//! framing, so a gradient of `d` entries always costs exactly `8·d` payload
//! bytes regardless of how it is chunked.

use crate::error::{Error, Result};

pub const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame(Vec<u8>);

impl Frame {
    pub fn encode(values: &[f64]) -> Frame {
        let mut buf = Vec::with_capacity(HEADER_LEN + values.len() * 8);
        buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
        for v in values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        Frame(buf)
    }

    /// Wraps raw bytes, checking the header against the body length.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<Frame> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::contract("frame shorter than its header"));
        }
        let mut header = [0u8; HEADER_LEN];
        header.copy_from_slice(&bytes[..HEADER_LEN]);
        let count = u64::from_le_bytes(header) as usize;
        if bytes.len() - HEADER_LEN != count * 8 {
            return Err(Error::contract(format!(
                "frame header announces {count} elements but body holds {} bytes",
                bytes.len() - HEADER_LEN
            )));
        }
        Ok(Frame(bytes))
    }

    /// Frame carrying `payload_bytes` of zeroed body; `payload_bytes` must be a multiple of 8.
    pub fn zeroed(payload_bytes: usize) -> Result<Frame> {
        if payload_bytes % 8 != 0 {
            return Err(Error::contract("payload size must be a multiple of 8"));
        }
        Ok(Frame::encode(&vec![0.0; payload_bytes / 8]))
    }

    pub fn decode(&self) -> Vec<f64> {
        self.0[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| {
                let mut b = [0u8; 8];
                b.copy_from_slice(c);
                f64::from_le_bytes(b)
            })
            .collect()
    }

    pub fn element_count(&self) -> usize {
        (self.0.len() - HEADER_LEN) / 8
    }

    pub fn payload_len(&self) -> u64 {
        (self.0.len() - HEADER_LEN) as u64
    }

    pub fn framing_len(&self) -> u64 {
        HEADER_LEN as u64
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn into_bytes(self) -> Vec<u8> {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_mismatch_rejected() {
        let mut bytes = Frame::encode(&[1.0, 2.0]).into_bytes();
        bytes.pop();
        assert!(Frame::from_bytes(bytes).is_err());
        assert!(Frame::from_bytes(vec![1, 2, 3]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_is_bitwise(values in proptest::collection::vec(any::<f64>(), 0..64)) {
            let frame = Frame::encode(&values);
            prop_assert_eq!(frame.payload_len(), 8 * values.len() as u64);
            let back = Frame::from_bytes(frame.clone().into_bytes()).unwrap().decode();
            prop_assert_eq!(
                back.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                values.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}
