//! Self-contained compressed-image container.
//!
//! Layout, little-endian throughout:
//!   magic "SGVC" | version u8 | width u32 | height u32 | lambda f32 |
//!   k u16 | z_len u32 | y_len u32 | z payload | y payload | crc32 u32
//!
//! The trailing CRC-32 covers every preceding byte, so any single corrupted
//! byte is detected before decoding starts.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SGVC";
pub const VERSION: u8 = 1;
/// Dimensions above this are rejected as implausible for a desk-scale codec.
pub const MAX_DIM: u32 = 1 << 14;

const HEADER_LEN: usize = 4 + 1 + 4 + 4 + 4 + 2 + 4 + 4;

#[derive(Debug, Clone, PartialEq)]
pub struct Header {
    pub width: u32,
    pub height: u32,
    pub lambda: f32,
    pub k: u16,
}

pub fn write_container(header: &Header, z_payload: &[u8], y_payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + z_payload.len() + y_payload.len() + 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&header.width.to_le_bytes());
    out.extend_from_slice(&header.height.to_le_bytes());
    out.extend_from_slice(&header.lambda.to_le_bytes());
    out.extend_from_slice(&header.k.to_le_bytes());
    out.extend_from_slice(&(z_payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&(y_payload.len() as u32).to_le_bytes());
    out.extend_from_slice(z_payload);
    out.extend_from_slice(y_payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn read_container(bytes: &[u8]) -> Result<(Header, &[u8], &[u8])> {
    if bytes.len() < HEADER_LEN + 4 {
        return Err(Error::container("stream shorter than a minimal container"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::container("bad magic, not a compressed image"));
    }
    if bytes[4] != VERSION {
        return Err(Error::container(format!(
            "unsupported container version {}",
            bytes[4]
        )));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored_crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let crc = crc32fast::hash(body);
    if crc != stored_crc {
        return Err(Error::container(format!(
            "checksum mismatch: stored {stored_crc:08x}, computed {crc:08x}"
        )));
    }
    let rd = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let width = rd(5);
    let height = rd(9);
    let lambda = f32::from_le_bytes(bytes[13..17].try_into().unwrap());
    let k = u16::from_le_bytes(bytes[17..19].try_into().unwrap());
    let z_len = rd(19) as usize;
    let y_len = rd(23) as usize;
    if width == 0 || height == 0 || width > MAX_DIM || height > MAX_DIM {
        return Err(Error::container(format!(
            "implausible dimensions {width}x{height}"
        )));
    }
    if !lambda.is_finite() || lambda <= 0.0 {
        return Err(Error::container(format!("invalid tradeoff value {lambda}")));
    }
    let payload_start = HEADER_LEN;
    let expected = payload_start + z_len + y_len + 4;
    if expected != bytes.len() {
        return Err(Error::container(format!(
            "payload lengths disagree with container size ({expected} vs {})",
            bytes.len()
        )));
    }
    let z = &bytes[payload_start..payload_start + z_len];
    let y = &bytes[payload_start + z_len..payload_start + z_len + y_len];
    Ok((
        Header {
            width,
            height,
            lambda,
            k,
        },
        z,
        y,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_roundtrip_is_exact() {
        let h = Header {
            width: 1913,
            height: 731,
            lambda: 0.0016,
            k: 32,
        };
        let bytes = write_container(&h, &[1, 2, 3], &[9, 8, 7, 6]);
        let (h2, z, y) = read_container(&bytes).unwrap();
        assert_eq!(h2, h);
        assert_eq!(z, &[1, 2, 3]);
        assert_eq!(y, &[9, 8, 7, 6]);
    }

    #[test]
    fn any_single_byte_flip_is_detected() {
        let h = Header {
            width: 64,
            height: 48,
            lambda: 0.01,
            k: 4,
        };
        let bytes = write_container(&h, &[5u8; 40], &[7u8; 60]);
        for i in 0..bytes.len() {
            let mut m = bytes.clone();
            m[i] ^= 0x40;
            assert!(read_container(&m).is_err(), "flip at {i} went unnoticed");
        }
    }

    #[test]
    fn truncation_is_detected() {
        let h = Header {
            width: 10,
            height: 10,
            lambda: 0.01,
            k: 1,
        };
        let bytes = write_container(&h, &[1u8; 10], &[2u8; 10]);
        for cut in [0, 5, HEADER_LEN, bytes.len() - 1] {
            assert!(read_container(&bytes[..cut]).is_err());
        }
    }
}
