//! `GHMP` heatmap container.
//!
//! Layout, all integers and floats little-endian:
//!
//! | offset | size | field                          |
//! |--------|------|--------------------------------|
//! | 0      | 4    | magic `b"GHMP"`                |
//! | 4      | 4    | version (`u32`, currently 1)   |
//! | 8      | 4    | width (`u32`)                  |
//! | 12     | 4    | height (`u32`)                 |
//! | 16     | 4    | channels (`u32`)               |
//! | 20     | 1    | role (`u8`: 0 logits, 1 probabilities, 2 target) |
//! | 21     | ...  | `f64` values, channel after channel, row-major |

use crate::error::{Error, Result};
use crate::heatmap::{Heatmap, HeatmapStack, Role};

pub const MAGIC: &[u8; 4] = b"GHMP";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 21;

pub fn write_ghmp(stack: &HeatmapStack) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * stack.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [stack.width(), stack.height(), stack.num_channels()] {
        let v = u32::try_from(v).expect("stack dimensions fit in u32");
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(stack.role().code());
    for v in stack.flat_values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn read_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub fn read_ghmp(bytes: &[u8]) -> Result<HeatmapStack> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Container(format!(
            "truncated header ({} of {HEADER_LEN} bytes)",
            bytes.len()
        )));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Container("bad magic".into()));
    }
    let version = read_u32(bytes, 4);
    if version != VERSION {
        return Err(Error::Container(format!("unsupported version {version}")));
    }
    let width = read_u32(bytes, 8) as usize;
    let height = read_u32(bytes, 12) as usize;
    let channels = read_u32(bytes, 16) as usize;
    let role = Role::from_code(bytes[20])
        .ok_or_else(|| Error::Container(format!("unknown role code {}", bytes[20])))?;
    if width == 0 || height == 0 || channels == 0 {
        return Err(Error::Container(format!(
            "empty stack {width}x{height}x{channels}"
        )));
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| n.checked_add(HEADER_LEN))
        .ok_or_else(|| Error::Container("dimensions overflow".into()))?;
    if bytes.len() != expected {
        return Err(Error::Container(format!(
            "payload is {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let per_channel = width * height;
    let channels = bytes[HEADER_LEN..]
        .chunks_exact(8 * per_channel)
        .map(|chunk| {
            let values = chunk
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            Heatmap::new(width, height, values)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| Error::Container(e.to_string()))?;
    HeatmapStack::new(role, channels).map_err(|e| Error::Container(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> HeatmapStack {
        let c = (0..3)
            .map(|k| Heatmap::from_fn(4, 2, |x, y| (k * 100 + y * 10 + x) as f64 - 0.5).unwrap())
            .collect();
        HeatmapStack::new(Role::Logits, c).unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = write_ghmp(&sample());
        assert_eq!(&bytes[..4], b"GHMP");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[8..12], 4u32.to_le_bytes());
        assert_eq!(bytes[12..16], 2u32.to_le_bytes());
        assert_eq!(bytes[16..20], 3u32.to_le_bytes());
        assert_eq!(bytes[20], 0);
        assert_eq!(bytes.len(), HEADER_LEN + 3 * 4 * 2 * 8);
        // channel 1, row 1, column 2
        let off = HEADER_LEN + 8 * (8 + 4 + 2);
        assert_eq!(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()), 111.5);
    }

    #[test]
    fn rejects_corruption() {
        let good = write_ghmp(&sample());
        assert_eq!(read_ghmp(&good).unwrap(), sample());

        let mut b = good.clone();
        b[0] = b'X';
        assert!(read_ghmp(&b).is_err());
        let mut b = good.clone();
        b[4] = 2;
        assert!(read_ghmp(&b).is_err());
        let mut b = good.clone();
        b[20] = 9;
        assert!(read_ghmp(&b).is_err());
        assert!(read_ghmp(&good[..good.len() - 1]).is_err());
        let mut b = good.clone();
        b.push(0);
        assert!(read_ghmp(&b).is_err());
        let mut b = good.clone();
        b[HEADER_LEN..HEADER_LEN + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(read_ghmp(&b).is_err());
        let mut b = good;
        b[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        b[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(read_ghmp(&b).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(w in 1usize..6, h in 1usize..6, c in 1usize..4, seed in any::<u64>()) {
            let mut s = seed;
            let channels = (0..c).map(|_| Heatmap::from_fn(w, h, |_, _| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
            }).unwrap()).collect();
            let stack = HeatmapStack::new(Role::Target, channels).unwrap();
            prop_assert_eq!(read_ghmp(&write_ghmp(&stack)).unwrap(), stack);
        }
    }
}
