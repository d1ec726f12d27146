//! Flow-field files: magic `FLO1`, then height, width and a reserved word as
//! little-endian u32 (16 bytes in all), followed by the u plane and the v
//! plane as little-endian f32, row-major.

use std::fs;
use std::path::Path;

use crate::error::{format_err, shape_err, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FLO1";
pub const HEADER_LEN: usize = 16;

/// Serialises a `[2,H,W]` (u, v) frame.
pub fn encode(frame: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match *frame.shape() {
        [2, h, w] => (h, w),
        ref s => return Err(shape_err!("flow frames are [2,H,W], got {s:?}")),
    };
    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * frame.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(h as u32).to_le_bytes());
    buf.extend_from_slice(&(w as u32).to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    for v in frame.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    Ok(buf)
}

pub fn decode(bytes: &[u8], name: &str) -> Result<Tensor<f32>> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(format_err!("{name}: missing FLO1 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (h, w) = (word(4), word(8));
    let n = 2 * h * w;
    if n == 0 || bytes.len() != HEADER_LEN + 4 * n {
        return Err(format_err!(
            "{name}: {h}x{w} flow needs {} bytes, file has {}",
            HEADER_LEN + 4 * n,
            bytes.len()
        ));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&[2, h, w], data)
}

pub fn write_frame(path: &Path, frame: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode(frame)?)?;
    Ok(())
}

pub fn read_frame(path: &Path) -> Result<Tensor<f32>> {
    decode(&fs::read(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let f = Tensor::from_vec(&[2, 1, 2], vec![1.0, -2.0, 0.5, 3.25]).unwrap();
        let b = encode(&f).unwrap();
        assert_eq!(&b[..4], b"FLO1");
        assert_eq!(&b[4..8], &1u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(b.len(), 16 + 16);
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_or_foreign_files_are_rejected() {
        let f = Tensor::from_vec(&[2, 2, 2], vec![0.0; 8]).unwrap();
        let b = encode(&f).unwrap();
        assert!(decode(&b[..b.len() - 1], "t.flo").is_err());
        assert!(decode(b"PIEH0000000000000000", "m.flo").is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(h in 1usize..6, w in 1usize..6, seed in any::<u32>()) {
            let data: Vec<f32> = (0..2 * h * w).map(|i| ((i as u32 ^ seed) as f32).sin() * 7.0).collect();
            let f = Tensor::from_vec(&[2, h, w], data).unwrap();
            let back = decode(&encode(&f).unwrap(), "p").unwrap();
            prop_assert!(back.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
