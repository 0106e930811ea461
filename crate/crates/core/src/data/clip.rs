//! Binary clip container.
//!
//! ```text
//! "PFCL" | u16 version | u8 modality | u32 T | u32 C | u32 H | u32 W | f32 * T*C*H*W
//! ```
//! All integers and floats little-endian.

use std::path::Path;

use crate::error::{PulmoError, Result};
use crate::numerics::Tensor;

use super::{Modality, CLIP_FRAMES, CLIP_SIDE};

pub const CLIP_MAGIC: &[u8; 4] = b"PFCL";
pub const CLIP_VERSION: u16 = 1;
const HEADER_LEN: usize = 4 + 2 + 1 + 16;

pub fn encode_clip(modality: Modality, frames: &Tensor) -> Result<Vec<u8>> {
    frames.expect_rank("clip [T,C,H,W]", 4)?;
    if frames.dim(1) != modality.channels() {
        return Err(PulmoError::dim(
            format!("{modality} clip channels"),
            modality.channels(),
            frames.dim(1),
        ));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * frames.len());
    out.extend_from_slice(CLIP_MAGIC);
    out.extend_from_slice(&CLIP_VERSION.to_le_bytes());
    out.push(modality.code());
    for &d in frames.shape() {
        let d = u32::try_from(d).map_err(|_| PulmoError::Format(format!("dim {d} too large")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in frames.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"))
}

/// Parse a clip. With `standard` set, the clip must have 30 frames of
/// 224x224.
pub fn decode_clip(bytes: &[u8], standard: bool) -> Result<(Modality, Tensor)> {
    if bytes.len() < HEADER_LEN {
        return Err(PulmoError::Format(format!(
            "clip header truncated: {} of {HEADER_LEN} bytes",
            bytes.len()
        )));
    }
    if &bytes[..4] != CLIP_MAGIC {
        return Err(PulmoError::Format(format!(
            "bad clip magic {:?}, expected \"PFCL\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CLIP_VERSION {
        return Err(PulmoError::Format(format!(
            "unsupported clip version {version}"
        )));
    }
    let modality = Modality::from_code(bytes[6])?;
    let dims: Vec<usize> = (0..4).map(|i| u32_at(bytes, 7 + 4 * i) as usize).collect();
    if dims.iter().any(|&d| d == 0) {
        return Err(PulmoError::Format(format!(
            "zero clip dimension in {dims:?}"
        )));
    }
    if dims[1] != modality.channels() {
        return Err(PulmoError::Format(format!(
            "{modality} clip must have {} channels, header says {}",
            modality.channels(),
            dims[1]
        )));
    }
    if standard {
        if dims[0] != CLIP_FRAMES {
            return Err(PulmoError::Format(format!(
                "clip has {} frames, expected {CLIP_FRAMES}",
                dims[0]
            )));
        }
        if dims[2] != CLIP_SIDE || dims[3] != CLIP_SIDE {
            return Err(PulmoError::Format(format!(
                "clip frames are {}x{}, expected {CLIP_SIDE}x{CLIP_SIDE}",
                dims[2], dims[3]
            )));
        }
    }
    let n: usize = dims.iter().product();
    let expected = HEADER_LEN + 4 * n;
    if bytes.len() != expected {
        return Err(PulmoError::Format(format!(
            "clip payload is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let data = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((modality, Tensor::new(dims, data)?))
}

pub fn write_clip(path: &Path, modality: Modality, frames: &Tensor) -> Result<()> {
    let bytes = encode_clip(modality, frames)?;
    std::fs::write(path, bytes).map_err(|e| PulmoError::io(path, e))
}

/// Read a clip of any size.
pub fn read_clip(path: &Path) -> Result<(Modality, Tensor)> {
    let bytes = std::fs::read(path).map_err(|e| PulmoError::io(path, e))?;
    decode_clip(&bytes, false)
}

/// Read a standardised `[30, C, 224, 224]` clip.
pub fn load_clip(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| PulmoError::io(path, e))?;
    decode_clip(&bytes, true).map(|(_, t)| t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_roundtrip_and_header_checks() {
        let t = Tensor::from_fn(&[2, 3, 4, 5], |i| (i as f32).sin());
        let bytes = encode_clip(Modality::Rgb, &t).unwrap();
        assert_eq!(&bytes[..4], b"PFCL");
        let (m, back) = decode_clip(&bytes, false).unwrap();
        assert_eq!(m, Modality::Rgb);
        assert_eq!(back, t);
        let e = decode_clip(&bytes, true).unwrap_err().to_string();
        assert!(e.contains("expected 30"), "{e}");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_clip(&bad, false).is_err());
        assert!(decode_clip(&bytes[..bytes.len() - 1], false).is_err());
        assert!(decode_clip(&bytes[..10], false).is_err());
        assert!(encode_clip(Modality::Thermal, &t).is_err());
    }
}
