//! Slice file format.
//!
//! Layout: magic "MRS1", then a 24-byte header (width u32, height u32, te f64,
//! tr f64, all little-endian), then width*height row-major f32 pixels.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MRS1";
const HEADER_LEN: usize = 24;

/// Serialize a [0,1] image plus its acquisition parameters.
pub fn encode_slice(image: &Tensor, te_s: f64, tr_s: f64) -> Result<Vec<u8>> {
    let [h, w] = image.dims2("write_slice")?;
    let (wu, hu) = (
        u32::try_from(w).map_err(|_| Error::input("write_slice", format!("width {w} exceeds u32")))?,
        u32::try_from(h).map_err(|_| Error::input("write_slice", format!("height {h} exceeds u32")))?,
    );
    let mut out = Vec::with_capacity(4 + HEADER_LEN + image.numel() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&wu.to_le_bytes());
    out.extend_from_slice(&hu.to_le_bytes());
    out.extend_from_slice(&te_s.to_le_bytes());
    out.extend_from_slice(&tr_s.to_le_bytes());
    for &v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn write_slice(path: &Path, image: &Tensor, te_s: f64, tr_s: f64) -> Result<()> {
    super::write_atomic(path, &encode_slice(image, te_s, tr_s)?)
}

/// Parse slice bytes back into (image, te_s, tr_s).
pub fn decode_slice(path: &Path, bytes: &[u8]) -> Result<(Tensor, f64, f64)> {
    let corrupt = |offset: usize, detail: String| Error::Corrupt {
        path: path.to_path_buf(),
        offset: offset as u64,
        detail,
    };
    if bytes.len() < 4 + HEADER_LEN {
        return Err(corrupt(
            bytes.len(),
            format!("file is {} bytes, shorter than the fixed header", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format {
            path: path.to_path_buf(),
            detail: format!("bad magic {:?}, expected {MAGIC:?}", &bytes[..4]),
        });
    }
    let w = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let h = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let te = f64::from_le_bytes(bytes[12..20].try_into().unwrap());
    let tr = f64::from_le_bytes(bytes[20..28].try_into().unwrap());
    if w == 0 || h == 0 {
        return Err(corrupt(4, format!("zero dimension {w}x{h}")));
    }
    let expected = 4 + HEADER_LEN + w * h * 4;
    if bytes.len() != expected {
        return Err(corrupt(
            bytes.len().min(expected),
            format!("payload for {w}x{h} needs {expected} bytes total, file has {}", bytes.len()),
        ));
    }
    let data: Vec<f32> = bytes[4 + HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((Tensor::from_vec(&[h, w], data)?, te, tr))
}

pub fn read_slice(path: &Path) -> Result<(Tensor, f64, f64)> {
    let bytes = std::fs::read(path)?;
    decode_slice(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_image() -> Tensor {
        Tensor::from_vec(&[3, 2], vec![0.0, 0.25, 0.5, 0.75, 1.0, 0.125]).unwrap()
    }

    #[test]
    fn roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.mrs");
        let img = sample_image();
        write_slice(&p, &img, 0.05, 4.5).unwrap();
        let (back, te, tr) = read_slice(&p).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert_eq!(back.data(), img.data());
        assert_eq!((te, tr), (0.05, 4.5));

        // Re-encoding what was read reproduces the file bytes.
        let original = std::fs::read(&p).unwrap();
        assert_eq!(encode_slice(&back, te, tr).unwrap(), original);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_slice(&sample_image(), 0.05, 4.5).unwrap();
        assert_eq!(&bytes[..4], b"MRS1");
        // Fixed fields after the magic span exactly 24 bytes.
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2); // width
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3); // height
        assert_eq!(bytes.len(), 4 + 24 + 6 * 4);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.mrs");
        let mut bytes = encode_slice(&sample_image(), 0.1, 2.0).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        let err = read_slice(&p).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
    }

    #[test]
    fn rejects_truncation_with_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trunc.mrs");
        let bytes = encode_slice(&sample_image(), 0.1, 2.0).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        match read_slice(&p).unwrap_err() {
            Error::Corrupt { offset, .. } => assert!(offset > 0),
            other => panic!("expected corruption error, got {other}"),
        }
    }
}
