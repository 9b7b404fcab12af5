//! Persistence: slice files, dataset manifests, checkpoints, and image
//! export. Every writer goes through [`write_atomic`] so an interrupted run
//! never leaves a half-written file behind.

pub mod checkpoint;
pub mod manifest;
pub mod pgm;
pub mod slice;

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Write `bytes` to `path` via a unique temp file in the same directory plus
/// an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path
        .file_name()
        .ok_or_else(|| Error::input("write_atomic", format!("path {path:?} has no file name")))?;
    let nonce = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let tmp = dir.join(format!(
        ".{}.{}.{nonce}.tmp",
        stem.to_string_lossy(),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Export format for [`export_image`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ImageFormat {
    /// Binary 8-bit P5; quantization is export-only.
    Pgm,
    /// Slice file with te = tr = 0 sentinels.
    Raw,
}

/// Write a 2D image with values in [0,1] to `path`.
pub fn export_image(image: &Tensor, path: &Path, format: ImageFormat) -> Result<()> {
    image.dims2("export_image")?;
    match format {
        ImageFormat::Pgm => pgm::write_pgm(path, image),
        ImageFormat::Raw => slice::write_slice(path, image, 0.0, 0.0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_and_leaves_no_temps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("out.bin");
        write_atomic(&p, b"first").unwrap();
        write_atomic(&p, b"second").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"second");
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }
}
