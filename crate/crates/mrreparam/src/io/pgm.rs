//! Binary PGM (P5) export for figures. Quantization to 8 bits happens only
//! here, never in the metric path.

use std::path::Path;

use crate::error::Result;
use crate::tensor::Tensor;

pub fn encode_pgm(image: &Tensor) -> Result<Vec<u8>> {
    let [h, w] = image.dims2("write_pgm")?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| {
        let q = (v.clamp(0.0, 1.0) * 255.0).round();
        q as u8
    }));
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    super::write_atomic(path, &encode_pgm(image)?)
}
