//! Dataset manifest: one JSON document listing every sample pair and its
//! train/test split, written next to the slice files it references.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifestParams {
    pub te_s: f64,
    pub tr_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub id: u64,
    pub phantom_id: u32,
    pub slice_index: u32,
    pub te_in: f64,
    pub tr_in: f64,
    pub te_out: f64,
    pub tr_out: f64,
    pub file_in: String,
    pub file_out: String,
    pub split: Split,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    /// "d2p" or "p2p".
    pub mode: String,
    #[serde(rename = "R")]
    pub r: u32,
    pub seed: u64,
    pub default_params: ManifestParams,
    pub samples: Vec<SampleRow>,
}

impl DatasetManifest {
    pub fn train_rows(&self) -> impl Iterator<Item = &SampleRow> {
        self.samples.iter().filter(|s| s.split == Split::Train)
    }

    pub fn test_rows(&self) -> impl Iterator<Item = &SampleRow> {
        self.samples.iter().filter(|s| s.split == Split::Test)
    }

    /// Structural checks: version, mode, unique ids, and (against `base_dir`)
    /// that every referenced slice file exists.
    pub fn validate(&self, base_dir: &Path) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Format {
                path: base_dir.join(MANIFEST_NAME),
                detail: format!("unsupported manifest version {}", self.version),
            });
        }
        if self.mode != "d2p" && self.mode != "p2p" {
            return Err(Error::Format {
                path: base_dir.join(MANIFEST_NAME),
                detail: format!("unknown mode {:?}", self.mode),
            });
        }
        let mut ids = BTreeSet::new();
        for s in &self.samples {
            if !ids.insert(s.id) {
                return Err(Error::Format {
                    path: base_dir.join(MANIFEST_NAME),
                    detail: format!("duplicate sample id {}", s.id),
                });
            }
            for f in [&s.file_in, &s.file_out] {
                if !base_dir.join(f).is_file() {
                    return Err(Error::Format {
                        path: base_dir.join(f),
                        detail: format!("sample {} references a missing file", s.id),
                    });
                }
            }
            if self.mode == "d2p"
                && (s.te_in != self.default_params.te_s || s.tr_in != self.default_params.tr_s)
            {
                return Err(Error::Format {
                    path: base_dir.join(MANIFEST_NAME),
                    detail: format!(
                        "d2p sample {} has input params ({}, {}) instead of the defaults",
                        s.id, s.te_in, s.tr_in
                    ),
                });
            }
        }
        Ok(())
    }
}

pub fn save_manifest(dir: &Path, manifest: &DatasetManifest) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(manifest)
        .map_err(|e| Error::input("save_manifest", e.to_string()))?;
    bytes.push(b'\n');
    super::write_atomic(&dir.join(MANIFEST_NAME), &bytes)
}

/// Load and structurally validate the manifest in `dir`.
pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_NAME);
    let bytes = std::fs::read(&path)?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
        path: path.clone(),
        detail: e.to_string(),
    })?;
    manifest.validate(dir)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn tiny_manifest(dir: &Path) -> DatasetManifest {
        let img = Tensor::full(&[2, 2], 0.5f32);
        super::super::slice::write_slice(&dir.join("in0.mrs"), &img, 0.05, 4.5).unwrap();
        super::super::slice::write_slice(&dir.join("out0.mrs"), &img, 0.3, 6.0).unwrap();
        DatasetManifest {
            version: MANIFEST_VERSION,
            mode: "d2p".into(),
            r: 2,
            seed: 9,
            default_params: ManifestParams { te_s: 0.05, tr_s: 4.5 },
            samples: vec![SampleRow {
                id: 0,
                phantom_id: 0,
                slice_index: 12,
                te_in: 0.05,
                tr_in: 4.5,
                te_out: 0.3,
                tr_out: 6.0,
                file_in: "in0.mrs".into(),
                file_out: "out0.mrs".into(),
                split: Split::Train,
            }],
        }
    }

    #[test]
    fn roundtrip_and_field_names() {
        let dir = tempfile::tempdir().unwrap();
        let m = tiny_manifest(dir.path());
        save_manifest(dir.path(), &m).unwrap();
        let text = std::fs::read_to_string(dir.path().join(MANIFEST_NAME)).unwrap();
        for key in ["\"version\"", "\"mode\"", "\"R\"", "\"seed\"", "\"default_params\"", "\"samples\"", "\"split\"", "\"phantom_id\""] {
            assert!(text.contains(key), "missing {key} in {text}");
        }
        assert!(text.contains("\"train\""));
        let back = load_manifest(dir.path()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn acquisition_times_survive_json_bit_for_bit() {
        // Slice headers store raw f64s; the manifest must agree after a JSON
        // round-trip. 1.9951209490079802 is one ulp away from what a
        // non-correctly-rounded float parser returns for its decimal form.
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_manifest(dir.path());
        let awkward = [
            (0.08072157469105966, 1.9951209490079802),
            (0.1 + 0.2 - 0.2, 9.999999999999998),
        ];
        let img = Tensor::full(&[2, 2], 0.5f32);
        for (i, (te, tr)) in awkward.iter().enumerate() {
            let name = format!("x{i}.mrs");
            super::super::slice::write_slice(&dir.path().join(&name), &img, *te, *tr).unwrap();
            let mut row = m.samples[0].clone();
            row.id = i as u64 + 1;
            row.te_out = *te;
            row.tr_out = *tr;
            row.file_out = name;
            m.samples.push(row);
        }
        save_manifest(dir.path(), &m).unwrap();
        let back = load_manifest(dir.path()).unwrap();
        for (i, (te, tr)) in awkward.iter().enumerate() {
            let row = &back.samples[i + 1];
            assert_eq!(row.te_out.to_bits(), te.to_bits());
            assert_eq!(row.tr_out.to_bits(), tr.to_bits());
        }
    }

    #[test]
    fn rejects_duplicate_ids_and_dangling_paths() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_manifest(dir.path());
        m.samples.push(m.samples[0].clone());
        save_manifest(dir.path(), &m).unwrap();
        assert!(load_manifest(dir.path()).is_err());

        let mut m2 = tiny_manifest(dir.path());
        m2.samples[0].file_out = "missing.mrs".into();
        save_manifest(dir.path(), &m2).unwrap();
        assert!(load_manifest(dir.path()).is_err());
    }

    #[test]
    fn rejects_nondefault_input_params_in_d2p() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = tiny_manifest(dir.path());
        m.samples[0].te_in = 0.2;
        save_manifest(dir.path(), &m).unwrap();
        assert!(load_manifest(dir.path()).is_err());
    }
}
