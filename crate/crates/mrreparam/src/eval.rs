//! PSNR/MAE metrics and per-model evaluation reports.
//!
//! Metrics run in display units, a linear [0,255] scale with no integer
//! quantization. Reports carry per-sample rows next to the aggregate
//! statistics so the aggregates stay auditable.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ae::Autoencoder;
use crate::error::{Error, Result};
use crate::io::manifest::load_manifest;
use crate::io::write_atomic;
use crate::pnet::ParamNet;
use crate::sim::{load_samples, DatasetMode, SliceSample};
use crate::tensor::{Mode, Tape, Tensor};
use crate::train::{from_model_units, pnet_batch};

/// Reported for a zero-error pair, where the true value diverges.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const DISPLAY_MAX: f64 = 255.0;

/// Maps `[0,1]` intensities onto the linear `[0,255]` display scale,
/// clamping out-of-range values and quantizing nothing.
pub fn to_display_units(image: &Tensor) -> Tensor {
    image.map(|v| v.clamp(0.0, 1.0) * DISPLAY_MAX as f32)
}

fn check_shapes(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} against {:?}", a.shape(), b.shape()),
        ));
    }
    if a.numel() == 0 {
        return Err(Error::input(op, "empty tensors have no error statistics"));
    }
    Ok(())
}

fn mse_f64(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.numel() as f64;
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum::<f64>()
        / n
}

/// Peak signal-to-noise ratio in dB against the given peak value, capped at
/// [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    check_shapes("psnr", a, b)?;
    if !(max_val.is_finite() && max_val > 0.0) {
        return Err(Error::input("psnr", format!("max_val {max_val} is not a positive number")));
    }
    let mse = mse_f64(a, b);
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_CAP_DB))
}

/// Mean absolute error in the units of its inputs. Averages the same
/// single-precision differences [`diff_map`] stores, so the map's mean and
/// this value agree exactly.
pub fn mae(a: &Tensor, b: &Tensor) -> Result<f64> {
    check_shapes("mae", a, b)?;
    let n = a.numel() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs() as f64)
        .sum::<f64>()
        / n)
}

/// Pixelwise absolute difference, same units as the inputs.
pub fn diff_map(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_shapes("diff_map", a, b)?;
    let data: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs())
        .collect();
    Tensor::from_vec(a.shape(), data)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub id: u64,
    pub psnr: f64,
    pub mae: f64,
}

/// Aggregate metrics over one testset, kept recomputable from its rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Model variant the predictions came from, `d2p` or `p2p`.
    pub kind: String,
    pub testset: String,
    pub mean_psnr: f64,
    pub std_psnr: f64,
    pub mean_mae: f64,
    pub std_mae: f64,
    pub rows: Vec<SampleMetrics>,
}

fn mean_and_population_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_rows(kind: &str, testset: &str, rows: Vec<SampleMetrics>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::input("eval_report", "no samples to aggregate"));
        }
        let (mean_psnr, std_psnr) = mean_and_population_std(rows.iter().map(|r| r.psnr));
        let (mean_mae, std_mae) = mean_and_population_std(rows.iter().map(|r| r.mae));
        Ok(EvalReport {
            kind: kind.to_string(),
            testset: testset.to_string(),
            mean_psnr,
            std_psnr,
            mean_mae,
            std_mae,
            rows,
        })
    }

    /// Recomputes the aggregates from the rows and rejects disagreement
    /// beyond 1e-9, catching hand-edited or bit-rotted reports.
    pub fn validate(&self) -> Result<()> {
        let fresh = EvalReport::from_rows(&self.kind, &self.testset, self.rows.clone())?;
        for (what, stored, recomputed) in [
            ("mean_psnr", self.mean_psnr, fresh.mean_psnr),
            ("std_psnr", self.std_psnr, fresh.std_psnr),
            ("mean_mae", self.mean_mae, fresh.mean_mae),
            ("std_mae", self.std_mae, fresh.std_mae),
        ] {
            if (stored - recomputed).abs() > 1e-9 {
                return Err(Error::input(
                    "eval_report",
                    format!("{what} {stored} disagrees with its rows ({recomputed})"),
                ));
            }
        }
        Ok(())
    }

    /// Summary plus per-sample rows as an aligned plain-text table.
    pub fn to_text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<6} {:<20} {:>12} {:>10} {:>10} {:>9} {:>6}\n",
            "model", "testset", "mean PSNR dB", "std PSNR", "mean MAE", "std MAE", "n"
        ));
        out.push_str(&format!(
            "{:<6} {:<20} {:>12.3} {:>10.3} {:>10.3} {:>9.3} {:>6}\n\n",
            self.kind,
            self.testset,
            self.mean_psnr,
            self.std_psnr,
            self.mean_mae,
            self.std_mae,
            self.rows.len()
        ));
        out.push_str(&format!("{:>8} {:>10} {:>10}\n", "sample", "psnr", "mae"));
        for row in &self.rows {
            out.push_str(&format!("{:>8} {:>10.3} {:>10.3}\n", row.id, row.psnr, row.mae));
        }
        out
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::input("eval_report", e.to_string()))?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        let report: EvalReport = serde_json::from_slice(&bytes).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
        report.validate()?;
        Ok(report)
    }
}

/// Scores arbitrary predictions against the samples' ground truth. The
/// injection point for baselines and oracles: an identity model passes
/// `|s| Ok(s.image_in.clone())`, a perfect one `|s| Ok(s.image_out.clone())`.
/// Predictions are expected in `[0,1]` signal units.
pub fn evaluate_with(
    kind: DatasetMode,
    testset: &str,
    samples: &[SliceSample],
    mut predict: impl FnMut(&SliceSample) -> Result<Tensor>,
) -> Result<EvalReport> {
    let mut rows = Vec::with_capacity(samples.len());
    for sample in samples {
        let pred = to_display_units(&predict(sample)?);
        let truth = to_display_units(&sample.image_out);
        rows.push(SampleMetrics {
            id: sample.id,
            psnr: psnr(&pred, &truth, DISPLAY_MAX)?,
            mae: mae(&pred, &truth)?,
        });
    }
    EvalReport::from_rows(kind.as_str(), testset, rows)
}

/// One batched forward through the frozen pipeline; returns per-sample
/// predictions in `[0,1]` signal units.
pub(crate) fn predict_batch(
    ae: &mut Autoencoder,
    pnet: &ParamNet,
    samples: &[&SliceSample],
) -> Result<Vec<Tensor>> {
    let r = ae.config.r;
    let batch = pnet_batch(samples, pnet.config.mode, r)?;
    let mut tape = Tape::new();
    let x = tape.leaf(batch.x_in);
    let pyramid = ae.encode(&mut tape, x, Mode::Eval)?;
    let pred = pnet.forward(&mut tape, &pyramid, &batch.cond)?;
    let value = tape.value(pred);
    let plane = r * r;
    (0..samples.len())
        .map(|n| {
            let data = value.data()[n * plane..(n + 1) * plane].to_vec();
            Ok(from_model_units(&Tensor::from_vec(&[r, r], data)?))
        })
        .collect()
}

const EVAL_BATCH: usize = 8;

/// Runs the full pipeline over a dataset's test split and aggregates
/// Table-style statistics. The checkpoints must agree with each other and
/// with the dataset on architecture and mode.
pub fn evaluate(ae_ckpt: &Path, pn_ckpt: &Path, dataset_dir: &Path) -> Result<EvalReport> {
    let (mut ae, _) = Autoencoder::load(ae_ckpt, true)?;
    ae.params.set_trainable(false);
    let (pnet, _) = ParamNet::load(pn_ckpt, true)?;
    if pnet.config.ae != ae.config {
        return Err(Error::InvalidConfig(format!(
            "param-net was trained against {:?}, not the supplied autoencoder {:?}",
            pnet.config.ae, ae.config
        )));
    }
    let manifest = load_manifest(dataset_dir)?;
    let dataset_mode: DatasetMode = manifest.mode.parse()?;
    if dataset_mode != pnet.config.mode {
        return Err(Error::ModeMismatch(format!(
            "{} model evaluated on a dataset built as {}",
            pnet.config.mode.as_str(),
            manifest.mode
        )));
    }
    if manifest.r as usize != ae.config.r {
        return Err(Error::InvalidConfig(format!(
            "dataset resolution {} does not match the model's {}",
            manifest.r, ae.config.r
        )));
    }
    let rows: Vec<_> = manifest.test_rows().collect();
    if rows.is_empty() {
        return Err(Error::input("evaluate", "dataset has no test split"));
    }
    let samples = load_samples(dataset_dir, &rows)?;

    let testset = dataset_dir
        .file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("testset")
        .to_string();
    let mut metric_rows = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let picked: Vec<&SliceSample> = chunk.iter().collect();
        let preds = predict_batch(&mut ae, &pnet, &picked)?;
        for (sample, pred) in chunk.iter().zip(preds) {
            let pred = to_display_units(&pred);
            let truth = to_display_units(&sample.image_out);
            metric_rows.push(SampleMetrics {
                id: sample.id,
                psnr: psnr(&pred, &truth, DISPLAY_MAX)?,
                mae: mae(&pred, &truth)?,
            });
        }
    }
    EvalReport::from_rows(pnet.config.mode.as_str(), &testset, metric_rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ae::AutoencoderConfig;
    use crate::phantom::{generate_phantom, PaletteFamily};
    use crate::pnet::ParamNetConfig;
    use crate::sim::{build_dataset, DatasetConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::TempDir;

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn display_units_scale_linearly_and_clamp() {
        let x = t(&[5], vec![0.0, 1.0, 0.5, -0.2, 1.3]);
        let y = to_display_units(&x);
        assert_eq!(y.data(), &[0.0, 255.0, 127.5, 0.0, 255.0]);
        for v in [0.0f32, 0.25, 0.6, 1.0] {
            let d = to_display_units(&t(&[1], vec![v])).data()[0];
            assert!((d / 255.0 - v).abs() < 1e-6);
            let d2 = to_display_units(&t(&[1], vec![v + 1e-3])).data()[0];
            assert!(d2 >= d);
        }
    }

    #[test]
    fn psnr_hand_values_and_guards() {
        let zeros = Tensor::zeros(&[4, 4]);
        let flat = Tensor::full(&[4, 4], 25.5f32);
        // mse 650.25 against peak 255 is a power ratio of exactly 100.
        assert_eq!(psnr(&zeros, &flat, 255.0).unwrap(), 20.0);
        assert_eq!(psnr(&flat, &flat, 255.0).unwrap(), PSNR_CAP_DB);
        assert_eq!(
            psnr(&zeros, &flat, 255.0).unwrap(),
            psnr(&flat, &zeros, 255.0).unwrap()
        );
        assert!(psnr(&zeros, &Tensor::zeros(&[2, 8]), 255.0).is_err());
        assert!(psnr(&zeros, &flat, 0.0).is_err());
        assert!(psnr(&zeros, &flat, f64::NAN).is_err());

        let mut last = f64::INFINITY;
        for k in 1..9 {
            let off = Tensor::full(&[4, 4], (k * 10) as f32);
            let p = psnr(&zeros, &off, 255.0).unwrap();
            assert!(p < last, "psnr must fall as mse grows");
            last = p;
        }
    }

    #[test]
    fn mae_and_diff_map_agree() {
        let a = t(&[2, 2], vec![10.0, 20.0, 30.0, 40.0]);
        assert_eq!(mae(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 25.5);
        assert_eq!(mae(&a, &b).unwrap(), 25.5);
        assert!(mae(&a, &Tensor::zeros(&[4])).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(40);
        let mk = |rng: &mut ChaCha8Rng| {
            let data: Vec<f32> = (0..64).map(|_| rng.gen_range(0.0..255.0)).collect();
            t(&[8, 8], data)
        };
        for _ in 0..5 {
            let (x, y) = (mk(&mut rng), mk(&mut rng));
            let d = diff_map(&x, &y).unwrap();
            assert!((d.mean_f64() - mae(&x, &y).unwrap()).abs() < 1e-9);
            let top = d.data().iter().cloned().fold(0.0f32, f32::max);
            let direct = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(&p, &q)| (p - q).abs())
                .fold(0.0f32, f32::max);
            assert_eq!(top, direct);
        }
        assert_eq!(diff_map(&a, &a).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn report_statistics_come_from_the_rows() {
        let rows = vec![
            SampleMetrics { id: 0, psnr: 20.0, mae: 5.0 },
            SampleMetrics { id: 1, psnr: 30.0, mae: 10.0 },
        ];
        let report = EvalReport::from_rows("d2p", "micro", rows).unwrap();
        assert_eq!(report.mean_psnr, 25.0);
        assert_eq!(report.std_psnr, 5.0);
        assert_eq!(report.mean_mae, 7.5);
        assert_eq!(report.std_mae, 2.5);
        report.validate().unwrap();

        let mut forged = report.clone();
        forged.mean_psnr += 1e-6;
        assert!(forged.validate().is_err());

        let dir = TempDir::new().unwrap();
        let path = dir.path().join("report.json");
        report.save_json(&path).unwrap();
        assert_eq!(EvalReport::load_json(&path).unwrap(), report);

        let table = report.to_text_table();
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines[0].contains("mean PSNR dB"));
        assert!(lines[1].contains("d2p") && lines[1].contains("micro"));
        assert!(table.contains("25.000") && table.contains("7.500"));
        // Per-sample section is aligned: both data lines share column widths.
        let (r0, r1) = (lines[4], lines[5]);
        assert_eq!(r0.len(), r1.len());

        assert!(EvalReport::from_rows("d2p", "x", vec![]).is_err());
    }

    fn micro_samples(dir: &Path, mode: DatasetMode) -> Vec<SliceSample> {
        let vol = generate_phantom(7, [16, 16, 16], PaletteFamily::Default).unwrap();
        let config = DatasetConfig {
            mode,
            n_pairs: 4,
            slices_per_pair: 2,
            r: 8,
            seed: 13,
            workers: 1,
            noise_sigma: 0.0,
        };
        let manifest = build_dataset(&[vol], &config, dir).unwrap();
        let rows: Vec<_> = manifest.test_rows().collect();
        load_samples(dir, &rows).unwrap()
    }

    #[test]
    fn oracle_predictions_hit_the_cap_and_identity_lands_below() {
        let dir = TempDir::new().unwrap();
        let samples = micro_samples(dir.path(), DatasetMode::D2p);
        let oracle =
            evaluate_with(DatasetMode::D2p, "micro", &samples, |s| Ok(s.image_out.clone()))
                .unwrap();
        assert_eq!(oracle.mean_psnr, PSNR_CAP_DB);
        assert_eq!(oracle.std_psnr, 0.0);
        assert_eq!(oracle.mean_mae, 0.0);

        let identity =
            evaluate_with(DatasetMode::D2p, "micro", &samples, |s| Ok(s.image_in.clone()))
                .unwrap();
        assert!(identity.mean_psnr < PSNR_CAP_DB);
        assert!(identity.mean_mae > 0.0);
    }

    #[test]
    fn statistics_do_not_depend_on_sample_order() {
        let dir = TempDir::new().unwrap();
        let mut samples = micro_samples(dir.path(), DatasetMode::P2p);
        let forward =
            evaluate_with(DatasetMode::P2p, "micro", &samples, |s| Ok(s.image_in.clone()))
                .unwrap();
        samples.reverse();
        let backward =
            evaluate_with(DatasetMode::P2p, "micro", &samples, |s| Ok(s.image_in.clone()))
                .unwrap();
        assert!((forward.mean_psnr - backward.mean_psnr).abs() < 1e-9);
        assert!((forward.std_psnr - backward.std_psnr).abs() < 1e-9);
        assert!((forward.mean_mae - backward.mean_mae).abs() < 1e-9);
        assert!((forward.std_mae - backward.std_mae).abs() < 1e-9);
    }

    #[test]
    fn full_pipeline_evaluation_and_mode_guards() {
        let dir = TempDir::new().unwrap();
        let data = dir.path().join("micro");
        micro_samples(&data, DatasetMode::D2p);

        let ae_config = AutoencoderConfig::new(3, 4);
        let ae = Autoencoder::build(ae_config, 21).unwrap();
        let ae_path = dir.path().join("ae.ckpt");
        ae.save(&ae_path, 21, 0, 0).unwrap();
        let d2p = ParamNet::build(ParamNetConfig { mode: DatasetMode::D2p, ae: ae_config }, 22)
            .unwrap();
        let d2p_path = dir.path().join("d2p.ckpt");
        d2p.save(&d2p_path, 22, 0, 0).unwrap();

        let report = evaluate(&ae_path, &d2p_path, &data).unwrap();
        assert_eq!(report.kind, "d2p");
        assert_eq!(report.testset, "micro");
        assert_eq!(report.rows.len(), 6);
        assert!(report.mean_psnr.is_finite() && report.mean_mae.is_finite());
        report.validate().unwrap();

        // Per-sample ids match the manifest's test split.
        let ids: Vec<u64> = report.rows.iter().map(|r| r.id).collect();
        assert_eq!(ids, vec![2, 3, 4, 5, 6, 7]);

        let p2p = ParamNet::build(ParamNetConfig { mode: DatasetMode::P2p, ae: ae_config }, 23)
            .unwrap();
        let p2p_path = dir.path().join("p2p.ckpt");
        p2p.save(&p2p_path, 23, 0, 0).unwrap();
        assert!(matches!(
            evaluate(&ae_path, &p2p_path, &data),
            Err(Error::ModeMismatch(_))
        ));

        let other_ae = Autoencoder::build(AutoencoderConfig::new(4, 4), 24).unwrap();
        let other_path = dir.path().join("ae4.ckpt");
        other_ae.save(&other_path, 24, 0, 0).unwrap();
        assert!(matches!(
            evaluate(&other_path, &d2p_path, &data),
            Err(Error::InvalidConfig(_))
        ));
    }
}
