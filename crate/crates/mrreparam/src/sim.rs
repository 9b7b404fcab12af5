//! Closed-form spin-echo simulation and dataset construction.
//!
//! The signal model is the single-pool spin-echo law
//! `S = pd * (1 - exp(-tr/t1)) * exp(-te/t2)`, applied voxelwise to a
//! phantom's tissue maps. Datasets pair an input scan with a target scan of
//! the same anatomy under different acquisition parameters.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::manifest::{DatasetManifest, ManifestParams, SampleRow, Split, MANIFEST_VERSION};
use crate::io::slice::write_slice;
use crate::phantom::{resize_bilinear, slice_indices, PhantomVolume, SliceMaps};
use crate::tensor::Tensor;

pub const TE_MIN_S: f64 = 0.02;
pub const TE_MAX_S: f64 = 1.0;
pub const TR_MIN_S: f64 = 1.2;
pub const TR_MAX_S: f64 = 10.0;

/// Echo and repetition time of one acquisition, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScanParams {
    pub te_s: f64,
    pub tr_s: f64,
}

impl ScanParams {
    pub fn new(te_s: f64, tr_s: f64) -> Self {
        ScanParams { te_s, tr_s }
    }

    /// Checks the sampling-range invariants, not mere positivity.
    pub fn validate(&self) -> Result<()> {
        if !(self.te_s.is_finite() && self.tr_s.is_finite()) {
            return Err(Error::input("scan_params", "non-finite te/tr"));
        }
        if !(TE_MIN_S..=TE_MAX_S).contains(&self.te_s) {
            return Err(Error::input(
                "scan_params",
                format!("te {} s outside [{TE_MIN_S}, {TE_MAX_S}]", self.te_s),
            ));
        }
        if !(TR_MIN_S..=TR_MAX_S).contains(&self.tr_s) {
            return Err(Error::input(
                "scan_params",
                format!("tr {} s outside [{TR_MIN_S}, {TR_MAX_S}]", self.tr_s),
            ));
        }
        Ok(())
    }
}

/// The fixed default acquisition: TE 50 ms, TR 4.5 s.
pub const DEFAULT_PARAMS: ScanParams = ScanParams { te_s: 0.05, tr_s: 4.5 };

fn signal_unchecked(pd: f64, t1_s: f64, t2_s: f64, te_s: f64, tr_s: f64) -> f64 {
    // Background rule: zero relaxation time means no signal.
    if t1_s == 0.0 || t2_s == 0.0 {
        return 0.0;
    }
    pd * (1.0 - (-tr_s / t1_s).exp()) * (-te_s / t2_s).exp()
}

/// Spin-echo signal for one voxel. `t1_s = 0` or `t2_s = 0` marks background
/// and yields zero; otherwise the result lies in `[0, pd]`.
pub fn spin_echo_signal(pd: f64, t1_s: f64, t2_s: f64, te_s: f64, tr_s: f64) -> Result<f64> {
    for (name, v) in [("pd", pd), ("t1_s", t1_s), ("t2_s", t2_s), ("te_s", te_s), ("tr_s", tr_s)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::input(
                "spin_echo_signal",
                format!("{name} = {v} must be finite and non-negative"),
            ));
        }
    }
    if pd > 1.0 {
        return Err(Error::input("spin_echo_signal", format!("pd = {pd} exceeds 1")));
    }
    if te_s == 0.0 || tr_s == 0.0 {
        return Err(Error::input("spin_echo_signal", "te_s and tr_s must be positive"));
    }
    Ok(signal_unchecked(pd, t1_s, t2_s, te_s, tr_s))
}

/// Simulates one slice: the spin-echo law applied per pixel to co-registered
/// T1/T2/PD maps. Output matches the map shape with values in `[0, 1]`.
pub fn simulate_image(maps: &SliceMaps, params: ScanParams) -> Result<Tensor> {
    if maps.t1.shape() != maps.t2.shape() || maps.t1.shape() != maps.pd.shape() {
        return Err(Error::shape(
            "simulate_image",
            format!(
                "map shapes differ: t1 {:?}, t2 {:?}, pd {:?}",
                maps.t1.shape(),
                maps.t2.shape(),
                maps.pd.shape()
            ),
        ));
    }
    if !(params.te_s.is_finite() && params.te_s > 0.0 && params.tr_s.is_finite() && params.tr_s > 0.0) {
        return Err(Error::input(
            "simulate_image",
            format!("te {} s, tr {} s must be positive", params.te_s, params.tr_s),
        ));
    }
    let n = maps.t1.numel();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let (pd, t1, t2) = (
            maps.pd.data()[i] as f64,
            maps.t1.data()[i] as f64,
            maps.t2.data()[i] as f64,
        );
        if !(0.0..=1.0).contains(&pd) || t1 < 0.0 || t2 < 0.0 {
            return Err(Error::input(
                "simulate_image",
                format!("invalid tissue values at pixel {i}: pd {pd}, t1 {t1}, t2 {t2}"),
            ));
        }
        out.push(signal_unchecked(pd, t1, t2, params.te_s, params.tr_s) as f32);
    }
    Tensor::from_vec(maps.t1.shape(), out)
}

/// Draws `n` acquisition parameter pairs: TR uniform on [1.2, 10) s, TE
/// log-uniform on [0.02, 1) s so short echo times dominate.
pub fn sample_param_pairs(seed: u64, n: usize) -> Result<Vec<ScanParams>> {
    if n == 0 {
        return Err(Error::input("sample_param_pairs", "n must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ratio = TE_MAX_S / TE_MIN_S;
    Ok((0..n)
        .map(|_| {
            let u: f64 = rng.gen();
            let te_s = TE_MIN_S * ratio.powf(u);
            let tr_s = TR_MIN_S + (TR_MAX_S - TR_MIN_S) * rng.gen::<f64>();
            ScanParams { te_s, tr_s }
        })
        .collect())
}

/// Splitmix64 finalizer; the basis for all derived RNG streams.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent stream seed from a root seed and a path of salts.
/// Stable across releases: dataset bytes and resume behavior depend on it.
pub fn derive_stream(seed: u64, salts: &[u64]) -> u64 {
    salts.iter().fold(mix64(seed), |acc, &s| mix64(acc ^ mix64(s)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    D2p,
    P2p,
}

impl DatasetMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DatasetMode::D2p => "d2p",
            DatasetMode::P2p => "p2p",
        }
    }
}

impl std::str::FromStr for DatasetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d2p" => Ok(DatasetMode::D2p),
            "p2p" => Ok(DatasetMode::P2p),
            other => Err(Error::input("dataset_mode", format!("unknown mode {other:?}, expected d2p or p2p"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub mode: DatasetMode,
    pub n_pairs: usize,
    pub slices_per_pair: usize,
    /// Stored image side length; slices are resized to r x r.
    pub r: usize,
    pub seed: u64,
    /// Worker thread count; any value yields byte-identical output.
    pub workers: usize,
    /// Additive Gaussian noise sigma in signal units, 0 disables.
    pub noise_sigma: f64,
}

impl DatasetConfig {
    pub fn canonical(mode: DatasetMode, r: usize, seed: u64) -> Self {
        DatasetConfig {
            mode,
            n_pairs: 200,
            slices_per_pair: 24,
            r,
            seed,
            workers: 1,
            noise_sigma: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_pairs == 0 || self.slices_per_pair == 0 {
            return Err(Error::input("build_dataset", "n_pairs and slices_per_pair must be at least 1"));
        }
        if self.r < 2 {
            return Err(Error::input("build_dataset", "r must be at least 2"));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(Error::input("build_dataset", "noise_sigma must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Train/test sizes under the fixed 1500:3300 ratio.
pub fn split_counts(total: usize) -> (usize, usize) {
    let train = total * 5 / 16;
    (train, total - train)
}

/// One dataset sample held in memory: co-registered input/target images of
/// the same anatomy under two acquisitions.
#[derive(Debug, Clone)]
pub struct SliceSample {
    pub id: u64,
    pub phantom_id: u32,
    pub slice_index: u32,
    pub params_in: ScanParams,
    pub params_out: ScanParams,
    pub image_in: Tensor,
    pub image_out: Tensor,
}

/// Loads the images behind manifest rows, reading each distinct file once
/// (default-input rows share files).
pub fn load_samples(base_dir: &Path, rows: &[&SampleRow]) -> Result<Vec<SliceSample>> {
    let mut cache: BTreeMap<String, Arc<Tensor>> = BTreeMap::new();
    let mut fetch = |rel: &str, te: f64, tr: f64| -> Result<Arc<Tensor>> {
        if let Some(t) = cache.get(rel) {
            return Ok(Arc::clone(t));
        }
        let path = base_dir.join(rel);
        let (image, file_te, file_tr) = crate::io::slice::read_slice(&path)?;
        if (file_te, file_tr) != (te, tr) {
            return Err(Error::Format {
                path,
                detail: format!(
                    "slice records te {file_te} tr {file_tr}, manifest row says te {te} tr {tr}"
                ),
            });
        }
        let arc = Arc::new(image);
        cache.insert(rel.to_owned(), Arc::clone(&arc));
        Ok(arc)
    };
    rows.iter()
        .map(|row| {
            let image_in = fetch(&row.file_in, row.te_in, row.tr_in)?;
            let image_out = fetch(&row.file_out, row.te_out, row.tr_out)?;
            Ok(SliceSample {
                id: row.id,
                phantom_id: row.phantom_id,
                slice_index: row.slice_index,
                params_in: ScanParams::new(row.te_in, row.tr_in),
                params_out: ScanParams::new(row.te_out, row.tr_out),
                image_in: (*image_in).clone(),
                image_out: (*image_out).clone(),
            })
        })
        .collect()
}

/// Stream salts for per-file noise. `SALT_SHARED_IN` keys are shared across
/// every pair touching the same slice, which is what makes deduplicated
/// default-input files well-defined under noise.
const SALT_SHARED_IN: u64 = 1;
const SALT_SAMPLE_IN: u64 = 2;
const SALT_SAMPLE_OUT: u64 = 3;
const SALT_P2P_PARAMS: u64 = 4;
pub(crate) const SALT_SHUFFLE: u64 = 5;
pub(crate) const SALT_PHANTOM: u64 = 6;

struct FileJob {
    rel_path: String,
    maps: Arc<SliceMaps>,
    params: ScanParams,
    noise_seed: u64,
}

fn add_noise(image: &mut Tensor, sigma: f64, seed: u64) {
    if sigma == 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    for v in image.data_mut() {
        let noisy = *v as f64 + normal.sample(&mut rng);
        *v = noisy.clamp(0.0, 1.0) as f32;
    }
}

/// Builds a dataset on disk: slice files under `out_dir/slices` plus a
/// manifest. Phantoms are assigned round-robin to parameter pairs; the split
/// is pair-major so at most one pair straddles the train/test boundary.
pub fn build_dataset(
    phantoms: &[PhantomVolume],
    config: &DatasetConfig,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    config.validate()?;
    if phantoms.is_empty() {
        return Err(Error::input("build_dataset", "at least one phantom is required"));
    }

    let params_out = sample_param_pairs(config.seed, config.n_pairs)?;
    let params_in = match config.mode {
        DatasetMode::D2p => None,
        DatasetMode::P2p => Some(sample_param_pairs(
            derive_stream(config.seed, &[SALT_P2P_PARAMS]),
            config.n_pairs,
        )?),
    };

    // Resize the tissue maps once per used (phantom, slice position); pairs
    // sharing a phantom share the cache entries.
    let used: std::collections::BTreeSet<usize> =
        (0..config.n_pairs).map(|p| p % phantoms.len()).collect();
    let mut cache: BTreeMap<usize, (Vec<usize>, Vec<Arc<SliceMaps>>)> = BTreeMap::new();
    for &pid in &used {
        let vol = &phantoms[pid];
        let [d, _, _] = vol.dims();
        let indices = slice_indices(d, config.slices_per_pair)?;
        let slices = crate::phantom::extract_axial_slices(vol, config.slices_per_pair)?;
        let resized = slices
            .into_iter()
            .map(|m| {
                Ok(Arc::new(SliceMaps {
                    t1: resize_bilinear(&m.t1, config.r)?,
                    t2: resize_bilinear(&m.t2, config.r)?,
                    pd: resize_bilinear(&m.pd, config.r)?,
                }))
            })
            .collect::<Result<Vec<_>>>()?;
        cache.insert(pid, (indices, resized));
    }

    let total = config.n_pairs * config.slices_per_pair;
    let (n_train, _) = split_counts(total);
    let mut jobs: Vec<FileJob> = Vec::new();
    let mut shared_inputs: std::collections::BTreeSet<(usize, usize)> = std::collections::BTreeSet::new();
    let mut samples = Vec::with_capacity(total);

    for pair in 0..config.n_pairs {
        let pid = pair % phantoms.len();
        let (indices, maps) = &cache[&pid];
        let p_out = params_out[pair];
        let p_in = match &params_in {
            None => DEFAULT_PARAMS,
            Some(v) => v[pair],
        };
        for s in 0..config.slices_per_pair {
            let id = (pair * config.slices_per_pair + s) as u64;
            let slice_index = indices[s];
            let file_out = format!("slices/{id:06}_out.mrs");
            jobs.push(FileJob {
                rel_path: file_out.clone(),
                maps: Arc::clone(&maps[s]),
                params: p_out,
                noise_seed: derive_stream(config.seed, &[SALT_SAMPLE_OUT, id]),
            });
            let file_in = match config.mode {
                DatasetMode::D2p => {
                    let path = format!("slices/p{pid:03}_s{slice_index:03}_default.mrs");
                    if shared_inputs.insert((pid, slice_index)) {
                        jobs.push(FileJob {
                            rel_path: path.clone(),
                            maps: Arc::clone(&maps[s]),
                            params: DEFAULT_PARAMS,
                            noise_seed: derive_stream(
                                config.seed,
                                &[SALT_SHARED_IN, pid as u64, slice_index as u64],
                            ),
                        });
                    }
                    path
                }
                DatasetMode::P2p => {
                    let path = format!("slices/{id:06}_in.mrs");
                    jobs.push(FileJob {
                        rel_path: path.clone(),
                        maps: Arc::clone(&maps[s]),
                        params: p_in,
                        noise_seed: derive_stream(config.seed, &[SALT_SAMPLE_IN, id]),
                    });
                    path
                }
            };
            samples.push(SampleRow {
                id,
                phantom_id: pid as u32,
                slice_index: slice_index as u32,
                te_in: p_in.te_s,
                tr_in: p_in.tr_s,
                te_out: p_out.te_s,
                tr_out: p_out.tr_s,
                file_in,
                file_out,
                split: if (id as usize) < n_train { Split::Train } else { Split::Test },
            });
        }
    }

    std::fs::create_dir_all(out_dir.join("slices"))?;
    run_jobs(&jobs, config, out_dir)?;

    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        mode: config.mode.as_str().to_string(),
        r: config.r as u32,
        seed: config.seed,
        default_params: ManifestParams {
            te_s: DEFAULT_PARAMS.te_s,
            tr_s: DEFAULT_PARAMS.tr_s,
        },
        samples,
    };
    crate::io::manifest::save_manifest(out_dir, &manifest)?;
    manifest.validate(out_dir)?;
    Ok(manifest)
}

fn run_one(job: &FileJob, config: &DatasetConfig, out_dir: &Path) -> Result<()> {
    let mut image = simulate_image(&job.maps, job.params)?;
    add_noise(&mut image, config.noise_sigma, job.noise_seed);
    write_slice(&out_dir.join(&job.rel_path), &image, job.params.te_s, job.params.tr_s)
}

fn run_jobs(jobs: &[FileJob], config: &DatasetConfig, out_dir: &Path) -> Result<()> {
    let workers = config.workers.max(1).min(jobs.len().max(1));
    if workers == 1 {
        for job in jobs {
            run_one(job, config, out_dir)?;
        }
        return Ok(());
    }
    // Each file's bytes depend only on its job, so chunk assignment cannot
    // change the output.
    let chunk = jobs.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| scope.spawn(move || part.iter().try_for_each(|j| run_one(j, config, out_dir))))
            .collect();
        for h in handles {
            h.join().expect("dataset worker panicked")?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PaletteFamily};
    use proptest::prelude::*;

    #[test]
    fn signal_matches_frozen_closed_form() {
        let s = spin_echo_signal(1.0, 1.0, 0.1, 0.05, 4.5).unwrap();
        assert!((s - 0.599792712713548).abs() < 1e-12, "{s}");
        assert_eq!(spin_echo_signal(0.7, 0.0, 0.0, 0.05, 4.5).unwrap(), 0.0);
        let limit = spin_echo_signal(0.83, 1.0, 0.1, 1e-9, 1e9).unwrap();
        assert!((limit - 0.83).abs() < 1e-6);
    }

    #[test]
    fn signal_rejects_bad_inputs() {
        assert!(spin_echo_signal(-0.1, 1.0, 0.1, 0.05, 4.5).is_err());
        assert!(spin_echo_signal(1.1, 1.0, 0.1, 0.05, 4.5).is_err());
        assert!(spin_echo_signal(0.5, -1.0, 0.1, 0.05, 4.5).is_err());
        assert!(spin_echo_signal(0.5, 1.0, 0.1, 0.0, 4.5).is_err());
        assert!(spin_echo_signal(0.5, 1.0, 0.1, 0.05, -4.5).is_err());
        assert!(spin_echo_signal(0.5, f64::NAN, 0.1, 0.05, 4.5).is_err());
    }

    #[test]
    fn signal_monotone_and_bounded_on_grid() {
        let tes: Vec<f64> = (0..10).map(|i| 0.02 + i as f64 * 0.1).collect();
        let trs: Vec<f64> = (0..10).map(|i| 1.2 + i as f64 * 0.97).collect();
        let tissues = [(0.9, 0.26, 0.08), (1.0, 4.2, 2.0), (0.85, 0.92, 0.10), (0.75, 0.78, 0.09), (0.95, 1.2, 0.30)];
        for &(pd, t1, t2) in &tissues {
            for w in tes.windows(2) {
                for &tr in &trs {
                    let a = spin_echo_signal(pd, t1, t2, w[0], tr).unwrap();
                    let b = spin_echo_signal(pd, t1, t2, w[1], tr).unwrap();
                    assert!(b < a, "te monotonicity at te {:?} tr {tr}", w);
                    assert!((0.0..=pd).contains(&a));
                }
            }
            for &te in &tes {
                for w in trs.windows(2) {
                    let a = spin_echo_signal(pd, t1, t2, te, w[0]).unwrap();
                    let b = spin_echo_signal(pd, t1, t2, te, w[1]).unwrap();
                    assert!(b > a, "tr monotonicity at te {te} tr {:?}", w);
                }
            }
        }
    }

    fn toy_maps() -> SliceMaps {
        SliceMaps {
            t1: Tensor::from_vec(&[2, 2], vec![0.0, 0.92, 0.78, 4.2]).unwrap(),
            t2: Tensor::from_vec(&[2, 2], vec![0.0, 0.10, 0.09, 2.0]).unwrap(),
            pd: Tensor::from_vec(&[2, 2], vec![0.0, 0.85, 0.75, 1.0]).unwrap(),
        }
    }

    #[test]
    fn simulate_image_matches_signal_and_orders_in_te_tr() {
        let maps = toy_maps();
        let img = simulate_image(&maps, DEFAULT_PARAMS).unwrap();
        assert_eq!(img.data()[0], 0.0);
        let want = spin_echo_signal(0.85, 0.92, 0.10, 0.05, 4.5).unwrap();
        assert!((img.data()[1] as f64 - want).abs() < 1e-7);

        let at = |te: f64, tr: f64| simulate_image(&maps, ScanParams::new(te, tr)).unwrap();
        let (a, b, c) = (at(0.02, 4.5), at(0.2, 4.5), at(1.0, 4.5));
        for i in 0..4 {
            assert!(a.data()[i] >= b.data()[i] && b.data()[i] >= c.data()[i]);
        }
        let (lo, hi) = (at(0.05, 1.2), at(0.05, 10.0));
        for i in 0..4 {
            assert!(hi.data()[i] >= lo.data()[i]);
        }

        let all_bg = SliceMaps {
            t1: Tensor::zeros(&[3, 3]),
            t2: Tensor::zeros(&[3, 3]),
            pd: Tensor::zeros(&[3, 3]),
        };
        assert!(simulate_image(&all_bg, DEFAULT_PARAMS).unwrap().data().iter().all(|&v| v == 0.0));

        let bad = SliceMaps {
            t1: Tensor::zeros(&[2, 3]),
            ..toy_maps()
        };
        assert!(simulate_image(&bad, DEFAULT_PARAMS).is_err());
    }

    #[test]
    fn sampled_params_stay_in_range_and_are_deterministic() {
        let a = sample_param_pairs(7, 200).unwrap();
        let b = sample_param_pairs(7, 200).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, sample_param_pairs(8, 200).unwrap());
        for p in &a {
            p.validate().unwrap();
        }
    }

    #[test]
    fn te_distribution_skews_low() {
        let mut tes: Vec<f64> = sample_param_pairs(123, 10_000)
            .unwrap()
            .into_iter()
            .map(|p| p.te_s)
            .collect();
        tes.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = (tes[4999] + tes[5000]) / 2.0;
        let geo = (TE_MIN_S * TE_MAX_S).sqrt();
        assert!((median - geo).abs() / geo < 0.15, "median {median}");
        assert!(median < 0.51);
    }

    #[test]
    fn split_ratio_matches_canonical_and_desk() {
        assert_eq!(split_counts(4800), (1500, 3300));
        assert_eq!(split_counts(960), (300, 660));
        assert_eq!(split_counts(16), (5, 11));
    }

    fn tiny_phantoms(n: usize) -> Vec<PhantomVolume> {
        (0..n)
            .map(|i| generate_phantom(900 + i as u64, [24, 20, 20], PaletteFamily::Default).unwrap())
            .collect()
    }

    fn dataset_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
        let mut out = BTreeMap::new();
        for entry in walk(dir) {
            let rel = entry.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
            out.insert(rel, std::fs::read(&entry).unwrap());
        }
        out
    }

    fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
        let mut files = Vec::new();
        let mut stack = vec![dir.to_path_buf()];
        while let Some(d) = stack.pop() {
            for e in std::fs::read_dir(&d).unwrap() {
                let p = e.unwrap().path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p);
                }
            }
        }
        files
    }

    #[test]
    fn d2p_dataset_layout_and_worker_byte_identity() {
        let phantoms = tiny_phantoms(2);
        let base = DatasetConfig {
            mode: DatasetMode::D2p,
            n_pairs: 3,
            slices_per_pair: 4,
            r: 16,
            seed: 5,
            workers: 1,
            noise_sigma: 0.01,
        };
        let dir1 = tempfile::tempdir().unwrap();
        let m1 = build_dataset(&phantoms, &base, dir1.path()).unwrap();
        assert_eq!(m1.samples.len(), 12);
        assert_eq!(m1.train_rows().count(), 12 * 5 / 16);
        for row in &m1.samples {
            assert_eq!((row.te_in, row.tr_in), (DEFAULT_PARAMS.te_s, DEFAULT_PARAMS.tr_s));
            let (img, te, tr) = crate::io::slice::read_slice(&dir1.path().join(&row.file_out)).unwrap();
            assert_eq!(img.shape(), &[16, 16]);
            assert_eq!((te, tr), (row.te_out, row.tr_out));
            assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        // Pairs 0 and 2 share phantom 0, so their default inputs are the
        // same files.
        let in_files: std::collections::BTreeSet<_> = m1.samples.iter().map(|s| s.file_in.clone()).collect();
        assert_eq!(in_files.len(), 8);

        let threaded = DatasetConfig { workers: 3, ..base.clone() };
        let dir2 = tempfile::tempdir().unwrap();
        build_dataset(&phantoms, &threaded, dir2.path()).unwrap();
        assert_eq!(dataset_bytes(dir1.path()), dataset_bytes(dir2.path()));

        let reseeded = DatasetConfig { seed: 6, ..base };
        let dir3 = tempfile::tempdir().unwrap();
        build_dataset(&phantoms, &reseeded, dir3.path()).unwrap();
        assert_ne!(dataset_bytes(dir1.path()), dataset_bytes(dir3.path()));
    }

    #[test]
    fn p2p_dataset_samples_independent_input_params() {
        let phantoms = tiny_phantoms(1);
        let config = DatasetConfig {
            mode: DatasetMode::P2p,
            n_pairs: 4,
            slices_per_pair: 2,
            r: 16,
            seed: 9,
            workers: 2,
            noise_sigma: 0.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let m = build_dataset(&phantoms, &config, dir.path()).unwrap();
        assert_eq!(m.samples.len(), 8);
        assert!(m.samples.iter().any(|s| (s.te_in, s.tr_in) != (DEFAULT_PARAMS.te_s, DEFAULT_PARAMS.tr_s)));
        for row in &m.samples {
            assert_ne!(row.file_in, row.file_out);
            ScanParams::new(row.te_in, row.tr_in).validate().unwrap();
            let (_, te, tr) = crate::io::slice::read_slice(&dir.path().join(&row.file_in)).unwrap();
            assert_eq!((te, tr), (row.te_in, row.tr_in));
        }
    }

    #[test]
    fn build_rejects_empty_phantoms_and_bad_config() {
        let dir = tempfile::tempdir().unwrap();
        let config = DatasetConfig::canonical(DatasetMode::D2p, 16, 1);
        assert!(build_dataset(&[], &config, dir.path()).is_err());
        let phantoms = tiny_phantoms(1);
        let bad = DatasetConfig { r: 1, ..config };
        assert!(build_dataset(&phantoms, &bad, dir.path()).is_err());
    }

    proptest! {
        #[test]
        fn signal_bounded_and_te_monotone(
            pd in 0.0f64..1.0,
            t1 in 0.05f64..4.5,
            t2 in 0.02f64..2.2,
            te in 0.02f64..0.98,
            tr in 1.2f64..10.0,
        ) {
            let s = spin_echo_signal(pd, t1, t2, te, tr).unwrap();
            prop_assert!((0.0..=pd).contains(&s));
            let s2 = spin_echo_signal(pd, t1, t2, te + 0.02, tr).unwrap();
            prop_assert!(s2 <= s);
        }
    }
}
