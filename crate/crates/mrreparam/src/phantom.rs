//! Procedural tissue phantoms: nested-ellipsoid T1/T2/PD volumes and axial
//! slice extraction.
//!
//! The subject is a stack of ellipsoids painted outside-in (fat head shell,
//! CSF layer, gray-matter ribbon, white-matter interior, up to three
//! lesions); later shapes overwrite earlier ones, so every voxel holds the
//! values of exactly one palette tissue.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One tissue's relaxation times (seconds) and proton density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TissueClass {
    pub label: &'static str,
    pub t1_s: f64,
    pub t2_s: f64,
    pub pd: f64,
}

/// Palette variant. `Shifted` scales every non-background t1/t2 by 1.15
/// (clamped to the 4.5 s / 2.2 s ceilings) and stands in for an
/// out-of-distribution subject family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaletteFamily {
    Default,
    Shifted,
}

pub const T1_MAX_S: f64 = 4.5;
pub const T2_MAX_S: f64 = 2.2;

/// Background plus the five tissues used by the generator. Background is
/// entry 0 and is the only all-zero entry.
pub fn default_palette() -> Vec<TissueClass> {
    palette(PaletteFamily::Default)
}

pub fn palette(family: PaletteFamily) -> Vec<TissueClass> {
    let base = [
        TissueClass { label: "background", t1_s: 0.0, t2_s: 0.0, pd: 0.0 },
        TissueClass { label: "fat", t1_s: 0.26, t2_s: 0.08, pd: 0.90 },
        TissueClass { label: "csf", t1_s: 4.2, t2_s: 2.0, pd: 1.0 },
        TissueClass { label: "gray-matter", t1_s: 0.92, t2_s: 0.10, pd: 0.85 },
        TissueClass { label: "white-matter", t1_s: 0.78, t2_s: 0.09, pd: 0.75 },
        TissueClass { label: "lesion", t1_s: 1.2, t2_s: 0.30, pd: 0.95 },
    ];
    match family {
        PaletteFamily::Default => base.to_vec(),
        PaletteFamily::Shifted => base
            .iter()
            .map(|t| {
                if t.t1_s == 0.0 {
                    *t
                } else {
                    TissueClass {
                        label: t.label,
                        t1_s: (t.t1_s * 1.15).min(T1_MAX_S),
                        t2_s: (t.t2_s * 1.15).min(T2_MAX_S),
                        pd: t.pd,
                    }
                }
            })
            .collect(),
    }
}

/// Co-registered T1/T2/PD volumes, each shaped `[D, H, W]` with the axial
/// axis first.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomVolume {
    pub t1: Tensor,
    pub t2: Tensor,
    pub pd: Tensor,
}

impl PhantomVolume {
    pub fn dims(&self) -> [usize; 3] {
        match self.t1.shape() {
            [d, h, w] => [*d, *h, *w],
            other => unreachable!("phantom volume rank: {other:?}"),
        }
    }
}

/// T1/T2/PD maps of one axial slice, each `[H, W]`.
#[derive(Debug, Clone)]
pub struct SliceMaps {
    pub t1: Tensor,
    pub t2: Tensor,
    pub pd: Tensor,
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
    cos_t: f64,
    sin_t: f64,
    tissue: usize,
}

impl Ellipsoid {
    fn contains(&self, z: f64, y: f64, x: f64) -> bool {
        let dz = z - self.center[0];
        let dy = y - self.center[1];
        let dx = x - self.center[2];
        // Rotation about the axial axis acts on the (y, x) plane.
        let ry = dy * self.cos_t - dx * self.sin_t;
        let rx = dy * self.sin_t + dx * self.cos_t;
        let q = (dz / self.semi[0]).powi(2) + (ry / self.semi[1]).powi(2) + (rx / self.semi[2]).powi(2);
        q <= 1.0
    }
}

pub const DEFAULT_PHANTOM_SHAPE: [usize; 3] = [108, 90, 90];

/// Deterministic nested-ellipsoid phantom. All dims must be at least 16.
pub fn generate_phantom(seed: u64, shape: [usize; 3], family: PaletteFamily) -> Result<PhantomVolume> {
    if shape.iter().any(|&d| d < 16) {
        return Err(Error::input(
            "generate_phantom",
            format!("all dims must be >= 16, got {shape:?}"),
        ));
    }
    let pal = palette(family);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [d, h, w] = shape;
    let fd = [d as f64, h as f64, w as f64];

    let center: Vec<f64> = (0..3).map(|a| (0.5 + rng.gen_range(-0.02..0.02)) * fd[a]).collect();
    // Outer head half-extents as fractions of each axis; shells shrink these.
    let head_frac = [
        0.42 + rng.gen_range(-0.015..0.015),
        0.44 + rng.gen_range(-0.015..0.015),
        0.44 + rng.gen_range(-0.015..0.015),
    ];
    // Shell scales are strictly decreasing so all four shells nest.
    let shells: [(usize, f64); 4] = [
        (1, 1.0),                                  // fat
        (2, 0.93 + rng.gen_range(-0.01..0.01)),    // csf
        (3, 0.865 + rng.gen_range(-0.01..0.01)),   // gray matter
        (4, 0.78 + rng.gen_range(-0.01..0.01)),    // white matter
    ];
    let mut ellipsoids: Vec<Ellipsoid> = shells
        .iter()
        .map(|&(tissue, scale)| {
            let theta: f64 = rng.gen_range(-0.3..0.3);
            Ellipsoid {
                center: [center[0], center[1], center[2]],
                semi: [
                    head_frac[0] * scale * fd[0],
                    head_frac[1] * scale * fd[1],
                    head_frac[2] * scale * fd[2],
                ],
                cos_t: theta.cos(),
                sin_t: theta.sin(),
                tissue,
            }
        })
        .collect();

    let n_lesions = rng.gen_range(0..=3usize);
    let wm = &ellipsoids[3];
    let wm_semi = wm.semi;
    let wm_center = wm.center;
    for _ in 0..n_lesions {
        let c = [
            wm_center[0] + rng.gen_range(-0.45..0.45) * wm_semi[0],
            wm_center[1] + rng.gen_range(-0.45..0.45) * wm_semi[1],
            wm_center[2] + rng.gen_range(-0.45..0.45) * wm_semi[2],
        ];
        let theta: f64 = rng.gen_range(-1.5..1.5);
        ellipsoids.push(Ellipsoid {
            center: c,
            semi: [
                rng.gen_range(2.0..5.0),
                rng.gen_range(2.0..5.0),
                rng.gen_range(2.0..5.0),
            ],
            cos_t: theta.cos(),
            sin_t: theta.sin(),
            tissue: 5,
        });
    }

    let mut t1 = Tensor::zeros(&shape);
    let mut t2 = Tensor::zeros(&shape);
    let mut pd = Tensor::zeros(&shape);
    for zi in 0..d {
        for yi in 0..h {
            for xi in 0..w {
                let (z, y, x) = (zi as f64 + 0.5, yi as f64 + 0.5, xi as f64 + 0.5);
                // Last containing ellipsoid wins (painter's order).
                let Some(e) = ellipsoids.iter().rev().find(|e| e.contains(z, y, x)) else {
                    continue;
                };
                let tc = pal[e.tissue];
                let idx = (zi * h + yi) * w + xi;
                t1.data_mut()[idx] = tc.t1_s as f32;
                t2.data_mut()[idx] = tc.t2_s as f32;
                pd.data_mut()[idx] = tc.pd as f32;
            }
        }
    }
    Ok(PhantomVolume { t1, t2, pd })
}

/// Indices of `count` axial slices evenly spaced across the central 60% band.
pub fn slice_indices(depth: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > depth {
        return Err(Error::input(
            "extract_axial_slices",
            format!("count {count} outside 1..={depth}"),
        ));
    }
    let band_lo = 0.2 * depth as f64;
    let band = 0.6 * depth as f64;
    Ok((0..count)
        .map(|i| {
            let pos = band_lo + (i as f64 + 0.5) * band / count as f64;
            (pos.round() as usize).min(depth - 1)
        })
        .collect())
}

pub fn extract_axial_slices(vol: &PhantomVolume, count: usize) -> Result<Vec<SliceMaps>> {
    let [d, h, w] = vol.dims();
    let indices = slice_indices(d, count)?;
    let plane = h * w;
    Ok(indices
        .into_iter()
        .map(|zi| {
            let grab = |v: &Tensor| {
                Tensor::from_vec(&[h, w], v.data()[zi * plane..(zi + 1) * plane].to_vec())
                    .expect("slice extent")
            };
            SliceMaps {
                t1: grab(&vol.t1),
                t2: grab(&vol.t2),
                pd: grab(&vol.pd),
            }
        })
        .collect())
}

/// Corner-aligned bilinear resize of a 2D map to `r` x `r`.
pub fn resize_bilinear(map: &Tensor, r: usize) -> Result<Tensor> {
    let [h, w] = map.dims2("resize_bilinear")?;
    if h < 2 || w < 2 || r < 2 {
        return Err(Error::input(
            "resize_bilinear",
            format!("source {h}x{w} and target {r} must all be >= 2"),
        ));
    }
    let mut out = Tensor::zeros(&[r, r]);
    let sy = (h - 1) as f64 / (r - 1) as f64;
    let sx = (w - 1) as f64 / (r - 1) as f64;
    for oy in 0..r {
        let fy = oy as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..r {
            let fx = ox as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let p00 = map.data()[y0 * w + x0] as f64;
            let p01 = map.data()[y0 * w + x1] as f64;
            let p10 = map.data()[y1 * w + x0] as f64;
            let p11 = map.data()[y1 * w + x1] as f64;
            let top = p00 * (1.0 - wx) + p01 * wx;
            let bot = p10 * (1.0 - wx) + p11 * wx;
            out.data_mut()[oy * r + ox] = (top * (1.0 - wy) + bot * wy) as f32;
        }
    }
    Ok(out)
}
