//! Forward and backward kernels for every layer kind.
//!
//! Convolutions use the cross-correlation convention and run through a shared
//! im2col/col2im pair plus a gemm. A transposed convolution with stride 2,
//! padding 1 and output padding 1 is the exact adjoint of a stride-2 conv over
//! the doubled spatial extent, so both directions of both ops reduce to the
//! same three primitives.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Spatial geometry of one conv view: image `[C, h, w]` against a `k`-kernel
/// with stride `s` and padding `p`, producing `[C*k*k, oh*ow]` columns.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(h: usize, w: usize, k: usize, stride: usize) -> Result<Self> {
        let pad = (k - 1) / 2;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}x{w} smaller than kernel {k} with pad {pad}"),
            ));
        }
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        Ok(ConvGeom {
            h,
            w,
            k,
            stride,
            pad,
            oh,
            ow,
        })
    }
}

/// Gather image patches into columns: `img` is `[c, h, w]`, `col` is
/// `[c*k*k, oh*ow]`. `col` is fully overwritten.
fn im2col<E: Element>(img: &[E], c: usize, g: ConvGeom, col: &mut [E]) {
    debug_assert_eq!(img.len(), c * g.h * g.w);
    debug_assert_eq!(col.len(), c * g.k * g.k * g.oh * g.ow);
    for v in col.iter_mut() {
        *v = E::zero();
    }
    for ci in 0..c {
        let plane = &img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for a in 0..g.k {
            for b in 0..g.k {
                let row = ((ci * g.k + a) * g.k + b) * g.oh * g.ow;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + a) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = iy as usize * g.w;
                    let dst = row + oy * g.ow;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + b) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            col[dst + ox] = plane[src + ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back onto the image: exact adjoint of [`im2col`].
fn col2im<E: Element>(col: &[E], c: usize, g: ConvGeom, img: &mut [E]) {
    debug_assert_eq!(img.len(), c * g.h * g.w);
    debug_assert_eq!(col.len(), c * g.k * g.k * g.oh * g.ow);
    for ci in 0..c {
        let plane = &mut img[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for a in 0..g.k {
            for b in 0..g.k {
                let row = ((ci * g.k + a) * g.k + b) * g.oh * g.ow;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + a) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = iy as usize * g.w;
                    let src = row + oy * g.ow;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + b) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[dst + ix as usize] += col[src + ox];
                        }
                    }
                }
            }
        }
    }
}

fn mat<'a, E: Element>(data: &'a [E], rows: usize, cols: usize) -> ArrayView2<'a, E> {
    ArrayView2::from_shape((rows, cols), data).expect("matrix view shape")
}

fn mat_mut<'a, E: Element>(data: &'a mut [E], rows: usize, cols: usize) -> ArrayViewMut2<'a, E> {
    ArrayViewMut2::from_shape((rows, cols), data).expect("matrix view shape")
}

fn check_kernel(op: &'static str, k: usize) -> Result<()> {
    if k != 1 && k != 3 {
        return Err(Error::input(op, format!("kernel size {k} not in {{1,3}}")));
    }
    Ok(())
}

/// Stride-`s` cross-correlation. `x` is `[N,C,H,W]`, `w` is `[F,C,k,k]`
/// (k in {1,3}; padding 1 for k=3, 0 for k=1), `b` is `[F]`.
pub fn conv2d_forward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &Tensor<E>,
    stride: usize,
) -> Result<Tensor<E>> {
    let [n, c, h, wd] = x.dims4("conv2d")?;
    let ws = w.shape();
    if ws.len() != 4 || ws[2] != ws[3] {
        return Err(Error::shape(
            "conv2d",
            format!("weight shape {ws:?} is not [F,C,k,k]"),
        ));
    }
    let (f, wc, k) = (ws[0], ws[1], ws[2]);
    check_kernel("conv2d", k)?;
    if stride != 1 && stride != 2 {
        return Err(Error::input("conv2d", format!("stride {stride} not in {{1,2}}")));
    }
    if wc != c {
        return Err(Error::shape(
            "conv2d",
            format!("input has {c} channels but weight expects {wc}"),
        ));
    }
    if b.shape() != [f] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} does not match {f} filters", b.shape()),
        ));
    }
    let g = ConvGeom::new(h, wd, k, stride)?;
    let ckk = c * k * k;
    let mut out = Tensor::zeros(&[n, f, g.oh, g.ow]);
    let mut col = vec![E::zero(); ckk * g.oh * g.ow];
    let wm = mat(w.data(), f, ckk);
    for ni in 0..n {
        im2col(&x.data()[ni * c * h * wd..(ni + 1) * c * h * wd], c, g, &mut col);
        let out_n = &mut out.data_mut()[ni * f * g.oh * g.ow..(ni + 1) * f * g.oh * g.ow];
        for (fi, row) in out_n.chunks_exact_mut(g.oh * g.ow).enumerate() {
            let bias = b.data()[fi];
            for v in row.iter_mut() {
                *v = bias;
            }
        }
        let mut om = mat_mut(out_n, f, g.oh * g.ow);
        general_mat_mul(E::one(), &wm, &mat(&col, ckk, g.oh * g.ow), E::one(), &mut om);
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input, weight, and bias.
pub fn conv2d_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    grad_out: &Tensor<E>,
    stride: usize,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<E>>, Option<Tensor<E>>, Tensor<E>) {
    let [n, c, h, wd] = x.dims4("conv2d").expect("checked in forward");
    let (f, k) = (w.shape()[0], w.shape()[2]);
    let g = ConvGeom::new(h, wd, k, stride).expect("checked in forward");
    let ckk = c * k * k;
    let spatial = g.oh * g.ow;

    let mut db = Tensor::zeros(&[f]);
    for ni in 0..n {
        let go = &grad_out.data()[ni * f * spatial..(ni + 1) * f * spatial];
        for fi in 0..f {
            let mut acc = 0.0f64;
            for &v in &go[fi * spatial..(fi + 1) * spatial] {
                acc += v.as_f64();
            }
            db.data_mut()[fi] += E::from_f64(acc);
        }
    }

    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut col = vec![E::zero(); ckk * spatial];
    let wm = mat(w.data(), f, ckk);
    for ni in 0..n {
        let go = mat(&grad_out.data()[ni * f * spatial..(ni + 1) * f * spatial], f, spatial);
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[ni * c * h * wd..(ni + 1) * c * h * wd], c, g, &mut col);
            let mut dwm = mat_mut(dw.data_mut(), f, ckk);
            general_mat_mul(E::one(), &go, &mat(&col, ckk, spatial).t(), E::one(), &mut dwm);
        }
        if let Some(dx) = dx.as_mut() {
            {
                let mut dcol = mat_mut(&mut col, ckk, spatial);
                general_mat_mul(E::one(), &wm.t(), &go, E::zero(), &mut dcol);
            }
            col2im(
                &col,
                c,
                g,
                &mut dx.data_mut()[ni * c * h * wd..(ni + 1) * c * h * wd],
            );
        }
    }
    (dx, dw, db)
}

/// Transposed 3x3 convolution, stride 2, padding 1, output padding 1: the
/// spatial extent exactly doubles. `x` is `[N,C,H,W]`, `w` is `[C,F,3,3]`,
/// `b` is `[F]`, output `[N,F,2H,2W]`.
pub fn tconv2d_forward<E: Element>(x: &Tensor<E>, w: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let [n, c, h, wd] = x.dims4("tconv2d")?;
    let ws = w.shape();
    if ws.len() != 4 || ws[2] != 3 || ws[3] != 3 {
        return Err(Error::shape(
            "tconv2d",
            format!("weight shape {ws:?} is not [C,F,3,3]"),
        ));
    }
    let (wc, f) = (ws[0], ws[1]);
    if wc != c {
        return Err(Error::shape(
            "tconv2d",
            format!("input has {c} channels but weight expects {wc}"),
        ));
    }
    if b.shape() != [f] {
        return Err(Error::shape(
            "tconv2d",
            format!("bias shape {:?} does not match {f} filters", b.shape()),
        ));
    }
    let (ho, wo) = (2 * h, 2 * wd);
    // The output plays the image role of a stride-2 conv view whose column
    // grid is exactly the tconv input grid.
    let g = ConvGeom::new(ho, wo, 3, 2)?;
    debug_assert_eq!((g.oh, g.ow), (h, wd));
    let fkk = f * 9;
    let mut out = Tensor::zeros(&[n, f, ho, wo]);
    let mut col = vec![E::zero(); fkk * h * wd];
    let wm = mat(w.data(), c, fkk);
    for ni in 0..n {
        let xm = mat(&x.data()[ni * c * h * wd..(ni + 1) * c * h * wd], c, h * wd);
        {
            let mut cm = mat_mut(&mut col, fkk, h * wd);
            general_mat_mul(E::one(), &wm.t(), &xm, E::zero(), &mut cm);
        }
        let out_n = &mut out.data_mut()[ni * f * ho * wo..(ni + 1) * f * ho * wo];
        col2im(&col, f, g, out_n);
        for (fi, row) in out_n.chunks_exact_mut(ho * wo).enumerate() {
            let bias = b.data()[fi];
            for v in row.iter_mut() {
                *v += bias;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`tconv2d_forward`]; the input gradient is a stride-2
/// convolution of the upstream gradient with the same weights.
pub fn tconv2d_backward<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    grad_out: &Tensor<E>,
    need_dx: bool,
    need_dw: bool,
) -> (Option<Tensor<E>>, Option<Tensor<E>>, Tensor<E>) {
    let [n, c, h, wd] = x.dims4("tconv2d").expect("checked in forward");
    let f = w.shape()[1];
    let (ho, wo) = (2 * h, 2 * wd);
    let g = ConvGeom::new(ho, wo, 3, 2).expect("checked in forward");
    let fkk = f * 9;

    let mut db = Tensor::zeros(&[f]);
    for ni in 0..n {
        let go = &grad_out.data()[ni * f * ho * wo..(ni + 1) * f * ho * wo];
        for fi in 0..f {
            let mut acc = 0.0f64;
            for &v in &go[fi * ho * wo..(fi + 1) * ho * wo] {
                acc += v.as_f64();
            }
            db.data_mut()[fi] += E::from_f64(acc);
        }
    }

    let mut dx = need_dx.then(|| Tensor::zeros(x.shape()));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape()));
    let mut col = vec![E::zero(); fkk * h * wd];
    let wm = mat(w.data(), c, fkk);
    for ni in 0..n {
        im2col(&grad_out.data()[ni * f * ho * wo..(ni + 1) * f * ho * wo], f, g, &mut col);
        let cm = mat(&col, fkk, h * wd);
        if let Some(dx) = dx.as_mut() {
            let mut dxm = mat_mut(
                &mut dx.data_mut()[ni * c * h * wd..(ni + 1) * c * h * wd],
                c,
                h * wd,
            );
            general_mat_mul(E::one(), &wm, &cm, E::zero(), &mut dxm);
        }
        if let Some(dw) = dw.as_mut() {
            let xm = mat(&x.data()[ni * c * h * wd..(ni + 1) * c * h * wd], c, h * wd);
            let mut dwm = mat_mut(dw.data_mut(), c, fkk);
            general_mat_mul(E::one(), &xm, &cm.t(), E::one(), &mut dwm);
        }
    }
    (dx, dw, db)
}

/// Per-channel statistics saved by a normalization forward pass for backward.
#[derive(Debug, Clone)]
pub struct NormStats<E: Element> {
    pub mean: Vec<E>,
    pub invstd: Vec<E>,
}

fn mean_var_f64<E: Element>(iter: impl Iterator<Item = E> + Clone, m: usize) -> (f64, f64) {
    let mut sum = 0.0f64;
    for v in iter.clone() {
        sum += v.as_f64();
    }
    let mean = sum / m as f64;
    let mut acc = 0.0f64;
    for v in iter {
        let d = v.as_f64() - mean;
        acc += d * d;
    }
    (mean, acc / m as f64)
}

/// Batch normalization over `(N, H, W)` per channel.
///
/// Train mode normalizes with batch statistics and, when running buffers are
/// supplied, folds them in with the given momentum. Eval mode reads the
/// running buffers only.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm_forward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
    train: bool,
    running: Option<(&mut Tensor<E>, &mut Tensor<E>)>,
    momentum: f64,
) -> Result<(Tensor<E>, NormStats<E>)> {
    let [n, c, h, w] = x.dims4("batchnorm2d")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "batchnorm2d",
            format!("affine shapes {:?}/{:?} vs {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    let m = n * h * w;
    let mut out = Tensor::zeros(x.shape());
    let mut stats = NormStats {
        mean: vec![E::zero(); c],
        invstd: vec![E::zero(); c],
    };
    if train {
        if m < 2 {
            return Err(Error::DegenerateVariance {
                op: "batchnorm2d",
                detail: format!("train mode needs N*H*W >= 2, got {m}"),
            });
        }
        let mut new_mean = vec![0.0f64; c];
        let mut new_var = vec![0.0f64; c];
        for ci in 0..c {
            let ch = channel_iter(x.data(), n, c, h * w, ci);
            let (mean, var) = mean_var_f64(ch, m);
            new_mean[ci] = mean;
            new_var[ci] = var;
            let invstd = 1.0 / (var + eps).sqrt();
            stats.mean[ci] = E::from_f64(mean);
            stats.invstd[ci] = E::from_f64(invstd);
            normalize_channel(x, &mut out, n, c, h * w, ci, mean, invstd, gamma.data()[ci], beta.data()[ci]);
        }
        if let Some((rmean, rvar)) = running {
            for ci in 0..c {
                let rm = rmean.data()[ci].as_f64();
                let rv = rvar.data()[ci].as_f64();
                rmean.data_mut()[ci] = E::from_f64((1.0 - momentum) * rm + momentum * new_mean[ci]);
                rvar.data_mut()[ci] = E::from_f64((1.0 - momentum) * rv + momentum * new_var[ci]);
            }
        }
    } else {
        let (rmean, rvar) = match running {
            Some(r) => r,
            None => {
                return Err(Error::input(
                    "batchnorm2d",
                    "eval mode requires running statistics",
                ))
            }
        };
        for ci in 0..c {
            let mean = rmean.data()[ci].as_f64();
            let invstd = 1.0 / (rvar.data()[ci].as_f64() + eps).sqrt();
            stats.mean[ci] = E::from_f64(mean);
            stats.invstd[ci] = E::from_f64(invstd);
            normalize_channel(x, &mut out, n, c, h * w, ci, mean, invstd, gamma.data()[ci], beta.data()[ci]);
        }
    }
    Ok((out, stats))
}

fn channel_iter<'a, E: Element>(
    data: &'a [E],
    n: usize,
    c: usize,
    plane: usize,
    ci: usize,
) -> impl Iterator<Item = E> + Clone + 'a {
    (0..n).flat_map(move |ni| {
        let base = (ni * c + ci) * plane;
        data[base..base + plane].iter().copied()
    })
}

#[allow(clippy::too_many_arguments)]
fn normalize_channel<E: Element>(
    x: &Tensor<E>,
    out: &mut Tensor<E>,
    n: usize,
    c: usize,
    plane: usize,
    ci: usize,
    mean: f64,
    invstd: f64,
    gamma: E,
    beta: E,
) {
    let mean = E::from_f64(mean);
    let invstd = E::from_f64(invstd);
    for ni in 0..n {
        let base = (ni * c + ci) * plane;
        let src = &x.data()[base..base + plane];
        let dst = &mut out.data_mut()[base..base + plane];
        for (d, &s) in dst.iter_mut().zip(src.iter()) {
            *d = gamma * ((s - mean) * invstd) + beta;
        }
    }
}

/// Backward pass for batch normalization. In train mode the statistics are a
/// function of the input; in eval mode the map is a fixed affine transform.
pub fn batchnorm_backward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    stats: &NormStats<E>,
    train: bool,
    grad_out: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let [n, c, h, w] = x.dims4("batchnorm2d").expect("checked in forward");
    let plane = h * w;
    let m = (n * plane) as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ci in 0..c {
        let mean = stats.mean[ci].as_f64();
        let invstd = stats.invstd[ci].as_f64();
        let gm = gamma.data()[ci].as_f64();
        let mut sum_g = 0.0f64;
        let mut sum_gx = 0.0f64;
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let g = grad_out.data()[base + i].as_f64();
                let xhat = (x.data()[base + i].as_f64() - mean) * invstd;
                sum_g += g;
                sum_gx += g * xhat;
            }
        }
        dgamma.data_mut()[ci] = E::from_f64(sum_gx);
        dbeta.data_mut()[ci] = E::from_f64(sum_g);
        for ni in 0..n {
            let base = (ni * c + ci) * plane;
            for i in 0..plane {
                let g = grad_out.data()[base + i].as_f64();
                let v = if train {
                    let xhat = (x.data()[base + i].as_f64() - mean) * invstd;
                    gm * invstd * (g - sum_g / m - xhat * sum_gx / m)
                } else {
                    gm * invstd * g
                };
                dx.data_mut()[base + i] = E::from_f64(v);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// Instance normalization: per `(n, c)` over spatial dims only, affine per
/// channel, no running statistics. Spatial area must be at least 2.
pub fn instancenorm_forward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: f64,
) -> Result<(Tensor<E>, NormStats<E>)> {
    let [n, c, h, w] = x.dims4("instancenorm2d")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "instancenorm2d",
            format!("affine shapes {:?}/{:?} vs {c} channels", gamma.shape(), beta.shape()),
        ));
    }
    let plane = h * w;
    if plane < 2 {
        return Err(Error::DegenerateVariance {
            op: "instancenorm2d",
            detail: format!("spatial size {h}x{w} has fewer than 2 elements"),
        });
    }
    let mut out = Tensor::zeros(x.shape());
    let mut stats = NormStats {
        mean: vec![E::zero(); n * c],
        invstd: vec![E::zero(); n * c],
    };
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let src = &x.data()[base..base + plane];
            let (mean, var) = mean_var_f64(src.iter().copied(), plane);
            let invstd = 1.0 / (var + eps).sqrt();
            stats.mean[ni * c + ci] = E::from_f64(mean);
            stats.invstd[ni * c + ci] = E::from_f64(invstd);
            let gm = gamma.data()[ci];
            let bt = beta.data()[ci];
            let me = E::from_f64(mean);
            let is = E::from_f64(invstd);
            let dst = &mut out.data_mut()[base..base + plane];
            for (d, &s) in dst.iter_mut().zip(src.iter()) {
                *d = gm * ((s - me) * is) + bt;
            }
        }
    }
    Ok((out, stats))
}

pub fn instancenorm_backward<E: Element>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    stats: &NormStats<E>,
    grad_out: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>, Tensor<E>) {
    let [n, c, h, w] = x.dims4("instancenorm2d").expect("checked in forward");
    let plane = h * w;
    let m = plane as f64;
    let mut dx = Tensor::zeros(x.shape());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mean = stats.mean[ni * c + ci].as_f64();
            let invstd = stats.invstd[ni * c + ci].as_f64();
            let gm = gamma.data()[ci].as_f64();
            let mut sum_g = 0.0f64;
            let mut sum_gx = 0.0f64;
            for i in 0..plane {
                let g = grad_out.data()[base + i].as_f64();
                let xhat = (x.data()[base + i].as_f64() - mean) * invstd;
                sum_g += g;
                sum_gx += g * xhat;
            }
            dgamma.data_mut()[ci] += E::from_f64(sum_gx);
            dbeta.data_mut()[ci] += E::from_f64(sum_g);
            for i in 0..plane {
                let g = grad_out.data()[base + i].as_f64();
                let xhat = (x.data()[base + i].as_f64() - mean) * invstd;
                let v = gm * invstd * (g - sum_g / m - xhat * sum_gx / m);
                dx.data_mut()[base + i] = E::from_f64(v);
            }
        }
    }
    (dx, dgamma, dbeta)
}

pub fn leaky_relu_forward<E: Element>(x: &Tensor<E>, slope: f64) -> Tensor<E> {
    let s = E::from_f64(slope);
    x.map(|v| if v >= E::zero() { v } else { v * s })
}

pub fn leaky_relu_backward<E: Element>(x: &Tensor<E>, slope: f64, grad_out: &Tensor<E>) -> Tensor<E> {
    let s = E::from_f64(slope);
    let mut dx = grad_out.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data().iter()) {
        if v < E::zero() {
            *d *= s;
        }
    }
    dx
}

pub fn relu_forward<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    x.map(|v| if v >= E::zero() { v } else { E::zero() })
}

pub fn relu_backward<E: Element>(x: &Tensor<E>, grad_out: &Tensor<E>) -> Tensor<E> {
    let mut dx = grad_out.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data().iter()) {
        if v < E::zero() {
            *d = E::zero();
        }
    }
    dx
}

/// Saturating tanh whose output stays strictly inside (-1, 1) even where the
/// float rounding of `tanh` would hit the bounds.
pub fn tanh_forward<E: Element>(x: &Tensor<E>) -> Tensor<E> {
    let cap = E::one() - E::epsilon();
    x.map(|v| {
        let t = v.tanh();
        if t >= E::one() {
            cap
        } else if t <= -E::one() {
            -cap
        } else {
            t
        }
    })
}

/// Backward from the saved output: d tanh = 1 - y^2.
pub fn tanh_backward<E: Element>(y: &Tensor<E>, grad_out: &Tensor<E>) -> Tensor<E> {
    let mut dx = grad_out.clone();
    for (d, &v) in dx.data_mut().iter_mut().zip(y.data().iter()) {
        *d *= E::one() - v * v;
    }
    dx
}

/// Channel concatenation `[N,C1,H,W] ++ [N,C2,H,W] -> [N,C1+C2,H,W]`.
pub fn concat_channels_forward<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    let [n, c1, h, w] = a.dims4("concat_channels")?;
    let [n2, c2, h2, w2] = b.dims4("concat_channels")?;
    if n != n2 || h != h2 || w != w2 {
        return Err(Error::shape(
            "concat_channels",
            format!(
                "batch/spatial mismatch: {:?} vs {:?}",
                a.shape(),
                b.shape()
            ),
        ));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(&[n, c1 + c2, h, w]);
    for ni in 0..n {
        let dst = &mut out.data_mut()[ni * (c1 + c2) * plane..(ni + 1) * (c1 + c2) * plane];
        dst[..c1 * plane].copy_from_slice(&a.data()[ni * c1 * plane..(ni + 1) * c1 * plane]);
        dst[c1 * plane..].copy_from_slice(&b.data()[ni * c2 * plane..(ni + 1) * c2 * plane]);
    }
    Ok(out)
}

pub fn concat_channels_backward<E: Element>(
    c1: usize,
    c2: usize,
    grad_out: &Tensor<E>,
) -> (Tensor<E>, Tensor<E>) {
    let [n, _, h, w] = grad_out.dims4("concat_channels").expect("checked in forward");
    let plane = h * w;
    let mut da = Tensor::zeros(&[n, c1, h, w]);
    let mut db = Tensor::zeros(&[n, c2, h, w]);
    for ni in 0..n {
        let src = &grad_out.data()[ni * (c1 + c2) * plane..(ni + 1) * (c1 + c2) * plane];
        da.data_mut()[ni * c1 * plane..(ni + 1) * c1 * plane].copy_from_slice(&src[..c1 * plane]);
        db.data_mut()[ni * c2 * plane..(ni + 1) * c2 * plane].copy_from_slice(&src[c1 * plane..]);
    }
    (da, db)
}

/// Nearest-neighbour 2x spatial upsample.
pub fn upsample2x_forward<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let [n, c, h, w] = x.dims4("upsample2x")?;
    let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
    for nc in 0..n * c {
        let src = &x.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out.data_mut()[nc * 4 * h * w..(nc + 1) * 4 * h * w];
        for y in 0..h {
            for xg in 0..w {
                let v = src[y * w + xg];
                let r0 = 2 * y * 2 * w + 2 * xg;
                dst[r0] = v;
                dst[r0 + 1] = v;
                dst[r0 + 2 * w] = v;
                dst[r0 + 2 * w + 1] = v;
            }
        }
    }
    Ok(out)
}

pub fn upsample2x_backward<E: Element>(grad_out: &Tensor<E>) -> Tensor<E> {
    let [n, c, ho, wo] = grad_out.dims4("upsample2x").expect("checked in forward");
    let (h, w) = (ho / 2, wo / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for nc in 0..n * c {
        let src = &grad_out.data()[nc * ho * wo..(nc + 1) * ho * wo];
        let dst = &mut dx.data_mut()[nc * h * w..(nc + 1) * h * w];
        for y in 0..h {
            for xg in 0..w {
                let r0 = 2 * y * wo + 2 * xg;
                dst[y * w + xg] = src[r0] + src[r0 + 1] + src[r0 + wo] + src[r0 + wo + 1];
            }
        }
    }
    dx
}

/// Mean squared error over all elements, accumulated in f64.
pub fn mse_forward<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "mse",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let mut acc = 0.0f64;
    for (&x, &y) in a.data().iter().zip(b.data().iter()) {
        let d = x.as_f64() - y.as_f64();
        acc += d * d;
    }
    Ok(Tensor::scalar(E::from_f64(acc / a.numel() as f64)))
}

pub fn mse_backward<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    grad_out: E,
) -> (Tensor<E>, Tensor<E>) {
    let scale = grad_out * E::from_f64(2.0 / a.numel() as f64);
    let mut da = Tensor::zeros(a.shape());
    for ((d, &x), &y) in da.data_mut().iter_mut().zip(a.data().iter()).zip(b.data().iter()) {
        *d = scale * (x - y);
    }
    let db = da.map(|v| -v);
    (da, db)
}
