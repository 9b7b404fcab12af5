//! Numerical gradient checking and direct-definition reference convolutions.
//!
//! The references here deliberately avoid im2col: they evaluate the textbook
//! sums so the fast path can be validated against something written from the
//! definition alone.

use super::param::ParamSet;
use super::tape::{NodeId, Tape};
use super::Tensor;
use crate::error::{Error, Result};

/// Outcome of a finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name and flat element index where the worst error occurred.
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Central-difference check of every trainable parameter element against the
/// tape's analytic gradients. `build` must construct the same scalar loss on
/// every call; the checker runs it `2 * num_elements + 1` times.
///
/// Relative error uses `|a - n| / max(|a|, |n|, floor)` with a small floor so
/// genuinely zero gradients compare absolutely.
pub fn grad_check<F>(params: &mut ParamSet<f64>, build: F, eps: f64, floor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamSet<f64>) -> Result<NodeId>,
{
    let loss_of = |params: &ParamSet<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::input("grad_check", "build must return a scalar loss"));
        }
        Ok(tape.value(loss).data()[0])
    };

    params.zero_grads();
    {
        let mut tape = Tape::new();
        let loss = build(&mut tape, params)?;
        tape.backward(loss, params)?;
    }
    let analytic: Vec<(String, Vec<f64>)> = params
        .iter()
        .filter(|p| p.trainable)
        .map(|p| (p.name.clone(), p.grad.data().to_vec()))
        .collect();

    let mut checked = 0usize;
    let mut max_rel_err = 0.0f64;
    let mut worst = None;
    for (name, grads) in &analytic {
        for i in 0..grads.len() {
            let orig = params.by_name(name).expect("trainable param").value.data()[i];
            params.by_name_mut(name).unwrap().value.data_mut()[i] = orig + eps;
            let up = loss_of(params)?;
            params.by_name_mut(name).unwrap().value.data_mut()[i] = orig - eps;
            let down = loss_of(params)?;
            params.by_name_mut(name).unwrap().value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = grads[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > max_rel_err {
                max_rel_err = rel;
                worst = Some((name.clone(), i));
            }
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        checked,
        max_rel_err,
        worst,
    })
}

/// Direct-definition stride-`s` cross-correlation with padding `(k-1)/2`.
pub fn conv2d_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize) -> Tensor<f64> {
    let [n, c, h, wd] = x.dims4("conv2d_reference").unwrap();
    let (f, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k - 1) / 2;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, f, oh, ow]);
    for ni in 0..n {
        for fi in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[fi];
                    for ci in 0..c {
                        for a in 0..k {
                            for bb in 0..k {
                                let iy = (oy * stride + a) as isize - pad as isize;
                                let ix = (ox * stride + bb) as isize - pad as isize;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                    let xv = x.data()
                                        [((ni * c + ci) * h + iy as usize) * wd + ix as usize];
                                    let wv = w.data()[((fi * c + ci) * k + a) * k + bb];
                                    acc += xv * wv;
                                }
                            }
                        }
                    }
                    out.data_mut()[((ni * f + fi) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Direct-definition transposed 3x3 convolution, stride 2, padding 1, output
/// padding 1: scatter `x[i][j] * w[a][b]` onto `out[2i + a - 1][2j + b - 1]`.
pub fn tconv2d_reference(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, wd] = x.dims4("tconv2d_reference").unwrap();
    let f = w.shape()[1];
    let (ho, wo) = (2 * h, 2 * wd);
    let mut out = Tensor::zeros(&[n, f, ho, wo]);
    for ni in 0..n {
        for fi in 0..f {
            let base = (ni * f + fi) * ho * wo;
            for v in &mut out.data_mut()[base..base + ho * wo] {
                *v = b.data()[fi];
            }
        }
        for ci in 0..c {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x.data()[((ni * c + ci) * h + iy) * wd + ix];
                    for fi in 0..f {
                        for a in 0..3usize {
                            for bb in 0..3usize {
                                let oy = 2 * iy as isize + a as isize - 1;
                                let ox = 2 * ix as isize + bb as isize - 1;
                                if oy >= 0 && oy < ho as isize && ox >= 0 && ox < wo as isize {
                                    let wv = w.data()[((ci * f + fi) * 3 + a) * 3 + bb];
                                    out.data_mut()
                                        [((ni * f + fi) * ho + oy as usize) * wo + ox as usize] +=
                                        xv * wv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}
