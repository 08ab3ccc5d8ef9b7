//! Direct nested-loop evaluations of the core kernels in f64, for checking
//! the optimized implementations.

use crate::error::{Error, Result};
use crate::ops::{ConvSpec, PoolAxis};
use crate::tensor::{Scalar, Tensor};

fn at<T: Scalar>(t: &Tensor<T>, n: usize, c: usize, y: usize, x: usize) -> f64 {
    t.at(n, c, y, x).to_f64().unwrap_or(f64::NAN)
}

fn values<T: Scalar>(t: &Tensor<T>) -> impl Iterator<Item = f64> + '_ {
    t.data().iter().map(|v| v.to_f64().unwrap_or(f64::NAN))
}

/// `max |got - want| / max |want|`; zero when both are identically zero.
pub fn max_rel_err<T: Scalar>(got: &[T], want: &[f64]) -> f64 {
    if got.len() != want.len() {
        return f64::INFINITY;
    }
    let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let diff = got
        .iter()
        .zip(want)
        .fold(0.0f64, |m, (g, w)| m.max((g.to_f64().unwrap_or(f64::NAN) - w).abs()));
    if diff == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Output extent follows [`ConvSpec::output_hw`].
pub fn conv2d<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: Option<&[T]>, s: &ConvSpec) -> Result<(Vec<f64>, [usize; 4])> {
    let [n, c_in, h, wd] = x.dims();
    let [c_out, cpg, kh, kw] = w.dims();
    if cpg * s.groups != c_in || c_out % s.groups != 0 {
        return Err(Error::InvalidArgument("reference conv2d: inconsistent groups".into()));
    }
    let (ho, wo) = s.output_hw(h, wd)?;
    let opg = c_out / s.groups;
    let mut out = Vec::with_capacity(n * c_out * ho * wo);
    for ni in 0..n {
        for o in 0..c_out {
            let g = o / opg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = bias.map_or(0.0, |b| b[o].to_f64().unwrap_or(f64::NAN));
                    for i in 0..cpg {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * s.stride + ky * s.dilation) as isize - s.pad_h as isize;
                                let ix = (ox * s.stride + kx * s.dilation) as isize - s.pad_w as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += at(w, o, i, ky, kx) * at(x, ni, g * cpg + i, iy as usize, ix as usize);
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    Ok((out, [n, c_out, ho, wo]))
}

pub fn directional_avg_pool<T: Scalar>(x: &Tensor<T>, axis: PoolAxis) -> Vec<f64> {
    let [n, c, h, w] = x.dims();
    let mut out = Vec::new();
    for ni in 0..n {
        for ci in 0..c {
            match axis {
                PoolAxis::Height => {
                    for xx in 0..w {
                        out.push((0..h).map(|y| at(x, ni, ci, y, xx)).sum::<f64>() / h as f64);
                    }
                }
                PoolAxis::Width => {
                    for y in 0..h {
                        out.push((0..w).map(|xx| at(x, ni, ci, y, xx)).sum::<f64>() / w as f64);
                    }
                }
            }
        }
    }
    out
}

pub fn channel_max_pool<T: Scalar>(x: &Tensor<T>) -> Vec<f64> {
    let [n, c, h, w] = x.dims();
    let mut out = Vec::with_capacity(n * h * w);
    for ni in 0..n {
        for y in 0..h {
            for xx in 0..w {
                out.push((0..c).map(|ci| at(x, ni, ci, y, xx)).fold(f64::NEG_INFINITY, f64::max));
            }
        }
    }
    out
}

/// Broadcasting product; every extent must match or be 1.
pub fn hadamard<T: Scalar>(ops: &[&Tensor<T>]) -> Result<(Vec<f64>, [usize; 4])> {
    let mut shape = [1usize; 4];
    for t in ops {
        for (k, &e) in t.dims().iter().enumerate() {
            if e != 1 && shape[k] != 1 && e != shape[k] {
                return Err(Error::InvalidArgument("reference hadamard: extents differ".into()));
            }
            shape[k] = shape[k].max(e);
        }
    }
    let mut out = Vec::with_capacity(shape.iter().product());
    for n in 0..shape[0] {
        for c in 0..shape[1] {
            for y in 0..shape[2] {
                for x in 0..shape[3] {
                    out.push(ops.iter().fold(1.0, |acc, t| {
                        let d = t.dims();
                        acc * at(t, n % d[0], c % d[1], y % d[2], x % d[3])
                    }));
                }
            }
        }
    }
    Ok((out, shape))
}

/// Unclamped mean binary cross-entropy.
pub fn bce<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>) -> f64 {
    let sum: f64 = values(p).zip(values(g)).map(|(p, g)| -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())).sum();
    sum / p.len() as f64
}

/// Soft IoU loss with additive smoothing `eps`, averaged over planes.
pub fn iou<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>, eps: f64) -> f64 {
    let [n, c, h, w] = p.dims();
    let mut total = 0.0;
    for ni in 0..n {
        for ci in 0..c {
            let (mut inter, mut union) = (0.0, 0.0);
            for y in 0..h {
                for x in 0..w {
                    let (a, b) = (at(p, ni, ci, y, x), at(g, ni, ci, y, x));
                    inter += a * b;
                    union += a + b - a * b;
                }
            }
            total += 1.0 - (inter + eps) / (union + eps);
        }
    }
    total / (n * c) as f64
}

pub fn mae<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>) -> f64 {
    values(p).zip(values(g)).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64
}
