//! Bilinear resampling with half-pixel centers (align-corners off).
//!
//! Source coordinates below zero are clamped to zero and upper neighbours to
//! the last row/column, the convention most frameworks use for
//! `align_corners = false`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ResizeTarget {
    Double,
    Half,
    Extent(usize, usize),
}

impl ResizeTarget {
    pub fn resolve(self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (th, tw) = match self {
            ResizeTarget::Double => (2 * h, 2 * w),
            ResizeTarget::Half => (h / 2, w / 2),
            ResizeTarget::Extent(th, tw) => (th, tw),
        };
        if th == 0 {
            return Err(Error::EmptyOutput { op: "resize_bilinear", dim: "height" });
        }
        if tw == 0 {
            return Err(Error::EmptyOutput { op: "resize_bilinear", dim: "width" });
        }
        Ok((th, tw))
    }
}

#[derive(Clone, Copy)]
struct Tap<T> {
    lo: usize,
    hi: usize,
    w_lo: T,
    w_hi: T,
}

fn taps<T: Scalar>(src: usize, dst: usize) -> Vec<Tap<T>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            let frac = pos - lo as f64;
            let frac = if hi == lo { 0.0 } else { frac };
            Tap {
                lo,
                hi,
                w_lo: T::of(1.0 - frac),
                w_hi: T::of(frac),
            }
        })
        .collect()
}

pub fn resize_bilinear<T: Scalar>(input: &Tensor<T>, target: ResizeTarget) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims();
    let (th, tw) = target.resolve(h, w)?;
    if (th, tw) == (h, w) {
        return Ok(input.clone());
    }
    let ry = taps::<T>(h, th);
    let rx = taps::<T>(w, tw);
    let out_shape = Shape::derived([n, c, th, tw]);
    let mut out = Vec::with_capacity(out_shape.numel());
    for ni in 0..n {
        for ci in 0..c {
            let p = input.plane(ni, ci);
            for ty in &ry {
                let (r0, r1) = (&p[ty.lo * w..(ty.lo + 1) * w], &p[ty.hi * w..(ty.hi + 1) * w]);
                for tx in &rx {
                    let top = r0[tx.lo] + (r0[tx.hi] - r0[tx.lo]) * tx.w_hi;
                    let bot = r1[tx.lo] + (r1[tx.hi] - r1[tx.lo]) * tx.w_hi;
                    out.push(top + (bot - top) * ty.w_hi);
                }
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

/// Adjoint of [`resize_bilinear`] from `input_shape` to `grad`'s extent.
pub fn resize_bilinear_backward<T: Scalar>(input_shape: Shape, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape.dims();
    let [gn, gc, th, tw] = grad.dims();
    if gn != n || gc != c {
        return Err(Error::Incompatible {
            op: "resize_bilinear_backward",
            lhs: grad.shape(),
            rhs: input_shape,
        });
    }
    if (th, tw) == (h, w) {
        return Ok(grad.clone());
    }
    let ry = taps::<T>(h, th);
    let rx = taps::<T>(w, tw);
    let mut out = vec![T::zero(); input_shape.numel()];
    let p = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let g = grad.plane(ni, ci);
            let dst = &mut out[(ni * c + ci) * p..(ni * c + ci + 1) * p];
            for (yi, ty) in ry.iter().enumerate() {
                for (xi, tx) in rx.iter().enumerate() {
                    let v = g[yi * tw + xi];
                    dst[ty.lo * w + tx.lo] = dst[ty.lo * w + tx.lo] + v * ty.w_lo * tx.w_lo;
                    dst[ty.lo * w + tx.hi] = dst[ty.lo * w + tx.hi] + v * ty.w_lo * tx.w_hi;
                    dst[ty.hi * w + tx.lo] = dst[ty.hi * w + tx.lo] + v * ty.w_hi * tx.w_lo;
                    dst[ty.hi * w + tx.hi] = dst[ty.hi * w + tx.hi] + v * ty.w_hi * tx.w_hi;
                }
            }
        }
    }
    Ok(Tensor::from_parts(input_shape, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_preserved() {
        let x = Tensor::full(Shape::new([1, 2, 6, 4]).unwrap(), 5.0f32);
        for target in [ResizeTarget::Double, ResizeTarget::Half, ResizeTarget::Extent(7, 13)] {
            let y = resize_bilinear(&x, target).unwrap();
            assert!(y.data().iter().all(|&v| v == 5.0), "{target:?}");
        }
    }

    #[test]
    fn half_pixel_upsample_by_hand() {
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.0f64, 1.0, 0.0, 1.0]).unwrap();
        let y = resize_bilinear(&x, ResizeTarget::Extent(4, 4)).unwrap();
        for row in 0..4 {
            let r: Vec<f64> = (0..4).map(|c| y.at(0, 0, row, c)).collect();
            assert_eq!(r, vec![0.0, 0.25, 0.75, 1.0]);
        }
    }

    #[test]
    fn ramp_round_trip_is_exact_away_from_borders() {
        let x = Tensor::from_fn(Shape::new([1, 1, 8, 8]).unwrap(), |_, _, y, x| 0.5 * y as f64 - 0.25 * x as f64);
        let up = resize_bilinear(&x, ResizeTarget::Double).unwrap();
        let back = resize_bilinear(&up, ResizeTarget::Half).unwrap();
        for y in 1..7 {
            for xx in 1..7 {
                assert!((back.at(0, 0, y, xx) - x.at(0, 0, y, xx)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn downsample_by_two_is_block_average() {
        let x = Tensor::from_fn(Shape::new([1, 1, 4, 4]).unwrap(), |_, _, y, x| (y * 4 + x) as f64);
        let y = resize_bilinear(&x, ResizeTarget::Half).unwrap();
        assert_eq!(y.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn zero_target_rejected() {
        let x = Tensor::<f32>::zeros(Shape::new([1, 1, 1, 1]).unwrap());
        assert!(resize_bilinear(&x, ResizeTarget::Half).is_err());
        assert!(resize_bilinear(&x, ResizeTarget::Extent(0, 3)).is_err());
    }
}
