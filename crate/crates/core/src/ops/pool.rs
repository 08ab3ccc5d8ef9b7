//! Directional, channel and patch pooling.


use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// The axis a directional pool collapses.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum PoolAxis {
    /// Mean over rows: `(N,C,H,W) -> (N,C,1,W)`.
    Height,
    /// Mean over columns: `(N,C,H,W) -> (N,C,H,1)`.
    Width,
}

pub fn directional_avg_pool<T: Scalar>(input: &Tensor<T>, axis: PoolAxis) -> Tensor<T> {
    let [n, c, h, w] = input.dims();
    match axis {
        PoolAxis::Height => {
            let div = T::of(h as f64);
            let mut out = Vec::with_capacity(n * c * w);
            for ni in 0..n {
                for ci in 0..c {
                    let p = input.plane(ni, ci);
                    for x in 0..w {
                        let mut acc = T::zero();
                        for y in 0..h {
                            acc = acc + p[y * w + x];
                        }
                        out.push(acc / div);
                    }
                }
            }
            Tensor::from_parts(Shape::derived([n, c, 1, w]), out)
        }
        PoolAxis::Width => {
            let div = T::of(w as f64);
            let mut out = Vec::with_capacity(n * c * h);
            for ni in 0..n {
                for ci in 0..c {
                    let p = input.plane(ni, ci);
                    for y in 0..h {
                        let acc: T = p[y * w..(y + 1) * w].iter().copied().sum();
                        out.push(acc / div);
                    }
                }
            }
            Tensor::from_parts(Shape::derived([n, c, h, 1]), out)
        }
    }
}

/// Spreads the pooled cotangent evenly back over the collapsed axis.
pub fn directional_avg_pool_backward<T: Scalar>(input_shape: Shape, axis: PoolAxis, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input_shape.dims();
    let expected = match axis {
        PoolAxis::Height => [n, c, 1, w],
        PoolAxis::Width => [n, c, h, 1],
    };
    if grad.dims() != expected {
        return Err(Error::Incompatible {
            op: "directional_avg_pool_backward",
            lhs: grad.shape(),
            rhs: Shape::derived(expected),
        });
    }
    let div = T::of(match axis {
        PoolAxis::Height => h,
        PoolAxis::Width => w,
    } as f64);
    Ok(Tensor::from_fn(input_shape, |ni, ci, y, x| match axis {
        PoolAxis::Height => grad.at(ni, ci, 0, x) / div,
        PoolAxis::Width => grad.at(ni, ci, y, 0) / div,
    }))
}

/// Per-pixel maximum over channels, `(N,C,H,W) -> (N,1,H,W)`.
pub fn channel_max_pool<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = input.dims();
    if super::kink::tracking() {
        let winners = (0..n).flat_map(|ni| (0..h * w).map(move |k| argmax_channels(input, ni, k) as u64));
        super::kink::record_kink(f64::INFINITY, winners);
    }
    let p = h * w;
    let mut out = Vec::with_capacity(n * p);
    for ni in 0..n {
        let mut best = input.plane(ni, 0).to_vec();
        for ci in 1..c {
            for (b, &v) in best.iter_mut().zip(input.plane(ni, ci)) {
                if v > *b {
                    *b = v;
                }
            }
        }
        out.extend(best);
    }
    Tensor::from_parts(Shape::derived([n, 1, h, w]), out)
}

fn argmax_channels<T: Scalar>(input: &Tensor<T>, ni: usize, k: usize) -> usize {
    let [_, c, _, _] = input.dims();
    let p = input.shape().plane();
    let mut best = 0;
    for ci in 1..c {
        if input.plane(ni, ci)[k] > input.plane(ni, best)[k] {
            best = ci;
        }
    }
    debug_assert!(k < p);
    best
}

/// Routes each pixel's cotangent to the winning channel (first on ties).
pub fn channel_max_pool_backward<T: Scalar>(input: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = input.dims();
    if grad.dims() != [n, 1, h, w] {
        return Err(Error::Incompatible {
            op: "channel_max_pool_backward",
            lhs: grad.shape(),
            rhs: Shape::derived([n, 1, h, w]),
        });
    }
    let p = h * w;
    let mut out = vec![T::zero(); input.len()];
    for ni in 0..n {
        for k in 0..p {
            let ci = argmax_channels(input, ni, k);
            out[(ni * c + ci) * p + k] = grad.data()[ni * p + k];
        }
    }
    Ok(Tensor::from_parts(input.shape(), out))
}

/// Smallest gap between the largest and second-largest channel at any pixel;
/// infinite for a single channel.
pub fn channel_max_margin<T: Scalar>(input: &Tensor<T>) -> T {
    let [n, c, h, w] = input.dims();
    if c < 2 {
        return T::infinity();
    }
    let mut margin = T::infinity();
    for ni in 0..n {
        for k in 0..h * w {
            let (mut a, mut b) = (T::neg_infinity(), T::neg_infinity());
            for ci in 0..c {
                let v = input.plane(ni, ci)[k];
                if v > a {
                    b = a;
                    a = v;
                } else if v > b {
                    b = v;
                }
            }
            margin = margin.min(a - b);
        }
    }
    margin
}

fn patch_dims(shape: Shape, grid_h: usize, grid_w: usize) -> Result<(usize, usize)> {
    if grid_h == 0 || grid_w == 0 || !shape.h().is_multiple_of(grid_h) || !shape.w().is_multiple_of(grid_w) {
        return Err(Error::InvalidArgument(format!(
            "patch grid {grid_h}x{grid_w} does not tile a {}x{} map",
            shape.h(),
            shape.w()
        )));
    }
    Ok((shape.h() / grid_h, shape.w() / grid_w))
}

/// Mean over each cell of a non-overlapping `grid_h x grid_w` tiling.
pub fn patch_avg_pool<T: Scalar>(input: &Tensor<T>, grid_h: usize, grid_w: usize) -> Result<Tensor<T>> {
    let (ph, pw) = patch_dims(input.shape(), grid_h, grid_w)?;
    let inv = T::one() / T::of((ph * pw) as f64);
    let out_shape = input.shape().with_hw(grid_h, grid_w);
    let [n, c, _, w] = input.dims();
    let mut out = Vec::with_capacity(out_shape.numel());
    for ni in 0..n {
        for ci in 0..c {
            let p = input.plane(ni, ci);
            for gy in 0..grid_h {
                for gx in 0..grid_w {
                    let mut acc = T::zero();
                    for y in gy * ph..(gy + 1) * ph {
                        for x in gx * pw..(gx + 1) * pw {
                            acc = acc + p[y * w + x];
                        }
                    }
                    out.push(acc * inv);
                }
            }
        }
    }
    Ok(Tensor::from_parts(out_shape, out))
}

pub fn patch_avg_pool_backward<T: Scalar>(input_shape: Shape, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let (grid_h, grid_w) = (grad.shape().h(), grad.shape().w());
    let (ph, pw) = patch_dims(input_shape, grid_h, grid_w)?;
    let inv = T::one() / T::of((ph * pw) as f64);
    Ok(Tensor::from_fn(input_shape, |ni, ci, y, x| grad.at(ni, ci, y / ph, x / pw) * inv))
}

/// Nearest-neighbour expansion of a per-cell value over its patch.
pub fn patch_expand<T: Scalar>(cells: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let target = cells.shape().with_hw(out_h, out_w);
    let (ph, pw) = patch_dims(target, cells.shape().h(), cells.shape().w())?;
    Ok(Tensor::from_fn(target, |ni, ci, y, x| cells.at(ni, ci, y / ph, x / pw)))
}

/// Adjoint of [`patch_expand`]: sums each patch.
pub fn patch_sum<T: Scalar>(input: &Tensor<T>, grid_h: usize, grid_w: usize) -> Result<Tensor<T>> {
    let (ph, pw) = patch_dims(input.shape(), grid_h, grid_w)?;
    Ok(patch_avg_pool(input, grid_h, grid_w)?.scale(T::of((ph * pw) as f64)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: [usize; 4], v: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn directional_means() {
        let x = t([1, 1, 2, 2], &[1.0, 3.0, 5.0, 7.0]);
        let h = directional_avg_pool(&x, PoolAxis::Height);
        assert_eq!(h.dims(), [1, 1, 1, 2]);
        assert_eq!(h.data(), &[3.0, 5.0]);
        let v = directional_avg_pool(&x, PoolAxis::Width);
        assert_eq!(v.dims(), [1, 1, 2, 1]);
        assert_eq!(v.data(), &[2.0, 6.0]);
    }

    #[test]
    fn directional_constant_invariance() {
        let x = Tensor::full(Shape::new([2, 3, 5, 7]).unwrap(), 0.375f32);
        for axis in [PoolAxis::Height, PoolAxis::Width] {
            let p = directional_avg_pool(&x, axis);
            assert!(p.data().iter().all(|&v| v == 0.375));
            let pp = directional_avg_pool(&p, match axis {
                PoolAxis::Height => PoolAxis::Width,
                PoolAxis::Width => PoolAxis::Height,
            });
            assert!(pp.data().iter().all(|&v| v == 0.375));
        }
    }

    #[test]
    fn channel_max_examples() {
        let x = t([1, 2, 2, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 0.0, 0.0, 6.0]);
        assert_eq!(channel_max_pool(&x).data(), &[5.0, 2.0, 3.0, 6.0]);
        let single = t([1, 1, 2, 2], &[1.0, -2.0, 3.0, 4.0]);
        assert_eq!(channel_max_pool(&single), single);
        assert_eq!(channel_max_margin(&x), 2.0);
    }

    #[test]
    fn patch_pool_and_expand() {
        let x = Tensor::from_fn(Shape::new([1, 1, 4, 4]).unwrap(), |_, _, y, x| (y * 4 + x) as f64);
        let p = patch_avg_pool(&x, 2, 2).unwrap();
        assert_eq!(p.data(), &[2.5, 4.5, 10.5, 12.5]);
        let e = patch_expand(&p, 4, 4).unwrap();
        assert_eq!(e.at(0, 0, 3, 3), 12.5);
        assert_eq!(patch_sum(&x, 2, 2).unwrap().data(), &[10.0, 18.0, 42.0, 50.0]);
        assert!(patch_avg_pool(&x, 3, 3).is_err());
    }
}
