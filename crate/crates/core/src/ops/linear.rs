//! Fully connected layer applied independently at every spatial position.

use super::cost::{record_macs, OpCost};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// `weight` is `(C_out, C_in, 1, 1)`; `bias` has length `C_out`.
fn check<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>) -> Result<(usize, usize)> {
    let [c_out, c_in, kh, kw] = weight.dims();
    if kh != 1 || kw != 1 {
        return Err(Error::DimMismatch {
            op: "fully_connected",
            dim: "weight trailing extent",
            expected: 1,
            got: kh.max(kw),
        });
    }
    if input.shape().c() != c_in {
        return Err(Error::DimMismatch {
            op: "fully_connected",
            dim: "input features",
            expected: c_in,
            got: input.shape().c(),
        });
    }
    if let Some(b) = bias {
        if b.len() != c_out {
            return Err(Error::DimMismatch {
                op: "fully_connected",
                dim: "bias length",
                expected: c_out,
                got: b.len(),
            });
        }
    }
    Ok((c_in, c_out))
}

pub fn fc_cost(c_in: usize, c_out: usize, positions: usize, bias: bool) -> OpCost {
    let w = (c_in * c_out) as u64;
    OpCost::new(w + if bias { c_out as u64 } else { 0 }, w * positions as u64)
}

/// `y[n,:,y,x] = W x[n,:,y,x] + b`.
pub fn fully_connected<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: Option<&[T]>) -> Result<Tensor<T>> {
    let (c_in, c_out) = check(input, weight, bias)?;
    let [n, _, h, w] = input.dims();
    let p = h * w;
    record_macs((c_in * c_out * n * p) as u64);
    let wd = weight.data();
    let mut out = vec![T::zero(); n * c_out * p];
    for ni in 0..n {
        for o in 0..c_out {
            let dst = &mut out[(ni * c_out + o) * p..(ni * c_out + o + 1) * p];
            if let Some(b) = bias {
                dst.fill(b[o]);
            }
            for i in 0..c_in {
                let wv = wd[o * c_in + i];
                for (d, &x) in dst.iter_mut().zip(input.plane(ni, i)) {
                    *d = *d + wv * x;
                }
            }
        }
    }
    Ok(Tensor::from_parts(Shape::derived([n, c_out, h, w]), out))
}

pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

pub fn fully_connected_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (c_in, c_out) = check(input, weight, None)?;
    let [n, _, h, w] = input.dims();
    if grad_out.dims() != [n, c_out, h, w] {
        return Err(Error::Incompatible {
            op: "fully_connected_backward",
            lhs: grad_out.shape(),
            rhs: Shape::derived([n, c_out, h, w]),
        });
    }
    let wd = weight.data();
    let mut gi = vec![T::zero(); input.len()];
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); c_out];
    let p = h * w;
    for ni in 0..n {
        for o in 0..c_out {
            let go = grad_out.plane(ni, o);
            gb[o] = gb[o] + go.iter().copied().sum::<T>();
            for i in 0..c_in {
                let x = input.plane(ni, i);
                let wv = wd[o * c_in + i];
                let gslice = &mut gi[(ni * c_in + i) * p..(ni * c_in + i + 1) * p];
                let mut acc = T::zero();
                for k in 0..p {
                    gslice[k] = gslice[k] + wv * go[k];
                    acc = acc + x[k] * go[k];
                }
                gw[o * c_in + i] = gw[o * c_in + i] + acc;
            }
        }
    }
    Ok(LinearGrads {
        input: Tensor::from_parts(input.shape(), gi),
        weight: Tensor::from_parts(weight.shape(), gw),
        bias: gb,
    })
}
