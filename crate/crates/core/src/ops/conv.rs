//! 2-D cross-correlation with zero padding, dilation and channel groups.

use rayon::prelude::*;

use super::cost::{record_macs, OpCost};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Geometry of one convolution layer. Channel counts come from the weight.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub dilation: usize,
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Square kernel, stride 1, no padding, no bias.
    pub fn new(kernel: usize) -> Self {
        ConvSpec {
            kernel_h: kernel,
            kernel_w: kernel,
            stride: 1,
            pad_h: 0,
            pad_w: 0,
            dilation: 1,
            groups: 1,
            bias: false,
        }
    }

    pub fn asymmetric(kernel_h: usize, kernel_w: usize) -> Self {
        ConvSpec {
            kernel_h,
            kernel_w,
            ..ConvSpec::new(1)
        }
    }

    pub fn pointwise() -> Self {
        ConvSpec::new(1)
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = s;
        self
    }

    pub fn padding(mut self, p: usize) -> Self {
        self.pad_h = p;
        self.pad_w = p;
        self
    }

    pub fn padding_hw(mut self, ph: usize, pw: usize) -> Self {
        self.pad_h = ph;
        self.pad_w = pw;
        self
    }

    pub fn dilation(mut self, d: usize) -> Self {
        self.dilation = d;
        self
    }

    pub fn groups(mut self, g: usize) -> Self {
        self.groups = g;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }

    /// Padding that keeps the spatial extent at stride 1.
    pub fn same(mut self) -> Self {
        self.pad_h = self.dilation * (self.kernel_h - 1) / 2;
        self.pad_w = self.dilation * (self.kernel_w - 1) / 2;
        self
    }

    pub fn weight_dims(&self, c_in: usize, c_out: usize) -> [usize; 4] {
        [c_out, c_in / self.groups, self.kernel_h, self.kernel_w]
    }

    fn validate(&self) -> Result<()> {
        if self.kernel_h == 0 || self.kernel_w == 0 || self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv2d: kernel, stride, dilation and groups must be positive ({self:?})"
            )));
        }
        Ok(())
    }

    fn extent(&self, x: usize, k: usize, p: usize, dim: &'static str) -> Result<usize> {
        let span = self.dilation * (k - 1) + 1;
        let padded = x + 2 * p;
        if padded < span {
            return Err(Error::EmptyOutput { op: "conv2d", dim });
        }
        Ok((padded - span) / self.stride + 1)
    }

    /// Output (H, W) for an input of extent (h, w).
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        Ok((
            self.extent(h, self.kernel_h, self.pad_h, "height")?,
            self.extent(w, self.kernel_w, self.pad_w, "width")?,
        ))
    }

    /// Parameters and MACs for `c_in -> c_out` at output extent `out_h x out_w`.
    pub fn cost(&self, c_in: usize, c_out: usize, n: usize, out_h: usize, out_w: usize) -> OpCost {
        let weights = (self.kernel_h * self.kernel_w * c_in / self.groups * c_out) as u64;
        let bias = if self.bias { c_out as u64 } else { 0 };
        OpCost::new(weights + bias, weights * (out_h * out_w * n) as u64)
    }
}

struct Geometry {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
    cin_pg: usize,
    cout_pg: usize,
}

fn check_operands<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Geometry> {
    spec.validate()?;
    let [_, c_in, h, w] = input.dims();
    let [c_out, cin_pg, kh, kw] = weight.dims();
    if c_in % spec.groups != 0 {
        return Err(Error::DimMismatch {
            op: "conv2d",
            dim: "input channels (multiple of groups)",
            expected: spec.groups * (c_in / spec.groups).max(1),
            got: c_in,
        });
    }
    if c_out % spec.groups != 0 {
        return Err(Error::DimMismatch {
            op: "conv2d",
            dim: "output channels (multiple of groups)",
            expected: spec.groups * (c_out / spec.groups).max(1),
            got: c_out,
        });
    }
    if cin_pg != c_in / spec.groups {
        return Err(Error::DimMismatch {
            op: "conv2d",
            dim: "weight input channels",
            expected: c_in / spec.groups,
            got: cin_pg,
        });
    }
    if kh != spec.kernel_h {
        return Err(Error::DimMismatch {
            op: "conv2d",
            dim: "kernel height",
            expected: spec.kernel_h,
            got: kh,
        });
    }
    if kw != spec.kernel_w {
        return Err(Error::DimMismatch {
            op: "conv2d",
            dim: "kernel width",
            expected: spec.kernel_w,
            got: kw,
        });
    }
    match (bias, spec.bias) {
        (Some(b), true) if b.len() != c_out => {
            return Err(Error::DimMismatch {
                op: "conv2d",
                dim: "bias length",
                expected: c_out,
                got: b.len(),
            })
        }
        (Some(_), false) | (None, true) => {
            return Err(Error::InvalidArgument(
                "conv2d: bias argument disagrees with the spec's bias flag".into(),
            ))
        }
        _ => {}
    }
    let (ho, wo) = spec.output_hw(h, w)?;
    Ok(Geometry {
        c_in,
        c_out,
        h,
        w,
        ho,
        wo,
        cin_pg,
        cout_pg: c_out / spec.groups,
    })
}

/// Valid output columns `[lo, hi)` for kernel column offset `off` (already
/// dilated), stride `s`, left padding `p` and input width `w`.
#[inline]
fn column_range(off: usize, p: usize, s: usize, w: usize, wo: usize) -> (usize, usize) {
    let lo = if p > off { (p - off).div_ceil(s) } else { 0 };
    if w + p <= off {
        return (0, 0);
    }
    let hi = ((w - 1 + p - off) / s + 1).min(wo);
    (lo.min(hi), hi)
}

/// Cross-correlation `y[n,o] = b[o] + sum_{i,ky,kx} w[o,i,ky,kx] x[n,i,..]`.
///
/// Every output element accumulates in the fixed order (input channel,
/// kernel row, kernel column), so results do not depend on the worker count.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&[T]>,
    spec: &ConvSpec,
) -> Result<Tensor<T>> {
    let g = check_operands(input, weight, bias, spec)?;
    let n = input.shape().n();
    let out_shape = Shape::derived([n, g.c_out, g.ho, g.wo]);
    let cost = spec.cost(g.c_in, g.c_out, n, g.ho, g.wo);
    record_macs(cost.macs);

    let mut out = vec![T::zero(); out_shape.numel()];
    let plane = g.ho * g.wo;
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (s, d) = (spec.stride, spec.dilation);
    let wdata = weight.data();
    out.par_chunks_mut(plane).enumerate().for_each(|(idx, dst)| {
        let (ni, oc) = (idx / g.c_out, idx % g.c_out);
        if let Some(b) = bias {
            dst.fill(b[oc]);
        }
        let group = oc / g.cout_pg;
        for il in 0..g.cin_pg {
            let src = input.plane(ni, group * g.cin_pg + il);
            let wbase = (oc * g.cin_pg + il) * kh * kw;
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wdata[wbase + ky * kw + kx];
                    let (lo, hi) = column_range(kx * d, spec.pad_w, s, g.w, g.wo);
                    if lo >= hi {
                        continue;
                    }
                    for oy in 0..g.ho {
                        let iy = (oy * s + ky * d) as isize - spec.pad_h as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let out_row = &mut dst[oy * g.wo + lo..oy * g.wo + hi];
                        let first = lo * s + kx * d - spec.pad_w;
                        if s == 1 {
                            for (o, &x) in out_row.iter_mut().zip(&row[first..first + (hi - lo)]) {
                                *o = *o + wv * x;
                            }
                        } else {
                            for (j, o) in out_row.iter_mut().enumerate() {
                                *o = *o + wv * row[first + j * s];
                            }
                        }
                    }
                }
            }
        }
    });
    Ok(Tensor::from_parts(out_shape, out))
}

/// Gradients of [`conv2d`] given the output cotangent: the input gradient is
/// the transposed convolution of `grad_out` with `weight`.
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    spec: &ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let bias_stub: Option<Vec<T>> = spec.bias.then(|| vec![T::zero(); weight.dims()[0]]);
    let g = check_operands(input, weight, bias_stub.as_deref(), spec)?;
    let n = input.shape().n();
    let expected = [n, g.c_out, g.ho, g.wo];
    if grad_out.dims() != expected {
        return Err(Error::Incompatible {
            op: "conv2d_backward",
            lhs: grad_out.shape(),
            rhs: Shape::derived(expected),
        });
    }
    let (kh, kw) = (spec.kernel_h, spec.kernel_w);
    let (s, d) = (spec.stride as isize, spec.dilation as isize);
    let (ph, pw) = (spec.pad_h as isize, spec.pad_w as isize);
    let mut gin = vec![T::zero(); input.len()];
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); g.c_out];
    let x = input.data();
    let wd = weight.data();
    let go = grad_out.data();
    for ni in 0..n {
        for oc in 0..g.c_out {
            let group = oc / g.cout_pg;
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let gv = go[((ni * g.c_out + oc) * g.ho + oy) * g.wo + ox];
                    gb[oc] = gb[oc] + gv;
                    for il in 0..g.cin_pg {
                        let ic = group * g.cin_pg + il;
                        for ky in 0..kh {
                            let iy = oy as isize * s + ky as isize * d - ph;
                            if iy < 0 || iy >= g.h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = ox as isize * s + kx as isize * d - pw;
                                if ix < 0 || ix >= g.w as isize {
                                    continue;
                                }
                                let xi = ((ni * g.c_in + ic) * g.h + iy as usize) * g.w + ix as usize;
                                let wi = ((oc * g.cin_pg + il) * kh + ky) * kw + kx;
                                gin[xi] = gin[xi] + wd[wi] * gv;
                                gw[wi] = gw[wi] + x[xi] * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: Tensor::from_parts(input.shape(), gin),
        weight: Tensor::from_parts(weight.shape(), gw),
        bias: spec.bias.then_some(gb),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn impulse(size: usize) -> Tensor<f64> {
        let c = size / 2;
        Tensor::from_fn(Shape::new([1, 1, size, size]).unwrap(), |_, _, y, x| {
            if y == c && x == c {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let input = Tensor::<f32>::zeros(Shape::new([1, 1, 3, 3]).unwrap());
        let w = Tensor::from_vec([1, 1, 3, 3], (0..9).map(|v| v as f32 - 4.0).collect()).unwrap();
        let out = conv2d(&input, &w, None, &ConvSpec::new(3).padding(1)).unwrap();
        assert_eq!(out.dims(), [1, 1, 3, 3]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dilated_impulse_response_support() {
        let w = Tensor::ones(Shape::new([1, 1, 3, 3]).unwrap());
        let out = conv2d(&impulse(5), &w, None, &ConvSpec::new(3).dilation(2).padding(2)).unwrap();
        assert_eq!(out.dims(), [1, 1, 5, 5]);
        for y in 0..5 {
            for x in 0..5 {
                let expect = y % 2 == 0 && x % 2 == 0;
                assert_eq!(out.at(0, 0, y, x) != 0.0, expect, "({y},{x})");
            }
        }
    }

    #[test]
    fn pointwise_cost_formula() {
        let spec = ConvSpec::pointwise();
        let cost = spec.cost(32, 32, 1, 8, 8);
        assert_eq!(cost.macs, 65_536);
        assert_eq!(cost.params, 1024);
        assert_eq!(spec.with_bias().cost(32, 32, 1, 8, 8).params, 1056);
    }

    #[test]
    fn depthwise_cost_formula() {
        let spec = ConvSpec::new(3).groups(32).padding(1);
        assert_eq!(spec.cost(32, 32, 1, 4, 4), OpCost::new(288, 288 * 16));
    }

    #[test]
    fn mismatched_weight_names_dimension() {
        let input = Tensor::<f32>::zeros(Shape::new([1, 4, 5, 5]).unwrap());
        let w = Tensor::<f32>::zeros(Shape::new([2, 3, 3, 3]).unwrap());
        let err = conv2d(&input, &w, None, &ConvSpec::new(3)).unwrap_err();
        assert!(err.to_string().contains("weight input channels"), "{err}");
    }

    #[test]
    fn empty_output_is_error() {
        let input = Tensor::<f32>::zeros(Shape::new([1, 1, 2, 2]).unwrap());
        let w = Tensor::<f32>::zeros(Shape::new([1, 1, 3, 3]).unwrap());
        assert!(matches!(
            conv2d(&input, &w, None, &ConvSpec::new(3)),
            Err(Error::EmptyOutput { .. })
        ));
    }

    #[test]
    fn stride_two_matches_subsampled_stride_one() {
        let input = Tensor::from_fn(Shape::new([1, 2, 7, 7]).unwrap(), |_, c, y, x| {
            ((c * 31 + y * 7 + x * 3) % 11) as f64 - 5.0
        });
        let w = Tensor::from_fn(Shape::new([3, 2, 3, 3]).unwrap(), |o, i, y, x| {
            ((o * 5 + i * 3 + y + 2 * x) % 7) as f64 * 0.25 - 0.5
        });
        let full = conv2d(&input, &w, None, &ConvSpec::new(3).padding(1)).unwrap();
        let strided = conv2d(&input, &w, None, &ConvSpec::new(3).padding(1).stride(2)).unwrap();
        assert_eq!(strided.dims(), [1, 3, 4, 4]);
        for o in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(strided.at(0, o, y, x), full.at(0, o, 2 * y, 2 * x));
                }
            }
        }
    }
}
