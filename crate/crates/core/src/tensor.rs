//! Dense rank-4 tensors in NCHW order plus the broadcasting, concatenation
//! and elementwise arithmetic the layer primitives build on.

use std::fmt;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. `f32` drives inference, `f64` drives
/// gradient checking.
pub trait Scalar:
    Float + FromPrimitive + Default + fmt::Debug + fmt::Display + Send + Sync + Sum + 'static
{
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite literal")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Extents of a rank-4 tensor: batch, channels, height, width.
#[derive(Copy, Clone, PartialEq, Eq, Hash)]
pub struct Shape([usize; 4]);

impl Shape {
    pub fn new(dims: [usize; 4]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidShape(dims));
        }
        Ok(Shape(dims))
    }

    /// For extents computed from already-validated shapes.
    #[inline]
    pub(crate) fn derived(dims: [usize; 4]) -> Self {
        debug_assert!(dims.iter().all(|&d| d > 0), "derived shape {dims:?}");
        Shape(dims)
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.0
    }
    #[inline]
    pub fn n(&self) -> usize {
        self.0[0]
    }
    #[inline]
    pub fn c(&self) -> usize {
        self.0[1]
    }
    #[inline]
    pub fn h(&self) -> usize {
        self.0[2]
    }
    #[inline]
    pub fn w(&self) -> usize {
        self.0[3]
    }
    #[inline]
    pub fn plane(&self) -> usize {
        self.0[2] * self.0[3]
    }
    #[inline]
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    pub fn with_c(&self, c: usize) -> Shape {
        Shape::derived([self.0[0], c, self.0[2], self.0[3]])
    }

    pub fn with_hw(&self, h: usize, w: usize) -> Shape {
        Shape::derived([self.0[0], self.0[1], h, w])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [n, c, h, w] = self.0;
        write!(f, "{n}x{c}x{h}x{w}")
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Axis {
    Batch,
    Channel,
    Height,
    Width,
}

impl Axis {
    fn index(self) -> usize {
        match self {
            Axis::Batch => 0,
            Axis::Channel => 1,
            Axis::Height => 2,
            Axis::Width => 3,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Axis::Batch => "batch",
            Axis::Channel => "channels",
            Axis::Height => "height",
            Axis::Width => "width",
        }
    }
}

pub(crate) fn dim_name(i: usize) -> &'static str {
    ["batch", "channels", "height", "width"][i]
}

/// Contiguous row-major (N, C, H, W) tensor.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn from_vec(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        Self::from_shape_vec(shape, data)
    }

    pub fn from_shape_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::DataLength {
                shape,
                expected: shape.numel(),
                got: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.numel(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let [n, c, h, w] = shape.dims();
        let mut data = Vec::with_capacity(shape.numel());
        for ni in 0..n {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        data.push(f(ni, ci, y, x));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }
    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.shape.dims()
    }
    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        let [_, cc, h, w] = self.shape.dims();
        ((n * cc + c) * h + y) * w + x
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.offset(n, c, y, x)]
    }

    /// One (H, W) plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c() + c) * p;
        &self.data[start..start + p]
    }

    pub fn reshape(&self, dims: [usize; 4]) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.numel() != self.shape.numel() {
            return Err(Error::DataLength {
                shape,
                expected: shape.numel(),
                got: self.data.len(),
            });
        }
        Ok(Tensor {
            shape,
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        same_shape(op, self, other)?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::of(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64().expect("finite")))
                .collect(),
        }
    }

    /// Inner product of the flattened data.
    pub fn dot(&self, other: &Self) -> Result<T> {
        same_shape("dot", self, other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    /// Batch item `n` as a 1-batch tensor.
    pub fn batch_item(&self, n: usize) -> Self {
        let per = self.shape.numel() / self.shape.n();
        Tensor {
            shape: Shape::derived([1, self.shape.c(), self.shape.h(), self.shape.w()]),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }
}

pub(crate) fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Incompatible {
            op,
            lhs: a.shape,
            rhs: b.shape,
        });
    }
    Ok(())
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "add", |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.zip_map(b, "sub", |x, y| x - y)
}

/// Elementwise maximum of two equally shaped tensors.
pub fn elementwise_max<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if crate::ops::kink::tracking() && a.shape == b.shape {
        let branches = a.data.iter().zip(&b.data).map(|(&x, &y)| u64::from(y > x));
        crate::ops::kink::record_kink(f64::INFINITY, branches);
    }
    a.zip_map(b, "elementwise_max", |x, y| if y > x { y } else { x })
}

/// Routes the cotangent to whichever operand won the max (ties go to `a`).
pub fn elementwise_max_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    same_shape("elementwise_max_backward", a, b)?;
    same_shape("elementwise_max_backward", a, grad)?;
    let mut ga = vec![T::zero(); a.len()];
    let mut gb = vec![T::zero(); a.len()];
    for i in 0..a.len() {
        if b.data[i] > a.data[i] {
            gb[i] = grad.data[i];
        } else {
            ga[i] = grad.data[i];
        }
    }
    Ok((
        Tensor::from_parts(a.shape, ga),
        Tensor::from_parts(a.shape, gb),
    ))
}

/// Result shape of broadcasting `a` against `b`: extents must agree or be 1.
pub fn broadcast_shape(a: Shape, b: Shape) -> Result<Shape> {
    let mut out = [0; 4];
    for i in 0..4 {
        let (x, y) = (a.0[i], b.0[i]);
        out[i] = if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            return Err(Error::Incompatible {
                op: "broadcast",
                lhs: a,
                rhs: b,
            });
        };
    }
    Ok(Shape::derived(out))
}

#[inline]
fn bcast_strides(s: Shape) -> [usize; 4] {
    let [n, c, h, w] = s.dims();
    let full = [c * h * w, h * w, w, 1];
    let dims = [n, c, h, w];
    let mut st = [0; 4];
    for i in 0..4 {
        st[i] = if dims[i] == 1 { 0 } else { full[i] };
    }
    st
}

fn broadcast_apply<T: Scalar>(
    operands: &[&Tensor<T>],
    out_shape: Shape,
    f: impl Fn(&[T]) -> T,
) -> Tensor<T> {
    let strides: Vec<[usize; 4]> = operands.iter().map(|t| bcast_strides(t.shape)).collect();
    let [n, c, h, w] = out_shape.dims();
    let mut data = Vec::with_capacity(out_shape.numel());
    let mut vals = vec![T::zero(); operands.len()];
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    for (k, t) in operands.iter().enumerate() {
                        let s = &strides[k];
                        vals[k] = t.data[ni * s[0] + ci * s[1] + y * s[2] + x * s[3]];
                    }
                    data.push(f(&vals));
                }
            }
        }
    }
    Tensor::from_parts(out_shape, data)
}

/// Elementwise product of two or three operands after broadcasting.
pub fn hadamard<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, c: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let mut shape = broadcast_shape(a.shape, b.shape)?;
    match c {
        None => Ok(broadcast_apply(&[a, b], shape, |v| v[0] * v[1])),
        Some(c) => {
            shape = broadcast_shape(shape, c.shape)?;
            Ok(broadcast_apply(&[a, b, c], shape, |v| v[0] * v[1] * v[2]))
        }
    }
}

/// Elementwise sum with broadcasting.
pub fn broadcast_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let shape = broadcast_shape(a.shape, b.shape)?;
    Ok(broadcast_apply(&[a, b], shape, |v| v[0] + v[1]))
}

/// Sums `t` down to `target`, the adjoint of broadcasting `target` up to
/// `t.shape()`.
pub fn reduce_to<T: Scalar>(t: &Tensor<T>, target: Shape) -> Result<Tensor<T>> {
    if broadcast_shape(target, t.shape)? != t.shape {
        return Err(Error::Incompatible {
            op: "reduce_to",
            lhs: t.shape,
            rhs: target,
        });
    }
    if target == t.shape {
        return Ok(t.clone());
    }
    let st = bcast_strides(target);
    let mut out = vec![T::zero(); target.numel()];
    let [n, c, h, w] = t.dims();
    let mut i = 0;
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[ni * st[0] + ci * st[1] + y * st[2] + x * st[3]] =
                        out[ni * st[0] + ci * st[1] + y * st[2] + x * st[3]] + t.data[i];
                    i += 1;
                }
            }
        }
    }
    Ok(Tensor::from_parts(target, out))
}

/// Gradients of `hadamard(a, b, c)` with respect to each operand.
pub fn hadamard_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    c: Option<&Tensor<T>>,
    grad: &Tensor<T>,
) -> Result<Vec<Tensor<T>>> {
    let ops: Vec<&Tensor<T>> = match c {
        Some(c) => vec![a, b, c],
        None => vec![a, b],
    };
    let mut out = Vec::with_capacity(ops.len());
    for i in 0..ops.len() {
        let mut acc = grad.clone();
        for (j, o) in ops.iter().enumerate() {
            if j != i {
                acc = hadamard(&acc, o, None)?;
            }
        }
        out.push(reduce_to(&acc, ops[i].shape)?);
    }
    Ok(out)
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: Axis) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let ax = axis.index();
    let mut dims = first.dims();
    dims[ax] = 0;
    for p in parts {
        let pd = p.dims();
        for i in 0..4 {
            if i != ax && pd[i] != first.dims()[i] {
                return Err(Error::DimMismatch {
                    op: "concat",
                    dim: dim_name(i),
                    expected: first.dims()[i],
                    got: pd[i],
                });
            }
        }
        dims[ax] += pd[ax];
    }
    let shape = Shape::derived(dims);
    // Each part contributes a contiguous run of `inner` elements per outer index.
    let outer: usize = dims[..ax].iter().product();
    let mut data = Vec::with_capacity(shape.numel());
    for o in 0..outer {
        for p in parts {
            let inner: usize = p.dims()[ax..].iter().product();
            data.extend_from_slice(&p.data[o * inner..(o + 1) * inner]);
        }
    }
    Ok(Tensor::from_parts(shape, data))
}

/// Splits along `axis` into pieces of the given extents; the inverse of
/// [`concat`].
pub fn split<T: Scalar>(t: &Tensor<T>, axis: Axis, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let ax = axis.index();
    let total: usize = sizes.iter().sum();
    if total != t.dims()[ax] {
        return Err(Error::DimMismatch {
            op: "split",
            dim: axis.name(),
            expected: t.dims()[ax],
            got: total,
        });
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument("split into an empty piece".into()));
    }
    let dims = t.dims();
    let outer: usize = dims[..ax].iter().product();
    let post: usize = dims[ax + 1..].iter().product();
    let mut pieces: Vec<Vec<T>> = sizes.iter().map(|s| Vec::with_capacity(outer * s * post)).collect();
    let row = total * post;
    for o in 0..outer {
        let mut start = o * row;
        for (k, &s) in sizes.iter().enumerate() {
            pieces[k].extend_from_slice(&t.data[start..start + s * post]);
            start += s * post;
        }
    }
    Ok(pieces
        .into_iter()
        .zip(sizes)
        .map(|(d, &s)| {
            let mut pd = dims;
            pd[ax] = s;
            Tensor::from_parts(Shape::derived(pd), d)
        })
        .collect())
}

/// Repeats a single-channel tensor `c` times along the channel axis.
pub fn repeat_channels<T: Scalar>(t: &Tensor<T>, c: usize) -> Result<Tensor<T>> {
    if t.shape.c() != 1 {
        return Err(Error::DimMismatch {
            op: "repeat_channels",
            dim: "channels",
            expected: 1,
            got: t.shape.c(),
        });
    }
    let parts: Vec<&Tensor<T>> = std::iter::repeat_n(t, c).collect();
    concat(&parts, Axis::Channel)
}

/// Sum over channels, keeping a single channel.
pub fn sum_channels<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = t.dims();
    let p = h * w;
    let mut out = vec![T::zero(); n * p];
    for ni in 0..n {
        for ci in 0..c {
            let src = t.plane(ni, ci);
            let dst = &mut out[ni * p..(ni + 1) * p];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
    Tensor::from_parts(Shape::derived([n, 1, h, w]), out)
}
