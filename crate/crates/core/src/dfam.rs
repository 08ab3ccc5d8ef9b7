//! Prior-guided aggregation of the texture and semantic pyramids, and the
//! top-down decoder producing the final saliency map.
//!
//! Per level, with `B = T + S` and the priors resized to the level extent:
//!
//! ```text
//! F~  = conv1(cat(B * P_GS, B * P_LT, B))
//! R_k = dil3x3_k(dw1xk(dwkx1(F~)))          k in the configured triple
//! F   = conv1(R_k1 + R_k2 + R_k3)
//! ```
//!
//! The decoder then accumulates `D5 = F5, Di = Fi + up(D(i+1))` and maps `D1`
//! through a one-channel 1x1 convolution, a sigmoid and a resize to the input.

use std::fmt;
use std::str::FromStr;

use crate::dirm::LEVELS;
use crate::error::{Error, Result};
use crate::layers::{conv, conv_backward, conv_cost, Head, HeadCache};
use crate::ops::{resize_bilinear, resize_bilinear_backward, ConvSpec, OpCost, ResizeTarget};
use crate::params::{Grads, Layout, ParamView};
use crate::tensor::{add, concat, hadamard, hadamard_backward, split, Axis, Scalar, Shape, Tensor};

/// Kernel sizes of the three receptive-field branches; each also sets the
/// dilation of that branch's final 3x3 convolution.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct DfamConfig {
    pub kernels: [usize; 3],
}

impl Default for DfamConfig {
    fn default() -> Self {
        DfamConfig { kernels: [3, 5, 7] }
    }
}

impl DfamConfig {
    pub fn new(kernels: [usize; 3]) -> Result<Self> {
        let c = DfamConfig { kernels };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        for &k in &self.kernels {
            check_kernel(k)?;
        }
        if !self.kernels.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(format!(
                "branch kernels must be strictly increasing, got {self}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for DfamConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.kernels;
        write!(f, "{a},{b},{c}")
    }
}

impl FromStr for DfamConfig {
    type Err = Error;

    /// Parses `"a,b,c"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::InvalidArgument(format!("expected three kernels as a,b,c, got {s:?}")));
        }
        let mut kernels = [0; 3];
        for (k, p) in kernels.iter_mut().zip(&parts) {
            *k = p
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("invalid kernel size {p:?}")))?;
        }
        DfamConfig::new(kernels)
    }
}

fn check_kernel(k: usize) -> Result<()> {
    if k == 0 || k.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("branch kernel must be odd and positive, got {k}")));
    }
    Ok(())
}

fn pointwise() -> ConvSpec {
    ConvSpec::pointwise().with_bias()
}

/// The three depthwise convolutions of branch `k`, in application order.
fn branch_specs(k: usize, ch: usize) -> [ConvSpec; 3] {
    let r = (k - 1) / 2;
    [
        ConvSpec::asymmetric(k, 1).padding_hw(r, 0).groups(ch).with_bias(),
        ConvSpec::asymmetric(1, k).padding_hw(0, r).groups(ch).with_bias(),
        ConvSpec::new(3).dilation(k).padding(k).groups(ch).with_bias(),
    ]
}

const BRANCH_PARTS: [&str; 3] = ["kx1", "1xk", "dil"];

pub struct PriorFuseCache<T> {
    b: Tensor<T>,
    p_gs: Tensor<T>,
    p_lt: Tensor<T>,
    gs_shape: Shape,
    lt_shape: Shape,
    cat: Tensor<T>,
}

fn resize_prior<T: Scalar>(prior: &Tensor<T>, like: Shape) -> Result<Tensor<T>> {
    if prior.shape().c() != 1 || prior.shape().n() != like.n() {
        return Err(Error::Incompatible {
            op: "prior_fuse",
            lhs: like,
            rhs: prior.shape(),
        });
    }
    resize_bilinear(prior, ResizeTarget::Extent(like.h(), like.w()))
}

/// Fuses `T + S` with both priors through a `3C -> C` 1x1 convolution read
/// from `p`.
pub fn prior_fuse<T: Scalar>(
    p: &ParamView<'_, T>,
    t: &Tensor<T>,
    s: &Tensor<T>,
    p_gs: &Tensor<T>,
    p_lt: &Tensor<T>,
) -> Result<(Tensor<T>, PriorFuseCache<T>)> {
    let b = add(t, s)?;
    let gs = resize_prior(p_gs, b.shape())?;
    let lt = resize_prior(p_lt, b.shape())?;
    let f_gs = hadamard(&b, &gs, None)?;
    let f_lt = hadamard(&b, &lt, None)?;
    let cat = concat(&[&f_gs, &f_lt, &b], Axis::Channel)?;
    let out = conv(p, &cat, &pointwise())?;
    Ok((
        out,
        PriorFuseCache {
            b,
            p_gs: gs,
            p_lt: lt,
            gs_shape: p_gs.shape(),
            lt_shape: p_lt.shape(),
            cat,
        },
    ))
}

pub struct PriorFuseGrads<T> {
    /// Shared by `T` and `S`, which enter only through their sum.
    pub b: Tensor<T>,
    pub p_gs: Tensor<T>,
    pub p_lt: Tensor<T>,
}

pub fn prior_fuse_backward<T: Scalar>(
    p: &ParamView<'_, T>,
    c: &PriorFuseCache<T>,
    grad: &Tensor<T>,
    grads: &mut Grads<T>,
) -> Result<PriorFuseGrads<T>> {
    let g_cat = conv_backward(p, &c.cat, &pointwise(), grad, grads)?;
    let ch = c.b.shape().c();
    let mut parts = split(&g_cat, Axis::Channel, &[ch, ch, ch])?.into_iter();
    let (g_gs, g_lt, mut g_b) = (parts.next().unwrap(), parts.next().unwrap(), parts.next().unwrap());
    let mut gs = hadamard_backward(&c.b, &c.p_gs, None, &g_gs)?.into_iter();
    g_b = add(&g_b, &gs.next().unwrap())?;
    let g_pgs = resize_bilinear_backward(c.gs_shape, &gs.next().unwrap())?;
    let mut lt = hadamard_backward(&c.b, &c.p_lt, None, &g_lt)?.into_iter();
    g_b = add(&g_b, &lt.next().unwrap())?;
    let g_plt = resize_bilinear_backward(c.lt_shape, &lt.next().unwrap())?;
    Ok(PriorFuseGrads {
        b: g_b,
        p_gs: g_pgs,
        p_lt: g_plt,
    })
}

pub struct BranchCache<T> {
    inputs: [Tensor<T>; 3],
}

/// Layout of one branch under `prefix`.
pub fn rf_branch_layout(l: &mut Layout, prefix: &str, k: usize, ch: usize) -> Result<()> {
    check_kernel(k)?;
    for (spec, part) in branch_specs(k, ch).iter().zip(BRANCH_PARTS) {
        l.conv(&format!("{prefix}.{part}"), spec, ch, ch);
    }
    Ok(())
}

pub fn rf_branch_cost(k: usize, ch: usize, hw: (usize, usize)) -> OpCost {
    branch_specs(k, ch)
        .iter()
        .fold(OpCost::ZERO, |acc, s| acc + conv_cost(s, ch, ch, hw))
}

/// `k x 1`, then `1 x k` depthwise, then a 3x3 depthwise with dilation `k`.
pub fn rf_branch<T: Scalar>(p: &ParamView<'_, T>, x: &Tensor<T>, k: usize) -> Result<(Tensor<T>, BranchCache<T>)> {
    check_kernel(k)?;
    let ch = x.shape().c();
    let specs = branch_specs(k, ch);
    let mut cur = x.clone();
    let mut inputs = Vec::with_capacity(3);
    for (spec, part) in specs.iter().zip(BRANCH_PARTS) {
        let next = conv(&p.sub(part), &cur, spec)?;
        inputs.push(std::mem::replace(&mut cur, next));
    }
    let inputs: [Tensor<T>; 3] = inputs.try_into().unwrap_or_else(|_| unreachable!());
    Ok((cur, BranchCache { inputs }))
}

pub fn rf_branch_backward<T: Scalar>(
    p: &ParamView<'_, T>,
    c: &BranchCache<T>,
    k: usize,
    grad: &Tensor<T>,
    grads: &mut Grads<T>,
) -> Result<Tensor<T>> {
    let specs = branch_specs(k, c.inputs[0].shape().c());
    let mut g = grad.clone();
    for i in (0..3).rev() {
        g = conv_backward(&p.sub(BRANCH_PARTS[i]), &c.inputs[i], &specs[i], &g, grads)?;
    }
    Ok(g)
}

/// One aggregation module; every pyramid level owns an independent instance.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Dfam {
    pub ef: usize,
    pub config: DfamConfig,
}

pub struct DfamCache<T> {
    fuse: PriorFuseCache<T>,
    branches: Vec<BranchCache<T>>,
    summed: Tensor<T>,
}

pub struct DfamGrads<T> {
    pub t: Tensor<T>,
    pub s: Tensor<T>,
    pub p_gs: Tensor<T>,
    pub p_lt: Tensor<T>,
}

impl Dfam {
    pub fn new(ef: usize, config: DfamConfig) -> Result<Self> {
        config.validate()?;
        Ok(Dfam { ef, config })
    }

    fn branch_name(j: usize) -> String {
        format!("rf{}", j + 1)
    }

    pub fn layout(&self, l: &mut Layout, prefix: &str) -> Result<()> {
        let ef = self.ef;
        l.conv(&format!("{prefix}.fuse"), &pointwise(), 3 * ef, ef);
        for (j, &k) in self.config.kernels.iter().enumerate() {
            rf_branch_layout(l, &format!("{prefix}.{}", Self::branch_name(j)), k, ef)?;
        }
        l.conv(&format!("{prefix}.merge"), &pointwise(), ef, ef);
        Ok(())
    }

    pub fn cost(&self, hw: (usize, usize)) -> OpCost {
        let ef = self.ef;
        let branches = self
            .config
            .kernels
            .iter()
            .fold(OpCost::ZERO, |acc, &k| acc + rf_branch_cost(k, ef, hw));
        conv_cost(&pointwise(), 3 * ef, ef, hw) + branches + conv_cost(&pointwise(), ef, ef, hw)
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamView<'_, T>,
        t: &Tensor<T>,
        s: &Tensor<T>,
        p_gs: &Tensor<T>,
        p_lt: &Tensor<T>,
    ) -> Result<(Tensor<T>, DfamCache<T>)> {
        if t.shape().c() != self.ef {
            return Err(Error::DimMismatch {
                op: "dfam",
                dim: "channels",
                expected: self.ef,
                got: t.shape().c(),
            });
        }
        let (fused, fuse) = prior_fuse(&p.sub("fuse"), t, s, p_gs, p_lt)?;
        let mut summed: Option<Tensor<T>> = None;
        let mut branches = Vec::with_capacity(3);
        for (j, &k) in self.config.kernels.iter().enumerate() {
            let (y, c) = rf_branch(&p.sub(&Self::branch_name(j)), &fused, k)?;
            branches.push(c);
            summed = Some(match summed {
                Some(a) => add(&a, &y)?,
                None => y,
            });
        }
        let summed = summed.unwrap_or_else(|| unreachable!());
        let out = conv(&p.sub("merge"), &summed, &pointwise())?;
        Ok((out, DfamCache { fuse, branches, summed }))
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamView<'_, T>,
        c: &DfamCache<T>,
        grad: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<DfamGrads<T>> {
        let g_sum = conv_backward(&p.sub("merge"), &c.summed, &pointwise(), grad, grads)?;
        let mut g_fused: Option<Tensor<T>> = None;
        for (j, &k) in self.config.kernels.iter().enumerate() {
            let g = rf_branch_backward(&p.sub(&Self::branch_name(j)), &c.branches[j], k, &g_sum, grads)?;
            g_fused = Some(match g_fused {
                Some(a) => add(&a, &g)?,
                None => g,
            });
        }
        let g = prior_fuse_backward(&p.sub("fuse"), &c.fuse, &g_fused.unwrap_or_else(|| unreachable!()), grads)?;
        Ok(DfamGrads {
            t: g.b.clone(),
            s: g.b,
            p_gs: g.p_gs,
            p_lt: g.p_lt,
        })
    }
}

pub struct DecodeCache<T> {
    shapes: Vec<Shape>,
    head: HeadCache<T>,
}

/// Top-down accumulation and the final head, read from `p.out`.
pub fn decode<T: Scalar>(
    p: &ParamView<'_, T>,
    f: &[Tensor<T>],
    input_hw: (usize, usize),
) -> Result<(Tensor<T>, DecodeCache<T>)> {
    if f.len() != LEVELS {
        return Err(Error::DimMismatch {
            op: "decode",
            dim: "pyramid levels",
            expected: LEVELS,
            got: f.len(),
        });
    }
    let mut d = f[LEVELS - 1].clone();
    for fi in f[..LEVELS - 1].iter().rev() {
        let up = resize_bilinear(&d, ResizeTarget::Extent(fi.shape().h(), fi.shape().w()))?;
        d = add(fi, &up)?;
    }
    let (_, s, head) = Head::forward(&p.sub("out"), &d, input_hw)?;
    Ok((
        s,
        DecodeCache {
            shapes: f.iter().map(Tensor::shape).collect(),
            head,
        },
    ))
}

/// Gradients for each `F_i`.
pub fn decode_backward<T: Scalar>(
    p: &ParamView<'_, T>,
    c: &DecodeCache<T>,
    grad: &Tensor<T>,
    grads: &mut Grads<T>,
) -> Result<Vec<Tensor<T>>> {
    let native = Tensor::zeros(c.shapes[0].with_c(1));
    let mut g_d = Head::backward(&p.sub("out"), &c.head, &native, grad, grads)?;
    let mut g_f = Vec::with_capacity(LEVELS);
    for i in 0..LEVELS - 1 {
        g_f.push(g_d.clone());
        g_d = resize_bilinear_backward(c.shapes[i + 1], &g_d)?;
    }
    g_f.push(g_d);
    Ok(g_f)
}

/// Five per-level aggregation modules followed by [`decode`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Decoder {
    pub dfam: Dfam,
}

pub struct DecoderCache<T> {
    levels: Vec<DfamCache<T>>,
    decode: DecodeCache<T>,
}

pub struct DecoderGrads<T> {
    pub t: Vec<Tensor<T>>,
    pub s: Vec<Tensor<T>>,
    pub p_gs: Tensor<T>,
    pub p_lt: Tensor<T>,
}

impl Decoder {
    pub fn new(ef: usize, config: DfamConfig) -> Result<Self> {
        Ok(Decoder {
            dfam: Dfam::new(ef, config)?,
        })
    }

    pub fn layout(&self, prefix: &str) -> Result<Layout> {
        let mut l = Layout::new();
        for i in 0..LEVELS {
            self.dfam.layout(&mut l, &format!("{prefix}.l{}", i + 1))?;
        }
        Head::layout(&mut l, &format!("{prefix}.out"), self.dfam.ef);
        Ok(l)
    }

    pub fn cost(&self, input_size: usize) -> OpCost {
        let hw = |i: usize| (input_size >> (i + 1), input_size >> (i + 1));
        (0..LEVELS).fold(OpCost::ZERO, |acc, i| acc + self.dfam.cost(hw(i))) + Head::cost(self.dfam.ef, hw(0))
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamView<'_, T>,
        t: &[Tensor<T>],
        s: &[Tensor<T>],
        p_gs: &Tensor<T>,
        p_lt: &Tensor<T>,
        input_hw: (usize, usize),
    ) -> Result<(Tensor<T>, DecoderCache<T>)> {
        if t.len() != LEVELS || s.len() != LEVELS {
            return Err(Error::DimMismatch {
                op: "decoder",
                dim: "pyramid levels",
                expected: LEVELS,
                got: t.len().min(s.len()),
            });
        }
        let mut f = Vec::with_capacity(LEVELS);
        let mut levels = Vec::with_capacity(LEVELS);
        for i in 0..LEVELS {
            let (fi, c) = self.dfam.forward(&p.sub(&format!("l{}", i + 1)), &t[i], &s[i], p_gs, p_lt)?;
            f.push(fi);
            levels.push(c);
        }
        let (out, decode) = decode(p, &f, input_hw)?;
        Ok((out, DecoderCache { levels, decode }))
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamView<'_, T>,
        c: &DecoderCache<T>,
        grad: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<DecoderGrads<T>> {
        let g_f = decode_backward(p, &c.decode, grad, grads)?;
        let mut out = DecoderGrads {
            t: Vec::with_capacity(LEVELS),
            s: Vec::with_capacity(LEVELS),
            p_gs: Tensor::zeros(c.levels[0].fuse.gs_shape),
            p_lt: Tensor::zeros(c.levels[0].fuse.lt_shape),
        };
        for i in 0..LEVELS {
            let g = self.dfam.backward(&p.sub(&format!("l{}", i + 1)), &c.levels[i], &g_f[i], grads)?;
            out.t.push(g.t);
            out.s.push(g.s);
            out.p_gs = add(&out.p_gs, &g.p_gs)?;
            out.p_lt = add(&out.p_lt, &g.p_lt)?;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn field(dims: [usize; 4], seed: f64) -> Tensor<f64> {
        Tensor::from_fn(Shape::new(dims).unwrap(), |n, c, y, x| {
            ((n * 101 + c * 31 + y * 7 + x * 3) as f64 * 0.137 + seed).sin()
        })
    }

    fn zero_biases(store: &mut ParamStore<f64>) {
        let names: Vec<String> = store.names().filter(|n| n.ends_with(".bias")).cloned().collect();
        for n in names {
            let t = store.get_mut(&n).unwrap();
            *t = t.scale(0.0);
        }
    }

    fn single_fuse(ef: usize, seed: u64) -> ParamStore<f64> {
        let mut l = Layout::new();
        l.conv("fuse", &pointwise(), 3 * ef, ef);
        l.init(seed).cast()
    }

    #[test]
    fn config_validation_and_parsing() {
        for k in [[3, 5, 7], [1, 3, 5], [3, 9, 15], [3, 7, 11]] {
            assert!(DfamConfig::new(k).is_ok());
        }
        for k in [[3, 4, 7], [3, 3, 5], [7, 5, 3], [0, 3, 5]] {
            assert!(DfamConfig::new(k).is_err(), "{k:?}");
        }
        assert_eq!("3, 9,15".parse::<DfamConfig>().unwrap().kernels, [3, 9, 15]);
        assert!("3,5".parse::<DfamConfig>().is_err());
        assert!("3,x,7".parse::<DfamConfig>().is_err());
        assert_eq!(DfamConfig::default().to_string(), "3,5,7");
    }

    #[test]
    fn unit_priors_with_averaging_kernel_give_the_sum() {
        let ef = 3;
        let mut store = single_fuse(ef, 0);
        let w = Tensor::from_fn(Shape::new([ef, 3 * ef, 1, 1]).unwrap(), |o, i, _, _| {
            if i % ef == o {
                1.0 / 3.0
            } else {
                0.0
            }
        });
        store.insert("fuse.weight", w);
        zero_biases(&mut store);
        let (t, s) = (field([2, ef, 6, 5], 0.0), field([2, ef, 6, 5], 1.0));
        let ones = Tensor::ones(Shape::new([2, 1, 3, 3]).unwrap());
        let (y, _) = prior_fuse(&store.view("fuse"), &t, &s, &ones, &ones).unwrap();
        let b = add(&t, &s).unwrap();
        for (a, e) in y.data().iter().zip(b.data()) {
            assert!((a - e).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_priors_with_selecting_kernel_give_the_sum_exactly() {
        let ef = 4;
        let mut store = single_fuse(ef, 1);
        let w = Tensor::from_fn(Shape::new([ef, 3 * ef, 1, 1]).unwrap(), |o, i, _, _| {
            if i == 2 * ef + o {
                1.0
            } else {
                0.0
            }
        });
        store.insert("fuse.weight", w);
        zero_biases(&mut store);
        let (t, s) = (field([1, ef, 4, 4], 0.5), field([1, ef, 4, 4], 2.0));
        let zero = Tensor::zeros(Shape::new([1, 1, 2, 2]).unwrap());
        let (y, _) = prior_fuse(&store.view("fuse"), &t, &s, &zero, &zero).unwrap();
        assert_eq!(y, add(&t, &s).unwrap());
    }

    #[test]
    fn prior_fuse_matches_loop_oracle() {
        let ef = 3;
        let store = single_fuse(ef, 7);
        let (t, s) = (field([2, ef, 5, 4], 0.1), field([2, ef, 5, 4], 0.9));
        let (gs, lt) = (field([2, 1, 5, 4], 3.0).map(|v| 0.5 + 0.4 * v), field([2, 1, 5, 4], 4.0).map(|v| 0.5 + 0.4 * v));
        let (y, _) = prior_fuse(&store.view("fuse"), &t, &s, &gs, &lt).unwrap();
        let w = store.get("fuse.weight").unwrap();
        let bias = store.get("fuse.bias").unwrap();
        for n in 0..2 {
            for o in 0..ef {
                for yy in 0..5 {
                    for xx in 0..4 {
                        let mut acc = bias.data()[o];
                        for i in 0..ef {
                            let b = t.at(n, i, yy, xx) + s.at(n, i, yy, xx);
                            acc += w.at(o, i, 0, 0) * b * gs.at(n, 0, yy, xx);
                            acc += w.at(o, ef + i, 0, 0) * b * lt.at(n, 0, yy, xx);
                            acc += w.at(o, 2 * ef + i, 0, 0) * b;
                        }
                        assert!((y.at(n, o, yy, xx) - acc).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn prior_fuse_rejects_mismatched_inputs() {
        let store = single_fuse(2, 0);
        let p = store.view("fuse");
        let prior = Tensor::ones(Shape::new([1, 1, 4, 4]).unwrap());
        assert!(prior_fuse(&p, &field([1, 2, 4, 4], 0.0), &field([1, 2, 4, 3], 0.0), &prior, &prior).is_err());
        let two = Tensor::ones(Shape::new([1, 2, 4, 4]).unwrap());
        assert!(prior_fuse(&p, &field([1, 2, 4, 4], 0.0), &field([1, 2, 4, 4], 0.0), &two, &prior).is_err());
    }

    fn branch_store(k: usize, ch: usize, seed: u64) -> ParamStore<f64> {
        let mut l = Layout::new();
        rf_branch_layout(&mut l, "b", k, ch).unwrap();
        let mut store = l.init(seed).cast();
        zero_biases(&mut store);
        store
    }

    /// Bounding box (rows, cols) of the nonzero response.
    fn support(y: &Tensor<f64>) -> (usize, usize) {
        let [_, c, h, w] = y.dims();
        let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    if y.at(0, ci, yy, xx) != 0.0 {
                        r0 = r0.min(yy);
                        r1 = r1.max(yy);
                        c0 = c0.min(xx);
                        c1 = c1.max(xx);
                    }
                }
            }
        }
        (r1 + 1 - r0, c1 + 1 - c0)
    }

    #[test]
    fn branch_impulse_support_is_three_k() {
        for k in [3, 5, 7] {
            let store = branch_store(k, 2, k as u64);
            let x = Tensor::from_fn(Shape::new([1, 2, 31, 31]).unwrap(), |_, c, y, x| {
                if c == 1 && y == 15 && x == 15 {
                    1.0
                } else {
                    0.0
                }
            });
            let (y, _) = rf_branch(&store.view("b"), &x, k).unwrap();
            assert_eq!(y.dims(), [1, 2, 31, 31]);
            assert_eq!(support(&y), (3 * k, 3 * k), "k = {k}");
        }
    }

    #[test]
    fn branch_parameter_count_and_zero_weights() {
        let mut l = Layout::new();
        rf_branch_layout(&mut l, "b", 3, 32).unwrap();
        let weights: u64 = l
            .specs()
            .iter()
            .filter(|s| s.name.ends_with(".weight"))
            .map(|s| s.numel() as u64)
            .sum();
        assert_eq!(weights, 480);
        assert_eq!(l.learnable_count(), 480 + 3 * 32);
        assert_eq!(rf_branch_cost(3, 32, (8, 8)).params, l.learnable_count());

        assert!(rf_branch_layout(&mut Layout::new(), "b", 4, 2).is_err());
        let store: ParamStore<f64> = l.zero_init().cast();
        let (y, _) = rf_branch(&store.view("b"), &field([1, 32, 6, 6], 0.0), 3).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(rf_branch(&store.view("b"), &field([1, 32, 6, 6], 0.0), 2).is_err());
    }

    fn dfam_store(d: &Dfam, seed: u64) -> ParamStore<f64> {
        let mut l = Layout::new();
        d.layout(&mut l, "m").unwrap();
        l.init(seed).cast()
    }

    #[test]
    fn dfam_shapes_and_configs_differ() {
        let (t, s) = (field([1, 4, 16, 16], 0.0), field([1, 4, 16, 16], 1.0));
        let (gs, lt) = (field([1, 1, 2, 2], 2.0).map(|v| 0.5 + 0.3 * v), field([1, 1, 16, 16], 3.0).map(|v| 0.5 + 0.3 * v));
        let mut outs = Vec::new();
        for k in [[3, 5, 7], [1, 3, 5], [3, 9, 15]] {
            let d = Dfam::new(4, DfamConfig::new(k).unwrap()).unwrap();
            let store = dfam_store(&d, 9);
            let (y, _) = d.forward(&store.view("m"), &t, &s, &gs, &lt).unwrap();
            assert_eq!(y.dims(), [1, 4, 16, 16]);
            outs.push(y);
        }
        assert_ne!(outs[0], outs[1]);
        assert_ne!(outs[0], outs[2]);
    }

    #[test]
    fn dfam_is_translation_equivariant_on_interior() {
        let d = Dfam::new(2, DfamConfig::default()).unwrap();
        let store = dfam_store(&d, 4);
        let base = |dy: usize, dx: usize, seed: f64| {
            Tensor::from_fn(Shape::new([1, 2, 48, 48]).unwrap(), move |_, c, y, x| {
                (((c * 13 + (y + dy) * 5 + (x + dx) * 11) % 17) as f64 * 0.31 + seed).sin()
            })
        };
        let prior = Tensor::full(Shape::new([1, 1, 6, 6]).unwrap(), 0.7);
        let p = store.view("m");
        let (a, _) = d.forward(&p, &base(0, 0, 0.0), &base(0, 0, 1.0), &prior, &prior).unwrap();
        let (b, _) = d.forward(&p, &base(2, 3, 0.0), &base(2, 3, 1.0), &prior, &prior).unwrap();
        for c in 0..2 {
            for y in 12..34 {
                for x in 12..34 {
                    assert!((b.at(0, c, y, x) - a.at(0, c, y + 2, x + 3)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn decode_zero_pyramid_gives_half_at_input_extent() {
        let dec = Decoder::new(4, DfamConfig::default()).unwrap();
        let store: ParamStore<f64> = dec.layout("dec").unwrap().zero_init().cast();
        let f: Vec<Tensor<f64>> = (0..LEVELS).map(|i| Tensor::zeros(Shape::new([1, 4, 128 >> i, 128 >> i]).unwrap())).collect();
        let (s, _) = decode(&store.view("dec"), &f, (256, 256)).unwrap();
        assert_eq!(s.dims(), [1, 1, 256, 256]);
        assert!(s.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn decoder_output_is_a_probability_map() {
        let dec = Decoder::new(4, DfamConfig::default()).unwrap();
        let store: ParamStore<f64> = dec.layout("dec").unwrap().init(2).cast();
        let t: Vec<Tensor<f64>> = (0..LEVELS).map(|i| field([1, 4, 32 >> i, 32 >> i], i as f64)).collect();
        let s: Vec<Tensor<f64>> = t.iter().map(|x| x.scale(-0.5)).collect();
        let prior = Tensor::full(Shape::new([1, 1, 2, 2]).unwrap(), 0.3);
        let (out, _) = dec.forward(&store.view("dec"), &t, &s, &prior, &prior, (64, 64)).unwrap();
        assert_eq!(out.dims(), [1, 1, 64, 64]);
        assert!(out.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(dec.forward(&store.view("dec"), &t[..4], &s, &prior, &prior, (64, 64)).is_err());
    }

    #[test]
    fn decoder_cost_matches_layout_and_tally() {
        let dec = Decoder::new(32, DfamConfig::default()).unwrap();
        let layout = dec.layout("dec").unwrap();
        let cost = dec.cost(256);
        assert_eq!(cost.params, layout.learnable_count());
        assert_eq!(cost.params, 5 * 6272 + 33);
        let store: ParamStore<f32> = layout.init(0);
        let t: Vec<Tensor<f32>> = (0..LEVELS).map(|i| field([1, 32, 128 >> i, 128 >> i], 0.0).cast()).collect();
        let prior = Tensor::full(Shape::new([1, 1, 8, 8]).unwrap(), 0.5f32);
        let (_, macs) = crate::ops::tally_macs(|| {
            dec.forward(&store.view("dec"), &t, &t, &prior, &prior, (256, 256)).unwrap()
        });
        assert_eq!(macs, cost.macs);
    }
}
