//! Texture and semantic feature pyramids with their refinement branches.
//!
//! With `F` the unified five-level pyramid (level 1 finest):
//!
//! ```text
//! T5 = F5,  Ti = conv1(cat(Fi, up(T(i+1))))      i = 4..1
//! S1 = T1,  Si = conv1(cat(Ti, down(S(i-1))))    i = 2..5
//! ```
//!
//! Local texture refinement sums three dilated 3x3 convolutions over `T1` and
//! gates the result with patch attention; global semantic refinement runs
//! three non-local blocks over `S5`. Each refined map feeds a one-channel
//! sigmoid head, giving the priors `P_LT` (level 1) and `P_GS` (level 5) and,
//! resized to the input, the auxiliary predictions `T_p` and `S_p`.

use crate::error::{Error, Result};
use crate::layers::{conv, conv_backward, conv_cost, fc, fc_backward, fc_layer_cost, Head, HeadCache};
use crate::ops::cost::record_macs;
use crate::ops::pool::{patch_avg_pool, patch_avg_pool_backward, patch_expand, patch_sum};
use crate::ops::{relu6, relu6_backward, resize_bilinear, resize_bilinear_backward, sigmoid, sigmoid_backward};
use crate::ops::{ConvSpec, OpCost, ResizeTarget};
use crate::params::{Grads, Layout, ParamView};
use crate::tensor::{add, concat, hadamard, hadamard_backward, split, Axis, Scalar, Shape, Tensor};

pub const LEVELS: usize = 5;
/// Patch attention tiles the level-1 map into a `PATCH_GRID x PATCH_GRID` grid.
pub const PATCH_GRID: usize = 4;

fn pointwise() -> ConvSpec {
    ConvSpec::pointwise().with_bias()
}

fn resize_to<T: Scalar>(x: &Tensor<T>, like: Shape) -> Result<Tensor<T>> {
    resize_bilinear(x, ResizeTarget::Extent(like.h(), like.w()))
}

fn sub_level<'a, T: Scalar>(p: &ParamView<'a, T>, stage: &str, level: usize) -> ParamView<'a, T> {
    p.sub(&format!("{stage}.l{}", level + 1))
}

struct FuseCache<T> {
    cat: Tensor<T>,
    moved_shape: Shape,
}

/// `conv1(cat(keep, resize(moved -> keep)))` for one pyramid step.
fn fuse_step<T: Scalar>(p: &ParamView<'_, T>, keep: &Tensor<T>, moved: &Tensor<T>) -> Result<(Tensor<T>, FuseCache<T>)> {
    if keep.shape().c() != moved.shape().c() {
        return Err(Error::DimMismatch {
            op: "pyramid fusion",
            dim: "channels",
            expected: keep.shape().c(),
            got: moved.shape().c(),
        });
    }
    let resized = resize_to(moved, keep.shape())?;
    let cat = concat(&[keep, &resized], Axis::Channel)?;
    let out = conv(p, &cat, &pointwise())?;
    Ok((
        out,
        FuseCache {
            cat,
            moved_shape: moved.shape(),
        },
    ))
}

/// Returns the gradients for `keep` and `moved`.
fn fuse_step_backward<T: Scalar>(
    p: &ParamView<'_, T>,
    c: &FuseCache<T>,
    grad: &Tensor<T>,
    grads: &mut Grads<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g_cat = conv_backward(p, &c.cat, &pointwise(), grad, grads)?;
    let ch = c.cat.shape().c() / 2;
    let mut parts = split(&g_cat, Axis::Channel, &[ch, ch])?.into_iter();
    let g_keep = parts.next().unwrap();
    let g_moved = resize_bilinear_backward(c.moved_shape, &parts.next().unwrap())?;
    Ok((g_keep, g_moved))
}

fn check_pyramid<T: Scalar>(op: &'static str, levels: &[Tensor<T>], ef: usize) -> Result<()> {
    if levels.len() != LEVELS {
        return Err(Error::DimMismatch {
            op,
            dim: "pyramid levels",
            expected: LEVELS,
            got: levels.len(),
        });
    }
    for l in levels {
        if l.shape().c() != ef {
            return Err(Error::DimMismatch {
                op,
                dim: "channels",
                expected: ef,
                got: l.shape().c(),
            });
        }
    }
    Ok(())
}

pub struct PyramidCache<T> {
    steps: Vec<FuseCache<T>>,
}

/// Top-down texture pyramid.
pub fn tfp<T: Scalar>(p: &ParamView<'_, T>, f: &[Tensor<T>]) -> Result<(Vec<Tensor<T>>, PyramidCache<T>)> {
    let ef = f.first().map_or(0, |t| t.shape().c());
    check_pyramid("tfp", f, ef)?;
    let mut t: Vec<Tensor<T>> = f.to_vec();
    let mut steps = Vec::with_capacity(LEVELS - 1);
    for i in (0..LEVELS - 1).rev() {
        let (ti, c) = fuse_step(&sub_level(p, "tfp", i), &f[i], &t[i + 1])?;
        t[i] = ti;
        steps.push(c);
    }
    steps.reverse();
    Ok((t, PyramidCache { steps }))
}

pub fn tfp_backward<T: Scalar>(
    p: &ParamView<'_, T>,
    cache: &PyramidCache<T>,
    g_t: &[Tensor<T>],
    grads: &mut Grads<T>,
) -> Result<Vec<Tensor<T>>> {
    let mut g_t = g_t.to_vec();
    let mut g_f = g_t.clone();
    for i in 0..LEVELS - 1 {
        let (g_keep, g_moved) = fuse_step_backward(&sub_level(p, "tfp", i), &cache.steps[i], &g_t[i], grads)?;
        g_f[i] = g_keep;
        g_t[i + 1] = add(&g_t[i + 1], &g_moved)?;
    }
    g_f[LEVELS - 1] = g_t[LEVELS - 1].clone();
    Ok(g_f)
}

/// Bottom-up semantic pyramid.
pub fn sfp<T: Scalar>(p: &ParamView<'_, T>, t: &[Tensor<T>]) -> Result<(Vec<Tensor<T>>, PyramidCache<T>)> {
    let ef = t.first().map_or(0, |x| x.shape().c());
    check_pyramid("sfp", t, ef)?;
    let mut s: Vec<Tensor<T>> = t.to_vec();
    let mut steps = Vec::with_capacity(LEVELS - 1);
    for i in 1..LEVELS {
        let (si, c) = fuse_step(&sub_level(p, "sfp", i), &t[i], &s[i - 1])?;
        s[i] = si;
        steps.push(c);
    }
    Ok((s, PyramidCache { steps }))
}

pub fn sfp_backward<T: Scalar>(
    p: &ParamView<'_, T>,
    cache: &PyramidCache<T>,
    g_s: &[Tensor<T>],
    grads: &mut Grads<T>,
) -> Result<Vec<Tensor<T>>> {
    let mut g_s = g_s.to_vec();
    let mut g_t = g_s.clone();
    for i in (1..LEVELS).rev() {
        let (g_keep, g_moved) = fuse_step_backward(&sub_level(p, "sfp", i), &cache.steps[i - 1], &g_s[i], grads)?;
        g_t[i] = g_keep;
        g_s[i - 1] = add(&g_s[i - 1], &g_moved)?;
    }
    g_t[0] = g_s[0].clone();
    Ok(g_t)
}

/// Patch squeeze-excitation: per-cell mean, `fc -> relu6 -> fc -> sigmoid`,
/// each cell rescaled by its gate.
pub struct PatchAttention {
    pub channels: usize,
}

pub struct PatchCache<T> {
    input: Tensor<T>,
    cells: Tensor<T>,
    hidden: Tensor<T>,
    act: Tensor<T>,
    gate: Tensor<T>,
    expanded: Tensor<T>,
}

impl<T> PatchCache<T> {
    /// `(N, C, grid, grid)` sigmoid gates.
    pub fn gate(&self) -> &Tensor<T> {
        &self.gate
    }
}

impl PatchAttention {
    fn hidden(&self) -> usize {
        (self.channels / 4).max(1)
    }

    pub fn layout(&self, l: &mut Layout, prefix: &str) {
        l.fc(&format!("{prefix}.fc1"), self.channels, self.hidden());
        l.fc(&format!("{prefix}.fc2"), self.hidden(), self.channels);
    }

    pub fn cost(&self) -> OpCost {
        let cells = PATCH_GRID * PATCH_GRID;
        fc_layer_cost(self.channels, self.hidden(), cells) + fc_layer_cost(self.hidden(), self.channels, cells)
    }

    pub fn forward<T: Scalar>(&self, p: &ParamView<'_, T>, x: &Tensor<T>) -> Result<(Tensor<T>, PatchCache<T>)> {
        let cells = patch_avg_pool(x, PATCH_GRID, PATCH_GRID)?;
        let hidden = fc(&p.sub("fc1"), &cells)?;
        let act = relu6(&hidden);
        let gate = sigmoid(&fc(&p.sub("fc2"), &act)?);
        let expanded = patch_expand(&gate, x.shape().h(), x.shape().w())?;
        let out = hadamard(x, &expanded, None)?;
        Ok((
            out,
            PatchCache {
                input: x.clone(),
                cells,
                hidden,
                act,
                gate,
                expanded,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamView<'_, T>,
        c: &PatchCache<T>,
        grad: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let mut g = hadamard_backward(&c.input, &c.expanded, None, grad)?.into_iter();
        let (g_x, g_exp) = (g.next().unwrap(), g.next().unwrap());
        let g_gate = patch_sum(&g_exp, PATCH_GRID, PATCH_GRID)?;
        let g_z = sigmoid_backward(&c.gate, &g_gate)?;
        let g_act = fc_backward(&p.sub("fc2"), &c.act, &g_z, grads)?;
        let g_hidden = relu6_backward(&c.hidden, &g_act)?;
        let g_cells = fc_backward(&p.sub("fc1"), &c.cells, &g_hidden, grads)?;
        add(&g_x, &patch_avg_pool_backward(c.input.shape(), &g_cells)?)
    }
}

/// Per-item matrix views over `(N, C, H, W)` as `C x P`.
fn matrix_rows<T: Scalar>(t: &Tensor<T>, n: usize) -> &[T] {
    let s = t.shape();
    &t.data()[n * s.c() * s.plane()..(n + 1) * s.c() * s.plane()]
}

/// Row-wise softmax of a `rows x cols` matrix, max-subtracted.
pub fn softmax_rows<T: Scalar>(m: &mut [T], cols: usize) {
    for row in m.chunks_mut(cols) {
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum = sum + *v;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Embedded-Gaussian non-local block with a residual connection:
/// `z = x + W_z(softmax(theta^T phi) g)`.
pub struct NonLocal {
    pub channels: usize,
}

pub struct NonLocalCache<T> {
    input: Tensor<T>,
    theta: Tensor<T>,
    phi: Tensor<T>,
    g: Tensor<T>,
    /// Per batch item, `P x P` row-stochastic attention.
    attn: Vec<Vec<T>>,
    y: Tensor<T>,
}

impl NonLocal {
    pub fn inner(&self) -> usize {
        (self.channels / 2).max(1)
    }

    pub fn layout(&self, l: &mut Layout, prefix: &str) {
        for name in ["theta", "phi", "g"] {
            l.conv(&format!("{prefix}.{name}"), &pointwise(), self.channels, self.inner());
        }
        l.conv(&format!("{prefix}.out"), &pointwise(), self.inner(), self.channels);
    }

    pub fn cost(&self, hw: (usize, usize)) -> OpCost {
        let (c, m, pos) = (self.channels, self.inner(), hw.0 * hw.1);
        let proj = conv_cost(&pointwise(), c, m, hw);
        proj + proj + proj + conv_cost(&pointwise(), m, c, hw) + OpCost::new(0, 2 * (m * pos * pos) as u64)
    }

    pub fn forward<T: Scalar>(&self, p: &ParamView<'_, T>, x: &Tensor<T>) -> Result<(Tensor<T>, NonLocalCache<T>)> {
        if x.shape().c() != self.channels {
            return Err(Error::DimMismatch {
                op: "non_local",
                dim: "channels",
                expected: self.channels,
                got: x.shape().c(),
            });
        }
        let theta = conv(&p.sub("theta"), x, &pointwise())?;
        let phi = conv(&p.sub("phi"), x, &pointwise())?;
        let g = conv(&p.sub("g"), x, &pointwise())?;
        let [n, _, h, w] = x.dims();
        let (m, pos) = (self.inner(), h * w);
        record_macs(2 * (n * m * pos * pos) as u64);
        let mut attn = Vec::with_capacity(n);
        let mut y = Vec::with_capacity(n * m * pos);
        for ni in 0..n {
            let (th, ph, gv) = (matrix_rows(&theta, ni), matrix_rows(&phi, ni), matrix_rows(&g, ni));
            let mut a = vec![T::zero(); pos * pos];
            for c in 0..m {
                for i in 0..pos {
                    let t = th[c * pos + i];
                    let row = &mut a[i * pos..(i + 1) * pos];
                    for (r, &f) in row.iter_mut().zip(&ph[c * pos..(c + 1) * pos]) {
                        *r = *r + t * f;
                    }
                }
            }
            softmax_rows(&mut a, pos);
            for c in 0..m {
                let gr = &gv[c * pos..(c + 1) * pos];
                for i in 0..pos {
                    let row = &a[i * pos..(i + 1) * pos];
                    y.push(row.iter().zip(gr).fold(T::zero(), |acc, (&w, &v)| acc + w * v));
                }
            }
            attn.push(a);
        }
        let y = Tensor::from_parts(Shape::derived([n, m, h, w]), y);
        let out = add(x, &conv(&p.sub("out"), &y, &pointwise())?)?;
        Ok((
            out,
            NonLocalCache {
                input: x.clone(),
                theta,
                phi,
                g,
                attn,
                y,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamView<'_, T>,
        c: &NonLocalCache<T>,
        grad: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let g_y = conv_backward(&p.sub("out"), &c.y, &pointwise(), grad, grads)?;
        let [n, _, h, w] = c.input.dims();
        let (m, pos) = (self.inner(), h * w);
        let mut g_theta = Vec::with_capacity(n * m * pos);
        let mut g_phi = Vec::with_capacity(n * m * pos);
        let mut g_g = Vec::with_capacity(n * m * pos);
        for ni in 0..n {
            let a = &c.attn[ni];
            let (th, ph, gv) = (matrix_rows(&c.theta, ni), matrix_rows(&c.phi, ni), matrix_rows(&c.g, ni));
            let gy = matrix_rows(&g_y, ni);
            // dA[i,j] = sum_c gy[c,i] g[c,j];  dg[c,j] = sum_i A[i,j] gy[c,i]
            let mut g_a = vec![T::zero(); pos * pos];
            let mut gg = vec![T::zero(); m * pos];
            for ch in 0..m {
                for i in 0..pos {
                    let gyi = gy[ch * pos + i];
                    for j in 0..pos {
                        g_a[i * pos + j] = g_a[i * pos + j] + gyi * gv[ch * pos + j];
                        gg[ch * pos + j] = gg[ch * pos + j] + a[i * pos + j] * gyi;
                    }
                }
            }
            // Softmax adjoint on each row.
            for i in 0..pos {
                let row_a = &a[i * pos..(i + 1) * pos];
                let row_g = &mut g_a[i * pos..(i + 1) * pos];
                let dot = row_a.iter().zip(row_g.iter()).fold(T::zero(), |s, (&x, &y)| s + x * y);
                for (gr, &ar) in row_g.iter_mut().zip(row_a) {
                    *gr = ar * (*gr - dot);
                }
            }
            let mut gt = vec![T::zero(); m * pos];
            let mut gp = vec![T::zero(); m * pos];
            for ch in 0..m {
                for i in 0..pos {
                    for j in 0..pos {
                        let s = g_a[i * pos + j];
                        gt[ch * pos + i] = gt[ch * pos + i] + s * ph[ch * pos + j];
                        gp[ch * pos + j] = gp[ch * pos + j] + s * th[ch * pos + i];
                    }
                }
            }
            g_theta.extend(gt);
            g_phi.extend(gp);
            g_g.extend(gg);
        }
        let shape = Shape::derived([n, m, h, w]);
        let mut g_x = grad.clone();
        for (name, data) in [("theta", g_theta), ("phi", g_phi), ("g", g_g)] {
            let gi = conv_backward(&p.sub(name), &c.input, &pointwise(), &Tensor::from_parts(shape, data), grads)?;
            g_x = add(&g_x, &gi)?;
        }
        Ok(g_x)
    }
}

/// DIRM configuration: unified width and the LTR dilation rates.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Dirm {
    pub ef: usize,
    pub dilations: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct DirmOutputs<T> {
    pub t: Vec<Tensor<T>>,
    pub s: Vec<Tensor<T>>,
    pub ltr_feature: Tensor<T>,
    pub gsr_feature: Tensor<T>,
    pub p_lt: Tensor<T>,
    pub p_gs: Tensor<T>,
    pub t_p: Tensor<T>,
    pub s_p: Tensor<T>,
}

/// Cotangents for every output of [`Dirm::forward`] except the refined
/// features, which feed only the heads.
pub struct DirmCotangents<T> {
    pub t: Vec<Tensor<T>>,
    pub s: Vec<Tensor<T>>,
    pub p_lt: Tensor<T>,
    pub p_gs: Tensor<T>,
    pub t_p: Tensor<T>,
    pub s_p: Tensor<T>,
}

impl<T> DirmCache<T> {
    pub fn patch_gate(&self) -> &Tensor<T> {
        self.pam.gate()
    }
}

pub struct DirmCache<T> {
    tfp: PyramidCache<T>,
    sfp: PyramidCache<T>,
    t1: Tensor<T>,
    pam: PatchCache<T>,
    ltr_head: HeadCache<T>,
    nl: Vec<NonLocalCache<T>>,
    gsr_head: HeadCache<T>,
}

pub const GSR_BLOCKS: usize = 3;

impl Dirm {
    pub fn new(ef: usize) -> Self {
        Dirm { ef, dilations: [1, 2, 3] }
    }

    fn dilated_spec(d: usize) -> ConvSpec {
        ConvSpec::new(3).dilation(d).same().with_bias()
    }

    fn pam(&self) -> PatchAttention {
        PatchAttention { channels: self.ef }
    }

    fn non_local(&self) -> NonLocal {
        NonLocal { channels: self.ef }
    }

    pub fn layout(&self, prefix: &str) -> Layout {
        let mut l = Layout::new();
        let ef = self.ef;
        for i in 0..LEVELS - 1 {
            l.conv(&format!("{prefix}.tfp.l{}", i + 1), &pointwise(), 2 * ef, ef);
        }
        for i in 1..LEVELS {
            l.conv(&format!("{prefix}.sfp.l{}", i + 1), &pointwise(), 2 * ef, ef);
        }
        for d in self.dilations {
            l.conv(&format!("{prefix}.ltr.d{d}"), &Self::dilated_spec(d), ef, ef);
        }
        self.pam().layout(&mut l, &format!("{prefix}.ltr.pam"));
        Head::layout(&mut l, &format!("{prefix}.ltr.head"), ef);
        for b in 0..GSR_BLOCKS {
            self.non_local().layout(&mut l, &format!("{prefix}.gsr.nl{}", b + 1));
        }
        Head::layout(&mut l, &format!("{prefix}.gsr.head"), ef);
        l
    }

    pub fn cost(&self, input_size: usize) -> OpCost {
        let ef = self.ef;
        let hw = |i: usize| (input_size >> (i + 1), input_size >> (i + 1));
        let mut total = OpCost::ZERO;
        for i in 0..LEVELS - 1 {
            total += conv_cost(&pointwise(), 2 * ef, ef, hw(i));
        }
        for i in 1..LEVELS {
            total += conv_cost(&pointwise(), 2 * ef, ef, hw(i));
        }
        for d in self.dilations {
            total += conv_cost(&Self::dilated_spec(d), ef, ef, hw(0));
        }
        total += self.pam().cost() + Head::cost(ef, hw(0));
        for _ in 0..GSR_BLOCKS {
            total += self.non_local().cost(hw(LEVELS - 1));
        }
        total + Head::cost(ef, hw(LEVELS - 1))
    }

    /// Sum of the three dilated convolutions.
    pub fn ltr_dilated_sum<T: Scalar>(&self, p: &ParamView<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut acc: Option<Tensor<T>> = None;
        for d in self.dilations {
            let y = conv(&p.sub(&format!("ltr.d{d}")), x, &Self::dilated_spec(d))?;
            acc = Some(match acc {
                Some(a) => add(&a, &y)?,
                None => y,
            });
        }
        acc.ok_or_else(|| Error::InvalidArgument("no dilation rates".into()))
    }

    pub fn forward<T: Scalar>(
        &self,
        p: &ParamView<'_, T>,
        f: &[Tensor<T>],
        input_hw: (usize, usize),
    ) -> Result<(DirmOutputs<T>, DirmCache<T>)> {
        check_pyramid("dirm", f, self.ef)?;
        let (t, tfp_cache) = tfp(p, f)?;
        let (s, sfp_cache) = sfp(p, &t)?;

        let t1 = t[0].clone();
        let summed = self.ltr_dilated_sum(p, &t1)?;
        let (ltr_feature, pam) = self.pam().forward(&p.sub("ltr.pam"), &summed)?;
        let (p_lt, t_p, ltr_head) = Head::forward(&p.sub("ltr.head"), &ltr_feature, input_hw)?;

        let mut cur = s[LEVELS - 1].clone();
        let mut nl = Vec::with_capacity(GSR_BLOCKS);
        for b in 0..GSR_BLOCKS {
            let (y, c) = self.non_local().forward(&p.sub(&format!("gsr.nl{}", b + 1)), &cur)?;
            nl.push(c);
            cur = y;
        }
        let (p_gs, s_p, gsr_head) = Head::forward(&p.sub("gsr.head"), &cur, input_hw)?;
        Ok((
            DirmOutputs {
                t,
                s,
                ltr_feature,
                gsr_feature: cur,
                p_lt,
                p_gs,
                t_p,
                s_p,
            },
            DirmCache {
                tfp: tfp_cache,
                sfp: sfp_cache,
                t1,
                pam,
                ltr_head,
                nl,
                gsr_head,
            },
        ))
    }

    /// Gradient with respect to the unified input pyramid.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamView<'_, T>,
        cache: &DirmCache<T>,
        cot: &DirmCotangents<T>,
        grads: &mut Grads<T>,
    ) -> Result<Vec<Tensor<T>>> {
        let mut g_s = cot.s.clone();
        let mut g = Head::backward(&p.sub("gsr.head"), &cache.gsr_head, &cot.p_gs, &cot.s_p, grads)?;
        for b in (0..GSR_BLOCKS).rev() {
            g = self.non_local().backward(&p.sub(&format!("gsr.nl{}", b + 1)), &cache.nl[b], &g, grads)?;
        }
        g_s[LEVELS - 1] = add(&g_s[LEVELS - 1], &g)?;

        let mut g_t = sfp_backward(p, &cache.sfp, &g_s, grads)?;
        for (gt, ct) in g_t.iter_mut().zip(&cot.t) {
            *gt = add(gt, ct)?;
        }

        let g_feat = Head::backward(&p.sub("ltr.head"), &cache.ltr_head, &cot.p_lt, &cot.t_p, grads)?;
        let g_sum = self.pam().backward(&p.sub("ltr.pam"), &cache.pam, &g_feat, grads)?;
        let t1 = &cache.t1;
        let mut g_t1 = g_t[0].clone();
        for d in self.dilations {
            let gi = conv_backward(&p.sub(&format!("ltr.d{d}")), t1, &Self::dilated_spec(d), &g_sum, grads)?;
            g_t1 = add(&g_t1, &gi)?;
        }
        g_t[0] = g_t1;
        tfp_backward(p, &cache.tfp, &g_t, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    fn pyramid(ef: usize, size: usize, seed: f64) -> Vec<Tensor<f64>> {
        (0..LEVELS)
            .map(|i| {
                let s = size >> (i + 1);
                Tensor::from_fn(Shape::new([1, ef, s, s]).unwrap(), |_, c, y, x| {
                    ((c * 31 + y * 7 + x) as f64 * 0.173 + seed).sin()
                })
            })
            .collect()
    }

    /// 1x1 kernel copying the first half of a `2C` input.
    fn select_first(store: &mut ParamStore<f64>, name: &str, c: usize) {
        let w = Tensor::from_fn(Shape::new([c, 2 * c, 1, 1]).unwrap(), |o, i, _, _| if i == o { 1.0 } else { 0.0 });
        store.insert(format!("{name}.weight"), w);
        store.insert(format!("{name}.bias"), Tensor::zeros(Shape::new([c, 1, 1, 1]).unwrap()));
    }

    #[test]
    fn branch_selecting_kernels_make_both_pyramids_identities() {
        let dirm = Dirm::new(4);
        let mut store: ParamStore<f64> = dirm.layout("m").init(3).cast();
        for i in 1..=4 {
            select_first(&mut store, &format!("m.tfp.l{i}"), 4);
            select_first(&mut store, &format!("m.sfp.l{}", i + 1), 4);
        }
        let f = pyramid(4, 64, 0.0);
        let p = store.view("m");
        let (t, _) = tfp(&p, &f).unwrap();
        assert_eq!(t, f);
        let (s, _) = sfp(&p, &t).unwrap();
        assert_eq!(s, f);
    }

    #[test]
    fn zero_pyramid_stays_zero_and_shapes_hold() {
        let dirm = Dirm::new(8);
        let store: ParamStore<f64> = dirm.layout("m").init(5).cast();
        let f: Vec<Tensor<f64>> = pyramid(8, 64, 0.0).iter().map(|t| t.scale(0.0)).collect();
        let (out, _) = dirm.forward(&store.view("m"), &f, (64, 64)).unwrap();
        for i in 0..LEVELS {
            let s = 64 >> (i + 1);
            assert_eq!(out.t[i].dims(), [1, 8, s, s]);
            assert_eq!(out.s[i].dims(), [1, 8, s, s]);
            assert!(out.t[i].data().iter().chain(out.s[i].data()).all(|&v| v == 0.0));
        }
        assert_eq!(out.p_lt.dims(), [1, 1, 32, 32]);
        assert_eq!(out.p_gs.dims(), [1, 1, 2, 2]);
        assert_eq!(out.t_p.dims(), [1, 1, 64, 64]);
        assert_eq!(out.s_p.dims(), [1, 1, 64, 64]);
    }

    #[test]
    fn zero_parameters_give_half_priors_and_gates() {
        let dirm = Dirm::new(8);
        let store: ParamStore<f64> = dirm.layout("m").zero_init().cast();
        let (out, cache) = dirm.forward(&store.view("m"), &pyramid(8, 64, 1.0), (64, 64)).unwrap();
        for m in [&out.p_lt, &out.p_gs, &out.t_p, &out.s_p, cache.patch_gate()] {
            assert!(m.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn dilated_branches_have_seven_by_seven_support() {
        let dirm = Dirm::new(2);
        let store: ParamStore<f64> = dirm.layout("m").init(11).cast();
        let x = Tensor::from_fn(Shape::new([1, 2, 15, 15]).unwrap(), |_, c, y, x| {
            if c == 0 && y == 7 && x == 7 {
                1.0
            } else {
                0.0
            }
        });
        let y = dirm.ltr_dilated_sum(&store.view("m"), &x).unwrap();
        let [_, c, h, w] = y.dims();
        let (mut lo, mut hi) = (usize::MAX, 0);
        for ci in 0..c {
            for yy in 0..h {
                for xx in 0..w {
                    if y.at(0, ci, yy, xx) != 0.0 {
                        lo = lo.min(yy.min(xx));
                        hi = hi.max(yy.max(xx));
                    }
                }
            }
        }
        assert_eq!((lo, hi), (4, 10));
    }

    #[test]
    fn non_local_identities() {
        let nl = NonLocal { channels: 4 };
        let mut l = Layout::new();
        nl.layout(&mut l, "nl");
        let mut store: ParamStore<f64> = l.init(2).cast();
        let x = Tensor::from_fn(Shape::new([1, 4, 3, 3]).unwrap(), |_, c, y, x| ((c + 2 * y + 3 * x) as f64).cos());
        let (_, cache) = nl.forward(&store.view("nl"), &x).unwrap();
        for row in cache.attn[0].chunks(9) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        let constant = Tensor::from_fn(Shape::new([1, 4, 3, 3]).unwrap(), |_, c, _, _| c as f64 - 1.5);
        let (y, _) = nl.forward(&store.view("nl"), &constant).unwrap();
        for c in 0..4 {
            let p = y.plane(0, c);
            assert!(p.iter().all(|&v| (v - p[0]).abs() < 1e-12));
        }

        store.insert("nl.out.weight", Tensor::zeros(Shape::new([4, 2, 1, 1]).unwrap()));
        let (y, _) = nl.forward(&store.view("nl"), &x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn cost_matches_layout() {
        let dirm = Dirm::new(32);
        let cost = dirm.cost(256);
        assert_eq!(cost.params, dirm.layout("m").learnable_count());
        assert_eq!(cost.params, 51_386);
        let store: ParamStore<f32> = dirm.layout("m").init(0);
        let f: Vec<Tensor<f32>> = pyramid(32, 256, 0.0).iter().map(|t| t.cast()).collect();
        let (_, macs) = crate::ops::tally_macs(|| dirm.forward(&store.view("m"), &f, (256, 256)).unwrap());
        assert_eq!(macs, cost.macs);
    }
}
