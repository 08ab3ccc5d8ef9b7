//! Decoupled attention fusion of one RGB and one depth feature level.
//!
//! Per modality:
//!
//! ```text
//! r_h = mean_H(f)                 (N,C,1,W)
//! r_v = mean_W(f), as (N,C,1,H)
//! a   = relu6(fc2(fc1(bn(cat_W(r_h, r_v)))))
//! a_h, a_v = sigmoid(split_W(a)), a_v back to (N,C,H,1)
//! V   = f * a_h * a_v
//! M   = sigmoid(conv_k(max_C(V)))  (N,1,H,W)
//! ```
//!
//! and the fused output is `max(f_r * M_d, f_d * M_r)` elementwise, keeping
//! all `C` channels. Parameters live under `<prefix>.{rgb,depth}.{bn,fc1,fc2,heatmap}`.

use crate::error::{Error, Result};
use crate::layers::{conv, conv_backward, fc, fc_backward, fc_layer_cost, vector};
use crate::ops::norm::{batch_norm_backward, batch_norm_inference};
use crate::ops::pool::{channel_max_pool_backward, directional_avg_pool_backward};
use crate::ops::{
    channel_max_pool, directional_avg_pool, relu6, relu6_backward, sigmoid, sigmoid_backward, ConvSpec, OpCost,
    PoolAxis,
};
use crate::params::{Grads, Layout, ParamView};
use crate::tensor::{
    add, concat, elementwise_max, elementwise_max_backward, hadamard, hadamard_backward, split, Axis, Scalar, Tensor,
};

pub const MODALITIES: [&str; 2] = ["rgb", "depth"];

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct DamConfig {
    /// Side of the square heatmap kernel (3 or 7).
    pub heatmap_kernel: usize,
    /// FC bottleneck ratio: `C -> C / r -> C`.
    pub reduction: usize,
}

impl Default for DamConfig {
    fn default() -> Self {
        DamConfig {
            heatmap_kernel: 7,
            reduction: 1,
        }
    }
}

impl DamConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.heatmap_kernel, 3 | 7) {
            return Err(Error::InvalidArgument(format!(
                "heatmap kernel must be 3 or 7, got {}",
                self.heatmap_kernel
            )));
        }
        if self.reduction == 0 {
            return Err(Error::InvalidArgument("reduction ratio must be positive".into()));
        }
        Ok(())
    }

    fn heatmap_spec(&self) -> ConvSpec {
        ConvSpec::new(self.heatmap_kernel).same().with_bias()
    }
}

/// Dual-view attention vectors: horizontal `(N,C,1,W)`, vertical `(N,C,H,1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionVectors<T> {
    pub horizontal: Tensor<T>,
    pub vertical: Tensor<T>,
}

pub fn decouple<T: Scalar>(f: &Tensor<T>) -> AttentionVectors<T> {
    AttentionVectors {
        horizontal: directional_avg_pool(f, PoolAxis::Height),
        vertical: directional_avg_pool(f, PoolAxis::Width),
    }
}

/// `V = f * a_h * a_v` with broadcasting.
pub fn refine<T: Scalar>(f: &Tensor<T>, att: &AttentionVectors<T>) -> Result<Tensor<T>> {
    hadamard(f, &att.horizontal, Some(&att.vertical))
}

/// `f_f = max(f_r * W_d, f_d * W_r)` with heatmaps broadcast over channels.
pub fn cross_fuse<T: Scalar>(f_r: &Tensor<T>, f_d: &Tensor<T>, w_r: &Tensor<T>, w_d: &Tensor<T>) -> Result<Tensor<T>> {
    if f_r.shape() != f_d.shape() {
        return Err(Error::Incompatible {
            op: "cross_fuse",
            lhs: f_r.shape(),
            rhs: f_d.shape(),
        });
    }
    elementwise_max(&hadamard(f_r, w_d, None)?, &hadamard(f_d, w_r, None)?)
}

struct AttentionCache<T> {
    cat: Tensor<T>,
    h1: Tensor<T>,
    h2: Tensor<T>,
    act: Tensor<T>,
    normed: Tensor<T>,
}

fn attention_forward<T: Scalar>(
    p: &ParamView<'_, T>,
    vecs: &AttentionVectors<T>,
) -> Result<(AttentionVectors<T>, AttentionCache<T>)> {
    let [n, c, _, w] = vecs.horizontal.dims();
    let [vn, vc, h, vw] = vecs.vertical.dims();
    if (vn, vc, vw) != (n, c, 1) || vecs.horizontal.shape().h() != 1 {
        return Err(Error::Incompatible {
            op: "dual_view_attention",
            lhs: vecs.horizontal.shape(),
            rhs: vecs.vertical.shape(),
        });
    }
    let rv = vecs.vertical.reshape([n, c, 1, h])?;
    let cat = concat(&[&vecs.horizontal, &rv], Axis::Width)?;
    let normed = batch_norm_inference(&cat, &p.sub("bn").bn()?)?;
    let h1 = fc(&p.sub("fc1"), &normed)?;
    let h2 = fc(&p.sub("fc2"), &h1)?;
    if h2.shape().c() != c {
        return Err(Error::DimMismatch {
            op: "dual_view_attention",
            dim: "fc2 output features",
            expected: c,
            got: h2.shape().c(),
        });
    }
    let act = sigmoid(&relu6(&h2));
    let parts = split(&act, Axis::Width, &[w, h])?;
    let out = AttentionVectors {
        horizontal: parts[0].clone(),
        vertical: parts[1].reshape([n, c, h, 1])?,
    };
    Ok((
        out,
        AttentionCache {
            cat,
            h1,
            h2,
            act,
            normed,
        },
    ))
}

/// `sigmoid(split(relu6(fc2(fc1(bn(cat(h, v^T)))))))`.
pub fn dual_view_attention<T: Scalar>(p: &ParamView<'_, T>, vecs: &AttentionVectors<T>) -> Result<AttentionVectors<T>> {
    Ok(attention_forward(p, vecs)?.0)
}

pub fn spatial_heatmap<T: Scalar>(p: &ParamView<'_, T>, v: &Tensor<T>, config: &DamConfig) -> Result<Tensor<T>> {
    Ok(sigmoid(&conv(&p.sub("heatmap"), &channel_max_pool(v), &config.heatmap_spec())?))
}

struct BranchCache<T> {
    f: Tensor<T>,
    att: AttentionVectors<T>,
    att_cache: AttentionCache<T>,
    v: Tensor<T>,
    pooled: Tensor<T>,
    heat: Tensor<T>,
}

pub struct DamCache<T> {
    branches: [BranchCache<T>; 2],
    fused_r: Tensor<T>,
    fused_d: Tensor<T>,
}

impl<T> DamCache<T> {
    pub fn heatmaps(&self) -> (&Tensor<T>, &Tensor<T>) {
        (&self.branches[0].heat, &self.branches[1].heat)
    }

    pub fn attention(&self, modality: usize) -> &AttentionVectors<T> {
        &self.branches[modality].att
    }
}

/// One DAM instance for a level with `channels` channels.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Dam {
    pub channels: usize,
    pub config: DamConfig,
}

impl Dam {
    pub fn new(channels: usize, config: DamConfig) -> Self {
        Dam { channels, config }
    }

    fn hidden(&self) -> usize {
        (self.channels / self.config.reduction).max(1)
    }

    pub fn layout(&self, prefix: &str) -> Layout {
        let mut l = Layout::new();
        let (c, m) = (self.channels, self.hidden());
        for modality in MODALITIES {
            let p = format!("{prefix}.{modality}");
            l.bn(&format!("{p}.bn"), c);
            l.fc(&format!("{p}.fc1"), c, m);
            l.fc(&format!("{p}.fc2"), m, c);
            l.conv(&format!("{p}.heatmap"), &self.config.heatmap_spec(), 1, 1);
        }
        l
    }

    pub fn cost(&self, h: usize, w: usize) -> OpCost {
        let (c, m) = (self.channels, self.hidden());
        let branch = OpCost::params_only(2 * c as u64)
            + fc_layer_cost(c, m, w + h)
            + fc_layer_cost(m, c, w + h)
            + self.config.heatmap_spec().cost(1, 1, 1, h, w);
        branch + branch
    }

    fn branch_forward<T: Scalar>(&self, p: &ParamView<'_, T>, f: &Tensor<T>) -> Result<BranchCache<T>> {
        let (att, att_cache) = attention_forward(p, &decouple(f))?;
        let v = refine(f, &att)?;
        let pooled = channel_max_pool(&v);
        let heat = sigmoid(&conv(&p.sub("heatmap"), &pooled, &self.config.heatmap_spec())?);
        Ok(BranchCache {
            f: f.clone(),
            att,
            att_cache,
            v,
            pooled,
            heat,
        })
    }

    pub fn forward<T: Scalar>(&self, p: &ParamView<'_, T>, f_r: &Tensor<T>, f_d: &Tensor<T>) -> Result<(Tensor<T>, DamCache<T>)> {
        for f in [f_r, f_d] {
            if f.shape().c() != self.channels {
                return Err(Error::DimMismatch {
                    op: "dam",
                    dim: "channels",
                    expected: self.channels,
                    got: f.shape().c(),
                });
            }
        }
        if f_r.shape() != f_d.shape() {
            return Err(Error::Incompatible {
                op: "dam",
                lhs: f_r.shape(),
                rhs: f_d.shape(),
            });
        }
        let rgb = self.branch_forward(&p.sub(MODALITIES[0]), f_r)?;
        let depth = self.branch_forward(&p.sub(MODALITIES[1]), f_d)?;
        let fused_r = hadamard(f_r, &depth.heat, None)?;
        let fused_d = hadamard(f_d, &rgb.heat, None)?;
        let out = elementwise_max(&fused_r, &fused_d)?;
        Ok((
            out,
            DamCache {
                branches: [rgb, depth],
                fused_r,
                fused_d,
            },
        ))
    }

    /// Input gradient of one branch given its cotangents on `V`'s heatmap and
    /// on `f` from the cross product.
    fn branch_backward<T: Scalar>(
        &self,
        p: &ParamView<'_, T>,
        c: &BranchCache<T>,
        g_heat: &Tensor<T>,
        g_f_direct: Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let g_z = sigmoid_backward(&c.heat, g_heat)?;
        let g_pooled = conv_backward(&p.sub("heatmap"), &c.pooled, &self.config.heatmap_spec(), &g_z, grads)?;
        let g_v = channel_max_pool_backward(&c.v, &g_pooled)?;
        let mut gs = hadamard_backward(&c.f, &c.att.horizontal, Some(&c.att.vertical), &g_v)?.into_iter();
        let (g_f_refine, g_ah, g_av) = (gs.next().unwrap(), gs.next().unwrap(), gs.next().unwrap());

        let [n, ch, h, w] = c.f.dims();
        let g_act = concat(&[&g_ah, &g_av.reshape([n, ch, 1, h])?], Axis::Width)?;
        let ac = &c.att_cache;
        let g_relu = sigmoid_backward(&ac.act, &g_act)?;
        let g_h2 = relu6_backward(&ac.h2, &g_relu)?;
        let g_h1 = fc_backward(&p.sub("fc2"), &ac.h1, &g_h2, grads)?;
        let g_norm = fc_backward(&p.sub("fc1"), &ac.normed, &g_h1, grads)?;
        let bn_p = p.sub("bn");
        let bg = batch_norm_backward(&ac.cat, &bn_p.bn()?, &g_norm)?;
        grads.accumulate(&bn_p.name("gamma"), vector(bg.gamma))?;
        grads.accumulate(&bn_p.name("beta"), vector(bg.beta))?;
        let parts = split(&bg.input, Axis::Width, &[w, h])?;
        let g_rh = directional_avg_pool_backward(c.f.shape(), PoolAxis::Height, &parts[0])?;
        let g_rv = directional_avg_pool_backward(c.f.shape(), PoolAxis::Width, &parts[1].reshape([n, ch, h, 1])?)?;
        add(&add(&add(&g_f_direct, &g_f_refine)?, &g_rh)?, &g_rv)
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamView<'_, T>,
        cache: &DamCache<T>,
        grad: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let [rgb, depth] = &cache.branches;
        let (g_fr, g_fd) = elementwise_max_backward(&cache.fused_r, &cache.fused_d, grad)?;
        let mut r = hadamard_backward(&rgb.f, &depth.heat, None, &g_fr)?.into_iter();
        let (g_fr_direct, g_heat_d) = (r.next().unwrap(), r.next().unwrap());
        let mut d = hadamard_backward(&depth.f, &rgb.heat, None, &g_fd)?.into_iter();
        let (g_fd_direct, g_heat_r) = (d.next().unwrap(), d.next().unwrap());
        let g_r = self.branch_backward(&p.sub(MODALITIES[0]), rgb, &g_heat_r, g_fr_direct, grads)?;
        let g_d = self.branch_backward(&p.sub(MODALITIES[1]), depth, &g_heat_d, g_fd_direct, grads)?;
        Ok((g_r, g_d))
    }
}
