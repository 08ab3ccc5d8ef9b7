//! Parameterized building blocks shared by the network stages, each with a
//! layout entry, a cached forward pass and a backward pass.

use crate::error::Result;
use crate::ops::conv::{conv2d, conv2d_backward, ConvSpec};
use crate::ops::linear::{fc_cost, fully_connected, fully_connected_backward};
use crate::ops::norm::{batch_norm_backward, batch_norm_inference};
use crate::ops::{relu6, relu6_backward, OpCost};
use crate::params::{Grads, Layout, ParamView};
use crate::tensor::{Scalar, Shape, Tensor};

pub(crate) fn vector<T: Scalar>(v: Vec<T>) -> Tensor<T> {
    let n = v.len();
    Tensor::from_parts(Shape::derived([n, 1, 1, 1]), v)
}

/// Convolution reading `<prefix>.weight` and, if the spec has one, `<prefix>.bias`.
pub(crate) fn conv<T: Scalar>(p: &ParamView<'_, T>, x: &Tensor<T>, spec: &ConvSpec) -> Result<Tensor<T>> {
    let bias = if spec.bias { Some(p.bias()?) } else { None };
    conv2d(x, p.weight()?, bias, spec)
}

pub(crate) fn conv_backward<T: Scalar>(
    p: &ParamView<'_, T>,
    x: &Tensor<T>,
    spec: &ConvSpec,
    grad: &Tensor<T>,
    grads: &mut Grads<T>,
) -> Result<Tensor<T>> {
    let g = conv2d_backward(x, p.weight()?, spec, grad)?;
    grads.accumulate(&p.name("weight"), g.weight)?;
    if let Some(b) = g.bias {
        grads.accumulate(&p.name("bias"), vector(b))?;
    }
    Ok(g.input)
}

/// Cost of a convolution producing an output of extent `out`.
pub(crate) fn conv_cost(spec: &ConvSpec, c_in: usize, c_out: usize, out: (usize, usize)) -> OpCost {
    spec.cost(c_in, c_out, 1, out.0, out.1)
}

pub(crate) fn fc<T: Scalar>(p: &ParamView<'_, T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    fully_connected(x, p.weight()?, Some(p.bias()?))
}

pub(crate) fn fc_backward<T: Scalar>(
    p: &ParamView<'_, T>,
    x: &Tensor<T>,
    grad: &Tensor<T>,
    grads: &mut Grads<T>,
) -> Result<Tensor<T>> {
    let g = fully_connected_backward(x, p.weight()?, grad)?;
    grads.accumulate(&p.name("weight"), g.weight)?;
    grads.accumulate(&p.name("bias"), vector(g.bias))?;
    Ok(g.input)
}

pub(crate) fn fc_layer_cost(c_in: usize, c_out: usize, positions: usize) -> OpCost {
    fc_cost(c_in, c_out, positions, true)
}

/// Bias-free convolution, batch norm, optional relu6.
#[derive(Copy, Clone, Debug)]
pub(crate) struct ConvBn {
    pub spec: ConvSpec,
    pub relu: bool,
}

pub(crate) struct ConvBnCache<T> {
    input: Tensor<T>,
    conv_out: Tensor<T>,
    pre_act: Option<Tensor<T>>,
}

impl ConvBn {
    pub fn new(spec: ConvSpec, relu: bool) -> Self {
        ConvBn { spec, relu }
    }

    pub fn layout(&self, l: &mut Layout, prefix: &str, c_in: usize, c_out: usize) {
        l.conv(&format!("{prefix}.conv"), &self.spec, c_in, c_out);
        l.bn(&format!("{prefix}.bn"), c_out);
    }

    pub fn cost(&self, c_in: usize, c_out: usize, out: (usize, usize)) -> OpCost {
        conv_cost(&self.spec, c_in, c_out, out) + OpCost::params_only(2 * c_out as u64)
    }

    pub fn forward<T: Scalar>(&self, p: &ParamView<'_, T>, x: &Tensor<T>) -> Result<(Tensor<T>, ConvBnCache<T>)> {
        let conv_out = conv(&p.sub("conv"), x, &self.spec)?;
        let normed = batch_norm_inference(&conv_out, &p.sub("bn").bn()?)?;
        let (out, pre_act) = if self.relu {
            (relu6(&normed), Some(normed))
        } else {
            (normed, None)
        };
        Ok((
            out,
            ConvBnCache {
                input: x.clone(),
                conv_out,
                pre_act,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamView<'_, T>,
        cache: &ConvBnCache<T>,
        grad: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let g_bn = match &cache.pre_act {
            Some(pre) => relu6_backward(pre, grad)?,
            None => grad.clone(),
        };
        let bn_p = p.sub("bn");
        let bg = batch_norm_backward(&cache.conv_out, &bn_p.bn()?, &g_bn)?;
        grads.accumulate(&bn_p.name("gamma"), vector(bg.gamma))?;
        grads.accumulate(&bn_p.name("beta"), vector(bg.beta))?;
        conv_backward(&p.sub("conv"), &cache.input, &self.spec, &bg.input, grads)
    }
}

/// Output extent of `spec` applied at extent `hw`.
pub(crate) fn out_hw(spec: &ConvSpec, hw: (usize, usize)) -> (usize, usize) {
    spec.output_hw(hw.0, hw.1).unwrap_or((0, 0))
}

/// 1x1 convolution to one channel, sigmoid, bilinear resize to `out_hw`.
#[derive(Copy, Clone, Debug)]
pub(crate) struct Head;

pub(crate) struct HeadCache<T> {
    input: Tensor<T>,
    prob: Tensor<T>,
}

impl Head {
    fn spec() -> ConvSpec {
        ConvSpec::pointwise().with_bias()
    }

    pub fn layout(l: &mut Layout, prefix: &str, c_in: usize) {
        l.conv(prefix, &Self::spec(), c_in, 1);
    }

    pub fn cost(c_in: usize, hw: (usize, usize)) -> OpCost {
        conv_cost(&Self::spec(), c_in, 1, hw)
    }

    /// Returns the native-resolution map and its resized copy.
    pub fn forward<T: Scalar>(
        p: &ParamView<'_, T>,
        x: &Tensor<T>,
        out_hw: (usize, usize),
    ) -> Result<(Tensor<T>, Tensor<T>, HeadCache<T>)> {
        let prob = crate::ops::sigmoid(&conv(p, x, &Self::spec())?);
        let up = crate::ops::resize_bilinear(&prob, crate::ops::ResizeTarget::Extent(out_hw.0, out_hw.1))?;
        Ok((
            prob.clone(),
            up,
            HeadCache {
                input: x.clone(),
                prob,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        p: &ParamView<'_, T>,
        cache: &HeadCache<T>,
        g_prob: &Tensor<T>,
        g_up: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let g = crate::tensor::add(
            g_prob,
            &crate::ops::resize_bilinear_backward(cache.prob.shape(), g_up)?,
        )?;
        let g_z = crate::ops::sigmoid_backward(&cache.prob, &g)?;
        conv_backward(p, &cache.input, &Self::spec(), &g_z, grads)
    }
}
