//! MobileNetV2 feature extractor with five pyramid taps.
//!
//! Parameters are named `<prefix>.features.<i>.<unit>.{conv,bn}.*` where
//! `features.0` is the stem and `features.1..=17` are inverted-residual
//! blocks. The 320 -> 1280 head (`<prefix>.head`) is part of the stored
//! parameter set but no pyramid level reads it, so it is never executed.

use crate::error::{Error, Result};
use crate::layers::{ConvBn, ConvBnCache};
use crate::ops::{ConvSpec, OpCost};
use crate::params::{Grads, Layout, ParamView};
use crate::tensor::{add, Scalar, Tensor};

pub const STAGE_CHANNELS: [usize; 5] = [16, 24, 32, 96, 320];
pub const STAGE_STRIDES: [usize; 5] = [2, 4, 8, 16, 32];

/// (expansion, output channels, repeats, first stride).
const MOBILENET_V2: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
];

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub input_size: usize,
    pub width_multiplier: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_size: 256,
            width_multiplier: 1.0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(32) {
            return Err(Error::InvalidArgument(format!(
                "input size {} is not a positive multiple of 32",
                self.input_size
            )));
        }
        if self.width_multiplier != 1.0 {
            return Err(Error::InvalidArgument(format!(
                "width multiplier {} is unsupported (only 1.0)",
                self.width_multiplier
            )));
        }
        Ok(())
    }
}

/// Inverted residual: optional 1x1 expansion, 3x3 depthwise, linear 1x1 projection.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct BlockDef {
    pub c_in: usize,
    pub c_out: usize,
    pub expansion: usize,
    pub stride: usize,
}

pub struct BlockCache<T> {
    expand: Option<ConvBnCache<T>>,
    dw: ConvBnCache<T>,
    project: ConvBnCache<T>,
}

impl BlockDef {
    pub fn hidden(&self) -> usize {
        self.c_in * self.expansion
    }

    pub fn residual(&self) -> bool {
        self.stride == 1 && self.c_in == self.c_out
    }

    fn units(&self) -> Vec<(&'static str, ConvBn, usize, usize)> {
        let h = self.hidden();
        let mut u = Vec::with_capacity(3);
        if self.expansion != 1 {
            u.push(("expand", ConvBn::new(ConvSpec::pointwise(), true), self.c_in, h));
        }
        let dw = ConvSpec::new(3).stride(self.stride).padding(1).groups(h);
        u.push(("dw", ConvBn::new(dw, true), h, h));
        u.push(("project", ConvBn::new(ConvSpec::pointwise(), false), h, self.c_out));
        u
    }

    fn layout(&self, l: &mut Layout, prefix: &str) {
        for (name, unit, ci, co) in self.units() {
            unit.layout(l, &format!("{prefix}.{name}"), ci, co);
        }
    }

    fn cost(&self, hw: (usize, usize)) -> (OpCost, (usize, usize)) {
        let mut total = OpCost::ZERO;
        let mut cur = hw;
        for (_, unit, ci, co) in self.units() {
            cur = crate::layers::out_hw(&unit.spec, cur);
            total += unit.cost(ci, co, cur);
        }
        (total, cur)
    }

    pub fn forward<T: Scalar>(&self, p: &ParamView<'_, T>, x: &Tensor<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let mut caches = Vec::with_capacity(3);
        let mut cur = x.clone();
        for (name, unit, _, _) in self.units() {
            let (y, c) = unit.forward(&p.sub(name), &cur)?;
            caches.push(c);
            cur = y;
        }
        if self.residual() {
            cur = add(&cur, x)?;
        }
        let project = caches.pop().expect("project unit");
        let dw = caches.pop().expect("depthwise unit");
        Ok((
            cur,
            BlockCache {
                expand: caches.pop(),
                dw,
                project,
            },
        ))
    }

    pub fn backward<T: Scalar>(
        &self,
        p: &ParamView<'_, T>,
        cache: &BlockCache<T>,
        grad: &Tensor<T>,
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        let units = self.units();
        let unit = |name: &str| units.iter().find(|u| u.0 == name).expect("unit").1;
        let g = unit("project").backward(&p.sub("project"), &cache.project, grad, grads)?;
        let mut g = unit("dw").backward(&p.sub("dw"), &cache.dw, &g, grads)?;
        if let Some(c) = &cache.expand {
            g = unit("expand").backward(&p.sub("expand"), c, &g, grads)?;
        }
        if self.residual() {
            g = add(&g, grad)?;
        }
        Ok(g)
    }
}

/// A stem convolution followed by inverted-residual blocks, tapped after
/// selected blocks.
#[derive(Clone, Debug)]
pub struct Backbone {
    stem: ConvBn,
    stem_channels: usize,
    blocks: Vec<BlockDef>,
    /// Feature indices (1-based block positions) whose outputs are returned.
    taps: Vec<usize>,
    /// Stored-but-unused 1x1 head: (input, output) channels.
    head: Option<(usize, usize)>,
}

pub struct BackboneCache<T> {
    stem: ConvBnCache<T>,
    blocks: Vec<BlockCache<T>>,
}

impl Backbone {
    pub fn mobilenet_v2() -> Self {
        let mut blocks = Vec::new();
        let mut c_in = 32;
        for (t, c, n, s) in MOBILENET_V2 {
            for i in 0..n {
                blocks.push(BlockDef {
                    c_in,
                    c_out: c,
                    expansion: t,
                    stride: if i == 0 { s } else { 1 },
                });
                c_in = c;
            }
        }
        Backbone {
            stem: ConvBn::new(ConvSpec::new(3).stride(2).padding(1), true),
            stem_channels: 32,
            blocks,
            taps: vec![1, 3, 6, 13, 17],
            head: Some((320, 1280)),
        }
    }

    /// Four-channel stand-in with the same block structure, small enough for
    /// exhaustive finite differences.
    pub fn surrogate() -> Self {
        let b = |expansion, stride| BlockDef {
            c_in: 4,
            c_out: 4,
            expansion,
            stride,
        };
        Backbone {
            stem: ConvBn::new(ConvSpec::new(3).stride(2).padding(1), true),
            stem_channels: 4,
            blocks: vec![b(1, 1), b(2, 1), b(2, 2)],
            taps: vec![1, 3],
            head: None,
        }
    }

    pub fn blocks(&self) -> &[BlockDef] {
        &self.blocks
    }

    pub fn tap_channels(&self) -> Vec<usize> {
        self.taps.iter().map(|&i| self.blocks[i - 1].c_out).collect()
    }

    pub fn layout(&self, prefix: &str) -> Layout {
        let mut l = Layout::new();
        self.stem.layout(&mut l, &format!("{prefix}.features.0"), 3, self.stem_channels);
        for (i, b) in self.blocks.iter().enumerate() {
            b.layout(&mut l, &format!("{prefix}.features.{}", i + 1));
        }
        if let Some((ci, co)) = self.head {
            ConvBn::new(ConvSpec::pointwise(), true).layout(&mut l, &format!("{prefix}.head"), ci, co);
        }
        l
    }

    /// Parameters of every stored tensor; MACs of the executed graph only.
    pub fn cost(&self, input_size: usize) -> OpCost {
        let hw = crate::layers::out_hw(&self.stem.spec, (input_size, input_size));
        let mut total = self.stem.cost(3, self.stem_channels, hw);
        let mut cur = hw;
        for b in &self.blocks {
            let (c, next) = b.cost(cur);
            total += c;
            cur = next;
        }
        if let Some((ci, co)) = self.head {
            let head = ConvBn::new(ConvSpec::pointwise(), true).cost(ci, co, cur);
            total += OpCost::params_only(head.params);
        }
        total
    }

    pub fn forward<T: Scalar>(&self, p: &ParamView<'_, T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        Ok(self.run(p, x, false)?.0)
    }

    pub fn forward_cached<T: Scalar>(
        &self,
        p: &ParamView<'_, T>,
        x: &Tensor<T>,
    ) -> Result<(Vec<Tensor<T>>, BackboneCache<T>)> {
        let (taps, cache) = self.run(p, x, true)?;
        Ok((taps, cache.expect("cache requested")))
    }

    fn run<T: Scalar>(
        &self,
        p: &ParamView<'_, T>,
        x: &Tensor<T>,
        keep: bool,
    ) -> Result<(Vec<Tensor<T>>, Option<BackboneCache<T>>)> {
        let c = x.shape().c();
        if c != 3 {
            return Err(Error::DimMismatch {
                op: "encoder",
                dim: "input channels",
                expected: 3,
                got: c,
            });
        }
        let (mut cur, stem_cache) = self.stem.forward(&p.sub("features.0"), x)?;
        let mut caches = Vec::new();
        let mut taps = Vec::with_capacity(self.taps.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let (y, c) = b.forward(&p.sub(&format!("features.{}", i + 1)), &cur)?;
            if keep {
                caches.push(c);
            }
            cur = y;
            if self.taps.contains(&(i + 1)) {
                taps.push(cur.clone());
            }
        }
        let cache = keep.then_some(BackboneCache {
            stem: stem_cache,
            blocks: caches,
        });
        Ok((taps, cache))
    }

    /// Input gradient given one cotangent per tap.
    pub fn backward<T: Scalar>(
        &self,
        p: &ParamView<'_, T>,
        cache: &BackboneCache<T>,
        tap_grads: &[Tensor<T>],
        grads: &mut Grads<T>,
    ) -> Result<Tensor<T>> {
        if tap_grads.len() != self.taps.len() {
            return Err(Error::DimMismatch {
                op: "encoder backward",
                dim: "tap cotangents",
                expected: self.taps.len(),
                got: tap_grads.len(),
            });
        }
        let mut g: Option<Tensor<T>> = None;
        for i in (0..self.blocks.len()).rev() {
            if let Some(t) = self.taps.iter().position(|&k| k == i + 1) {
                g = Some(match g {
                    Some(acc) => add(&acc, &tap_grads[t])?,
                    None => tap_grads[t].clone(),
                });
            }
            if let Some(gi) = g.take() {
                g = Some(self.blocks[i].backward(&p.sub(&format!("features.{}", i + 1)), &cache.blocks[i], &gi, grads)?);
            }
        }
        let g = g.ok_or_else(|| Error::InvalidArgument("encoder has no taps".into()))?;
        self.stem.backward(&p.sub("features.0"), &cache.stem, &g, grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Shape;

    #[test]
    fn standard_table_counts() {
        let b = Backbone::mobilenet_v2();
        assert_eq!(b.blocks().len(), 17);
        assert_eq!(b.tap_channels(), STAGE_CHANNELS.to_vec());
        let cost = b.cost(256);
        assert_eq!(cost.params, 2_223_872);
        assert_eq!(b.layout("e").learnable_count(), cost.params);
    }

    #[test]
    fn config_guards() {
        assert!(EncoderConfig::default().validate().is_ok());
        assert!(EncoderConfig { input_size: 250, ..Default::default() }.validate().is_err());
        assert!(EncoderConfig { width_multiplier: 0.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_weights_give_zero_pyramid() {
        let b = Backbone::mobilenet_v2();
        let store: ParamStore<f32> = b.layout("e").zero_init();
        let x = Tensor::<f32>::full(Shape::new([1, 3, 64, 64]).unwrap(), 0.7);
        let taps = b.forward(&store.view("e"), &x).unwrap();
        for (i, t) in taps.iter().enumerate() {
            assert_eq!(t.dims(), [1, STAGE_CHANNELS[i], 64 >> (i + 1), 64 >> (i + 1)]);
            assert!(t.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn wrong_channel_count_rejected() {
        let b = Backbone::surrogate();
        let store: ParamStore<f32> = b.layout("s").init(1);
        let x = Tensor::<f32>::zeros(Shape::new([1, 1, 8, 8]).unwrap());
        assert!(b.forward(&store.view("s"), &x).is_err());
    }
}
