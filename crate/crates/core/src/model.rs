//! The assembled network: two encoders, per-level fusion, channel
//! unification, dual representation and the aggregating decoder.

use std::fmt;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::dam::{Dam, DamConfig};
use crate::dfam::{Decoder, DfamConfig};
use crate::dirm::{Dirm, LEVELS};
use crate::encoder::{Backbone, EncoderConfig, STAGE_CHANNELS};
use crate::error::{Error, Result, StageExt};
use crate::layers::{conv, conv_cost};
use crate::ops::{ConvSpec, OpCost};
use crate::params::{Layout, ParamStore};
use crate::tensor::{repeat_channels, Scalar, Shape, Tensor};

pub const RGB_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const RGB_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Unified channel width; one of 16, 32, 64 or 128.
#[derive(Copy, Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct EfficiencyFactor(usize);

impl EfficiencyFactor {
    pub const ALLOWED: [usize; 4] = [16, 32, 64, 128];

    pub fn new(ef: usize) -> Result<Self> {
        if Self::ALLOWED.contains(&ef) {
            Ok(EfficiencyFactor(ef))
        } else {
            Err(Error::InvalidArgument(format!(
                "efficiency factor must be one of {:?}, got {ef}",
                Self::ALLOWED
            )))
        }
    }

    pub fn get(self) -> usize {
        self.0
    }
}

impl Default for EfficiencyFactor {
    fn default() -> Self {
        EfficiencyFactor(32)
    }
}

impl fmt::Display for EfficiencyFactor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_size: usize,
    pub ef: EfficiencyFactor,
    pub dfam: DfamConfig,
    pub dam: DamConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 256,
            ef: EfficiencyFactor::default(),
            dfam: DfamConfig::default(),
            dam: DamConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        EncoderConfig {
            input_size: self.input_size,
            ..EncoderConfig::default()
        }
        .validate()?;
        self.dfam.validate()?;
        self.dam.validate()
    }
}

/// The four reporting stages, in execution order.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum Stage {
    Encoder,
    #[serde(rename = "DAM")]
    Dam,
    #[serde(rename = "DIRM")]
    Dirm,
    Decoder,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Encoder, Stage::Dam, Stage::Dirm, Stage::Decoder];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Encoder => "Encoder",
            Stage::Dam => "DAM",
            Stage::Dirm => "DIRM",
            Stage::Decoder => "Decoder",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Maps at input resolution except the priors, which keep their native
/// levels (1 for `p_lt`, 5 for `p_gs`).
#[derive(Clone, Debug)]
pub struct Predictions<T> {
    pub s: Tensor<T>,
    pub s_p: Tensor<T>,
    pub t_p: Tensor<T>,
    pub p_gs: Tensor<T>,
    pub p_lt: Tensor<T>,
    /// Texture pyramid, level 1 first.
    pub t: Vec<Tensor<T>>,
    /// Semantic pyramid, level 1 first.
    pub s_levels: Vec<Tensor<T>>,
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize)]
pub struct StageCost {
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

impl From<OpCost> for StageCost {
    fn from(c: OpCost) -> Self {
        StageCost {
            params: c.params,
            macs: c.macs,
            flops: c.flops(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageRow {
    pub stage: Stage,
    #[serde(flatten)]
    pub cost: StageCost,
}

/// Analytic per-stage cost. FLOPs are two per MAC.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub input_size: usize,
    pub ef: usize,
    pub stages: Vec<StageRow>,
    pub total: StageCost,
}

impl CostReport {
    pub fn stage(&self, s: Stage) -> StageCost {
        self.stages.iter().find(|r| r.stage == s).map(|r| r.cost).unwrap_or_default()
    }
}

/// Wall time spent in each stage of one forward pass.
#[derive(Copy, Clone, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub stages: [Duration; 4],
    pub total: Duration,
}

fn unify_spec() -> ConvSpec {
    ConvSpec::pointwise().with_bias()
}

pub struct Satnet {
    pub config: ModelConfig,
    backbone: Backbone,
    dams: Vec<Dam>,
    dirm: Dirm,
    decoder: Decoder,
}

const ENCODERS: [&str; 2] = ["rgb_encoder", "depth_encoder"];

impl Satnet {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let ef = config.ef.get();
        Ok(Satnet {
            config,
            backbone: Backbone::mobilenet_v2(),
            dams: STAGE_CHANNELS.iter().map(|&c| Dam::new(c, config.dam)).collect(),
            dirm: Dirm::new(ef),
            decoder: Decoder::new(ef, config.dfam)?,
        })
    }

    fn stage_layouts(&self) -> Result<[Layout; 4]> {
        let mut enc = Layout::new();
        for prefix in ENCODERS {
            enc.extend(self.backbone.layout(prefix));
        }
        let mut dam = Layout::new();
        for (i, d) in self.dams.iter().enumerate() {
            dam.extend(d.layout(&format!("dam.l{}", i + 1)));
        }
        let mut dirm = Layout::new();
        for (i, &c) in STAGE_CHANNELS.iter().enumerate() {
            dirm.conv(&format!("unify.l{}", i + 1), &unify_spec(), c, self.config.ef.get());
        }
        dirm.extend(self.dirm.layout("dirm"));
        Ok([enc, dam, dirm, self.decoder.layout("decoder")?])
    }

    pub fn layout(&self) -> Layout {
        let mut l = Layout::new();
        for part in self.stage_layouts().unwrap_or_else(|_| unreachable!("config validated in new")) {
            l.extend(part);
        }
        l
    }

    /// Deterministic initialization from `config.seed`.
    pub fn init_params(&self) -> ParamStore<f32> {
        self.layout().init(self.config.seed)
    }

    /// Every learned parameter zero, batch norm an identity.
    pub fn zero_params(&self) -> ParamStore<f32> {
        self.layout().zero_init()
    }

    pub fn cost(&self) -> CostReport {
        let size = self.config.input_size;
        let ef = self.config.ef.get();
        let encoder = self.backbone.cost(size) + self.backbone.cost(size);
        let dam = self
            .dams
            .iter()
            .enumerate()
            .fold(OpCost::ZERO, |acc, (i, d)| acc + d.cost(size >> (i + 1), size >> (i + 1)));
        let unify = STAGE_CHANNELS.iter().enumerate().fold(OpCost::ZERO, |acc, (i, &c)| {
            let hw = (size >> (i + 1), size >> (i + 1));
            acc + conv_cost(&unify_spec(), c, ef, hw)
        });
        let dirm = unify + self.dirm.cost(size);
        let decoder = self.decoder.cost(size);
        let costs = [encoder, dam, dirm, decoder];
        CostReport {
            input_size: size,
            ef,
            stages: Stage::ALL
                .iter()
                .zip(costs)
                .map(|(&stage, c)| StageRow { stage, cost: c.into() })
                .collect(),
            total: costs.into_iter().sum::<OpCost>().into(),
        }
    }

    fn expected_input(&self, rgb: &Tensor<impl Scalar>, depth: Shape) -> Result<()> {
        let s = self.config.input_size;
        let [n, c, h, w] = rgb.dims();
        if c != 3 || h != s || w != s {
            return Err(Error::Incompatible {
                op: "forward rgb",
                lhs: Shape::derived([n, 3, s, s]),
                rhs: rgb.shape(),
            });
        }
        if depth != Shape::derived([n, 1, s, s]) {
            return Err(Error::Incompatible {
                op: "forward depth",
                lhs: Shape::derived([n, 1, s, s]),
                rhs: depth,
            });
        }
        Ok(())
    }

    /// Runs the network on `rgb` (N x 3) and `depth` (N x 1), both with
    /// values in `[0, 1]`. Both are standardized with the ImageNet
    /// statistics, depth after replication to three channels.
    pub fn forward<T: Scalar>(&self, p: &ParamStore<T>, rgb: &Tensor<T>, depth: &Tensor<T>) -> Result<Predictions<T>> {
        Ok(self.forward_timed(p, rgb, depth)?.0)
    }

    pub fn forward_timed<T: Scalar>(
        &self,
        p: &ParamStore<T>,
        rgb: &Tensor<T>,
        depth: &Tensor<T>,
    ) -> Result<(Predictions<T>, StageTimes)> {
        self.expected_input(rgb, depth.shape())?;
        let start = Instant::now();
        let mut times = StageTimes::default();
        let mut lap = |stage: Stage, since: Instant| times.stages[stage as usize] += since.elapsed();
        let root = p.root();
        let size = self.config.input_size;

        let t0 = Instant::now();
        let rgb_in = standardize(rgb)?;
        let depth_in = standardize(&repeat_channels(depth, 3)?)?;
        let f_r = self.backbone.forward(&p.view(ENCODERS[0]), &rgb_in).stage("encoder")?;
        let f_d = self.backbone.forward(&p.view(ENCODERS[1]), &depth_in).stage("encoder")?;
        lap(Stage::Encoder, t0);

        let t0 = Instant::now();
        let mut fused = Vec::with_capacity(LEVELS);
        for (i, d) in self.dams.iter().enumerate() {
            let (f, _) = d.forward(&root.sub(&format!("dam.l{}", i + 1)), &f_r[i], &f_d[i]).stage("dam")?;
            fused.push(f);
        }
        lap(Stage::Dam, t0);

        let t0 = Instant::now();
        let unified = fused
            .iter()
            .enumerate()
            .map(|(i, f)| conv(&root.sub(&format!("unify.l{}", i + 1)), f, &unify_spec()))
            .collect::<Result<Vec<_>>>()
            .stage("unify")?;
        let (out, _) = self.dirm.forward(&p.view("dirm"), &unified, (size, size)).stage("dirm")?;
        lap(Stage::Dirm, t0);

        let t0 = Instant::now();
        let (s, _) = self
            .decoder
            .forward(&p.view("decoder"), &out.t, &out.s, &out.p_gs, &out.p_lt, (size, size))
            .stage("decoder")?;
        lap(Stage::Decoder, t0);
        times.total = start.elapsed();

        Ok((
            Predictions {
                s,
                s_p: out.s_p,
                t_p: out.t_p,
                p_gs: out.p_gs,
                p_lt: out.p_lt,
                t: out.t,
                s_levels: out.s,
            },
            times,
        ))
    }
}

/// Per-channel `(x - mean) / std` with the ImageNet statistics.
pub fn standardize<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.shape().c() != 3 {
        return Err(Error::DimMismatch {
            op: "standardize",
            dim: "channels",
            expected: 3,
            got: x.shape().c(),
        });
    }
    let m = |v: f64| T::from_f64(v).unwrap_or_else(T::nan);
    Ok(Tensor::from_fn(x.shape(), |n, c, y, xx| (x.at(n, c, y, xx) - m(RGB_MEAN[c])) / m(RGB_STD[c])))
}
