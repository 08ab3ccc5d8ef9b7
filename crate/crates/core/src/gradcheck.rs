//! Central finite differences against the hand-written backward passes.
//!
//! A check contracts every output with a random cotangent, giving the scalar
//! `L = sum_k <c_k, y_k>`, and compares `dL/dx` from the analytic
//! vector-Jacobian product with `(L(x + h) - L(x - h)) / 2h` for up to
//! [`MAX_PROBES`] sampled elements of every input and learnable parameter
//! tensor. Probes whose two evaluations take a different branch of any
//! piecewise op than the base point are discarded, and whole cases with a
//! relu6 pre-activation within [`KINK_MARGIN`] of a kink are redrawn.

use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, Uniform};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dam::{Dam, DamConfig};
use crate::dfam::{Decoder, DfamConfig};
use crate::dirm::{Dirm, DirmCotangents, LEVELS};
use crate::encoder::Backbone;
use crate::error::{Error, Result};
use crate::loss::{edge_from_saliency, total_loss, total_loss_grad};
use crate::ops::track_kinks;
use crate::params::{is_buffer_name, Grads, Layout, ParamStore};
use crate::tensor::{Shape, Tensor};

/// Relative step: `h = STEP * max(1, |x|)`.
pub const STEP: f64 = 1e-5;
pub const MAX_PROBES: usize = 64;
pub const KINK_MARGIN: f64 = 1e-3;
/// Absolute error below which a report passes regardless of relative error;
/// capped by the tolerance so that a zero tolerance always fails.
pub const ABS_FLOOR: f64 = 1e-8;
const MAX_DRAWS: u64 = 64;

/// A map from inputs and parameters to outputs with its analytic adjoint.
pub trait DifferentiableOp {
    fn forward(&self, inputs: &[Tensor<f64>], params: &ParamStore<f64>) -> Result<Vec<Tensor<f64>>>;

    /// Gradients of `sum_k <cotangents[k], outputs[k]>` for each input and
    /// each parameter.
    fn vjp(
        &self,
        inputs: &[Tensor<f64>],
        params: &ParamStore<f64>,
        cotangents: &[Tensor<f64>],
    ) -> Result<(Vec<Tensor<f64>>, Grads<f64>)>;
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradReport {
    pub op: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub pass: bool,
}

impl GradReport {
    fn failure(op: String) -> Self {
        GradReport {
            op,
            max_rel_err: f64::INFINITY,
            max_abs_err: f64::INFINITY,
            checked: 0,
            pass: false,
        }
    }

    fn from_pairs(op: String, analytic: &[f64], numeric: &[f64], tol: f64) -> Self {
        let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let abs = analytic
            .iter()
            .zip(numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let scale = max_abs(analytic).max(max_abs(numeric));
        let rel = if abs == 0.0 { 0.0 } else { abs / scale };
        let checked = analytic.len();
        let finite = rel.is_finite() && abs.is_finite();
        GradReport {
            op,
            max_rel_err: rel,
            max_abs_err: abs,
            checked,
            pass: checked > 0 && finite && (rel < tol || abs < ABS_FLOOR.min(tol)),
        }
    }
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<48} rel {:.3e}  abs {:.3e}  n {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.op,
            self.max_rel_err,
            self.max_abs_err,
            self.checked
        )
    }
}

/// Full central-difference gradient of `sum_k <cotangents[k], f(x)[k]>`.
pub fn finite_diff_grad(
    f: impl Fn(&Tensor<f64>) -> Result<Vec<Tensor<f64>>>,
    x: &Tensor<f64>,
    cotangents: &[Tensor<f64>],
    step: f64,
) -> Result<Tensor<f64>> {
    let objective = |t: &Tensor<f64>| contract(&f(t)?, cotangents);
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let v = x.data()[i];
        let h = step * v.abs().max(1.0);
        probe.data_mut()[i] = v + h;
        let up = objective(&probe)?;
        probe.data_mut()[i] = v - h;
        let down = objective(&probe)?;
        probe.data_mut()[i] = v;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::from_shape_vec(x.shape(), out)
}

fn contract(outputs: &[Tensor<f64>], cotangents: &[Tensor<f64>]) -> Result<f64> {
    if outputs.len() != cotangents.len() {
        return Err(Error::DimMismatch {
            op: "gradcheck",
            dim: "outputs",
            expected: cotangents.len(),
            got: outputs.len(),
        });
    }
    let mut total = 0.0;
    for (y, c) in outputs.iter().zip(cotangents) {
        y.ensure_finite("gradcheck forward")?;
        total += y.dot(c)?;
    }
    Ok(total)
}

/// One probed tensor: an input index or a parameter name.
#[derive(Clone)]
enum Target {
    Input(usize),
    Param(String),
}

struct Case<'a> {
    op: &'a dyn DifferentiableOp,
    inputs: Vec<Tensor<f64>>,
    params: ParamStore<f64>,
    cotangents: Vec<Tensor<f64>>,
}

impl Case<'_> {
    fn objective(&self) -> Result<(f64, u64)> {
        let (out, trace) = track_kinks(|| self.op.forward(&self.inputs, &self.params));
        Ok((contract(&out?, &self.cotangents)?, trace.pattern))
    }

    fn slot(&mut self, t: &Target) -> &mut Tensor<f64> {
        match t {
            Target::Input(i) => &mut self.inputs[*i],
            Target::Param(n) => self.params.get_mut(n).expect("probed parameter exists"),
        }
    }

    /// Central difference at element `i`, or `None` if the probe leaves the
    /// base point's smooth piece.
    fn probe(&mut self, t: &Target, i: usize, base: u64) -> Result<Option<f64>> {
        let v = self.slot(t).data()[i];
        let h = STEP * v.abs().max(1.0);
        self.slot(t).data_mut()[i] = v + h;
        let up = self.objective();
        self.slot(t).data_mut()[i] = v - h;
        let down = self.objective();
        self.slot(t).data_mut()[i] = v;
        let ((up, pu), (down, pd)) = (up?, down?);
        Ok((pu == base && pd == base).then(|| (up - down) / (2.0 * h)))
    }
}

fn target_name(module: &str, t: &Target) -> String {
    match t {
        Target::Input(i) => format!("{module}/input[{i}]"),
        Target::Param(n) => format!("{module}/{n}"),
    }
}

fn check_case(module: &str, case: &mut Case<'_>, tol: f64, rng: &mut ChaCha8Rng) -> Vec<GradReport> {
    let base = match case.objective() {
        Ok((_, p)) => p,
        Err(_) => return vec![GradReport::failure(format!("{module}/forward"))],
    };
    let (g_in, g_params) = match case.op.vjp(&case.inputs, &case.params, &case.cotangents) {
        Ok(g) => g,
        Err(_) => return vec![GradReport::failure(format!("{module}/backward"))],
    };
    let mut targets: Vec<Target> = (0..case.inputs.len()).map(Target::Input).collect();
    targets.extend(
        case.params
            .names()
            .filter(|n| !is_buffer_name(n))
            .cloned()
            .map(Target::Param),
    );
    let mut reports = Vec::with_capacity(targets.len());
    for t in &targets {
        let analytic = match t {
            Target::Input(i) => g_in.get(*i).map(|g| g.data().to_vec()),
            Target::Param(n) => Some(match g_params.get(n) {
                Ok(g) => g.data().to_vec(),
                Err(_) => vec![0.0; case.params.get(n).map_or(0, Tensor::len)],
            }),
        };
        let name = target_name(module, t);
        let Some(analytic) = analytic else {
            reports.push(GradReport::failure(name));
            continue;
        };
        let mut order: Vec<usize> = (0..analytic.len()).collect();
        order.shuffle(rng);
        let (mut a, mut n) = (Vec::new(), Vec::new());
        let mut failed = false;
        for i in order {
            if a.len() == MAX_PROBES {
                break;
            }
            match case.probe(t, i, base) {
                Ok(Some(v)) => {
                    a.push(analytic[i]);
                    n.push(v);
                }
                Ok(None) => {}
                Err(_) => {
                    failed = true;
                    break;
                }
            }
        }
        reports.push(if failed {
            GradReport::failure(name)
        } else {
            GradReport::from_pairs(name, &a, &n, tol)
        });
    }
    reports
}

/// Checks an arbitrary op at the given point with random cotangents.
pub fn check_op(
    name: &str,
    op: &dyn DifferentiableOp,
    inputs: Vec<Tensor<f64>>,
    params: ParamStore<f64>,
    seed: u64,
    tol: f64,
) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = match op.forward(&inputs, &params) {
        Ok(o) => o,
        Err(_) => return vec![GradReport::failure(format!("{name}/forward"))],
    };
    let cotangents = out.iter().map(|y| uniform(y.shape(), -1.0, 1.0, &mut rng)).collect();
    let mut case = Case {
        op,
        inputs,
        params,
        cotangents,
    };
    check_case(name, &mut case, tol, &mut rng)
}

/// Modules covered by [`check_module`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Module {
    Dam,
    Dirm,
    Dfam,
    Loss,
    Backbone,
}

impl Module {
    pub const ALL: [Module; 5] = [Module::Dam, Module::Dirm, Module::Dfam, Module::Loss, Module::Backbone];

    pub fn name(self) -> &'static str {
        match self {
            Module::Dam => "dam",
            Module::Dirm => "dirm",
            Module::Dfam => "dfam",
            Module::Loss => "loss",
            Module::Backbone => "backbone",
        }
    }
}

impl FromStr for Module {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Module::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown module `{s}`")))
    }
}

fn uniform(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let d = Uniform::new(lo, hi);
    Tensor::from_fn(shape, |_, _, _, _| d.sample(rng))
}

fn dims(d: [usize; 4]) -> Shape {
    Shape::new(d).expect("static probe shape")
}

/// Seeded weights plus random biases, affine batch-norm terms and running
/// statistics, so no parameter sits at its trivial initial value.
fn random_params(layout: &Layout, rng: &mut ChaCha8Rng) -> ParamStore<f64> {
    let mut store: ParamStore<f64> = layout.init(rand::Rng::gen(rng)).cast();
    let names: Vec<String> = store.names().cloned().collect();
    for name in names {
        let range = if name.ends_with(".bias") || name.ends_with(".beta") {
            Some((-0.5, 0.5))
        } else if name.ends_with(".gamma") || name.ends_with(".running_var") {
            Some((0.5, 1.5))
        } else if name.ends_with(".running_mean") {
            Some((-0.3, 0.3))
        } else {
            None
        };
        if let Some((lo, hi)) = range {
            let t = store.get_mut(&name).expect("listed name");
            *t = uniform(t.shape(), lo, hi, rng);
        }
    }
    store
}

struct DamOp(Dam);

impl DifferentiableOp for DamOp {
    fn forward(&self, x: &[Tensor<f64>], p: &ParamStore<f64>) -> Result<Vec<Tensor<f64>>> {
        Ok(vec![self.0.forward(&p.view("m"), &x[0], &x[1])?.0])
    }

    fn vjp(&self, x: &[Tensor<f64>], p: &ParamStore<f64>, c: &[Tensor<f64>]) -> Result<(Vec<Tensor<f64>>, Grads<f64>)> {
        let view = p.view("m");
        let (_, cache) = self.0.forward(&view, &x[0], &x[1])?;
        let mut grads = Grads::new();
        let (g_r, g_d) = self.0.backward(&view, &cache, &c[0], &mut grads)?;
        Ok((vec![g_r, g_d], grads))
    }
}

struct DirmOp {
    dirm: Dirm,
    input_hw: (usize, usize),
}

impl DifferentiableOp for DirmOp {
    fn forward(&self, x: &[Tensor<f64>], p: &ParamStore<f64>) -> Result<Vec<Tensor<f64>>> {
        let (o, _) = self.dirm.forward(&p.view("m"), x, self.input_hw)?;
        let mut out = o.t;
        out.extend(o.s);
        out.extend([o.p_lt, o.p_gs, o.t_p, o.s_p]);
        Ok(out)
    }

    fn vjp(&self, x: &[Tensor<f64>], p: &ParamStore<f64>, c: &[Tensor<f64>]) -> Result<(Vec<Tensor<f64>>, Grads<f64>)> {
        let view = p.view("m");
        let (_, cache) = self.dirm.forward(&view, x, self.input_hw)?;
        let cot = DirmCotangents {
            t: c[..LEVELS].to_vec(),
            s: c[LEVELS..2 * LEVELS].to_vec(),
            p_lt: c[2 * LEVELS].clone(),
            p_gs: c[2 * LEVELS + 1].clone(),
            t_p: c[2 * LEVELS + 2].clone(),
            s_p: c[2 * LEVELS + 3].clone(),
        };
        let mut grads = Grads::new();
        let g = self.dirm.backward(&view, &cache, &cot, &mut grads)?;
        Ok((g, grads))
    }
}

/// Inputs are `T_1..T_5, S_1..S_5, P_GS, P_LT`.
struct DecoderOp {
    decoder: Decoder,
    input_hw: (usize, usize),
}

impl DifferentiableOp for DecoderOp {
    fn forward(&self, x: &[Tensor<f64>], p: &ParamStore<f64>) -> Result<Vec<Tensor<f64>>> {
        let (t, s) = (&x[..LEVELS], &x[LEVELS..2 * LEVELS]);
        let (gs, lt) = (&x[2 * LEVELS], &x[2 * LEVELS + 1]);
        Ok(vec![self.decoder.forward(&p.view("m"), t, s, gs, lt, self.input_hw)?.0])
    }

    fn vjp(&self, x: &[Tensor<f64>], p: &ParamStore<f64>, c: &[Tensor<f64>]) -> Result<(Vec<Tensor<f64>>, Grads<f64>)> {
        let view = p.view("m");
        let (t, s) = (&x[..LEVELS], &x[LEVELS..2 * LEVELS]);
        let (gs, lt) = (&x[2 * LEVELS], &x[2 * LEVELS + 1]);
        let (_, cache) = self.decoder.forward(&view, t, s, gs, lt, self.input_hw)?;
        let mut grads = Grads::new();
        let g = self.decoder.backward(&view, &cache, &c[0], &mut grads)?;
        let mut out = g.t;
        out.extend(g.s);
        out.extend([g.p_gs, g.p_lt]);
        Ok((out, grads))
    }
}

/// Inputs are `S, S_p, T_p`; the output is the scalar total loss.
struct LossOp {
    g_s: Tensor<f64>,
    g_e: Tensor<f64>,
}

impl DifferentiableOp for LossOp {
    fn forward(&self, x: &[Tensor<f64>], _: &ParamStore<f64>) -> Result<Vec<Tensor<f64>>> {
        let l = total_loss(&x[0], &x[1], &x[2], &self.g_s, &self.g_e)?;
        Ok(vec![Tensor::full(dims([1, 1, 1, 1]), l.total)])
    }

    fn vjp(&self, x: &[Tensor<f64>], _: &ParamStore<f64>, c: &[Tensor<f64>]) -> Result<(Vec<Tensor<f64>>, Grads<f64>)> {
        let scale = c[0].data()[0];
        let g = total_loss_grad(&x[0], &x[1], &x[2], &self.g_s, &self.g_e)?;
        Ok((g.iter().map(|t| t.scale(scale)).collect(), Grads::new()))
    }
}

struct BackboneOp(Backbone);

impl DifferentiableOp for BackboneOp {
    fn forward(&self, x: &[Tensor<f64>], p: &ParamStore<f64>) -> Result<Vec<Tensor<f64>>> {
        self.0.forward(&p.view("m"), &x[0])
    }

    fn vjp(&self, x: &[Tensor<f64>], p: &ParamStore<f64>, c: &[Tensor<f64>]) -> Result<(Vec<Tensor<f64>>, Grads<f64>)> {
        let view = p.view("m");
        let (_, cache) = self.0.forward_cached(&view, &x[0])?;
        let mut grads = Grads::new();
        let g = self.0.backward(&view, &cache, c, &mut grads)?;
        Ok((vec![g], grads))
    }
}

fn pyramid(ch: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    (0..LEVELS)
        .map(|i| uniform(dims([1, ch, size >> (i + 1), size >> (i + 1)]), -1.0, 1.0, rng))
        .collect()
}

/// Reduced widths used by the checks.
const DAM_CHANNELS: usize = 32;
const DAM_EXTENT: usize = 8;
const EF: usize = 8;
const PYRAMID_INPUT: usize = 64;
const LOSS_EXTENT: usize = 16;

type Drawn<'a> = (Vec<Tensor<f64>>, ParamStore<f64>, &'a dyn DifferentiableOp);

fn draw_case<'a>(
    module: Module,
    ops: &'a Ops,
    rng: &mut ChaCha8Rng,
) -> Result<Drawn<'a>> {
    Ok(match module {
        Module::Dam => {
            let s = dims([1, DAM_CHANNELS, DAM_EXTENT, DAM_EXTENT]);
            let inputs = vec![uniform(s, -1.0, 1.0, rng), uniform(s, -1.0, 1.0, rng)];
            (inputs, random_params(&ops.dam.0.layout("m"), rng), &ops.dam)
        }
        Module::Dirm => {
            let inputs = pyramid(EF, PYRAMID_INPUT, rng);
            (inputs, random_params(&ops.dirm.dirm.layout("m"), rng), &ops.dirm)
        }
        Module::Dfam => {
            let mut inputs = pyramid(EF, PYRAMID_INPUT, rng);
            inputs.extend(pyramid(EF, PYRAMID_INPUT, rng));
            let last = PYRAMID_INPUT >> LEVELS;
            inputs.push(uniform(dims([1, 1, last, last]), 0.05, 0.95, rng));
            inputs.push(uniform(dims([1, 1, PYRAMID_INPUT / 2, PYRAMID_INPUT / 2]), 0.05, 0.95, rng));
            (inputs, random_params(&ops.dfam.decoder.layout("m")?, rng), &ops.dfam)
        }
        Module::Loss => {
            let s = dims([1, 1, LOSS_EXTENT, LOSS_EXTENT]);
            let inputs = (0..3).map(|_| uniform(s, 0.01, 0.99, rng)).collect();
            (inputs, ParamStore::new(), &ops.loss)
        }
        Module::Backbone => {
            let inputs = vec![uniform(dims([1, 3, 8, 8]), -1.0, 1.0, rng)];
            (inputs, random_params(&ops.backbone.0.layout("m"), rng), &ops.backbone)
        }
    })
}

struct Ops {
    dam: DamOp,
    dirm: DirmOp,
    dfam: DecoderOp,
    loss: LossOp,
    backbone: BackboneOp,
}

impl Ops {
    fn new(rng: &mut ChaCha8Rng) -> Result<Self> {
        let s = dims([1, 1, LOSS_EXTENT, LOSS_EXTENT]);
        let g_s = Tensor::from_fn(s, |_, _, y, x| {
            let inside = (3..12).contains(&y) && (4..13).contains(&x);
            if inside {
                1.0
            } else {
                0.0
            }
        });
        // A few random flips so the mask is not a plain rectangle.
        let flips = Uniform::new(0, s.numel());
        let mut g_s = g_s.into_data();
        for _ in 0..12 {
            let i = flips.sample(rng);
            g_s[i] = 1.0 - g_s[i];
        }
        let g_s = Tensor::from_shape_vec(s, g_s)?;
        let g_e = edge_from_saliency(&g_s)?;
        Ok(Ops {
            dam: DamOp(Dam::new(DAM_CHANNELS, DamConfig::default())),
            dirm: DirmOp {
                dirm: Dirm::new(EF),
                input_hw: (PYRAMID_INPUT, PYRAMID_INPUT),
            },
            dfam: DecoderOp {
                decoder: Decoder::new(EF, DfamConfig::default())?,
                input_hw: (PYRAMID_INPUT, PYRAMID_INPUT),
            },
            loss: LossOp { g_s, g_e },
            backbone: BackboneOp(Backbone::surrogate()),
        })
    }
}

/// Gradient reports for every input and learnable parameter of `module`.
///
/// Cases are redrawn until every relu6 pre-activation sits at least
/// [`KINK_MARGIN`] from a kink.
pub fn check_module(module: Module, seed: u64, tol: f64) -> Vec<GradReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(module as u64 + 1);
    let ops = match Ops::new(&mut rng) {
        Ok(o) => o,
        Err(_) => return vec![GradReport::failure(format!("{}/setup", module.name()))],
    };
    for _ in 0..MAX_DRAWS {
        let Ok((inputs, params, op)) = draw_case(module, &ops, &mut rng) else {
            return vec![GradReport::failure(format!("{}/setup", module.name()))];
        };
        let (out, trace) = track_kinks(|| op.forward(&inputs, &params));
        let Ok(out) = out else {
            return vec![GradReport::failure(format!("{}/forward", module.name()))];
        };
        if trace.margin < KINK_MARGIN {
            continue;
        }
        let cotangents = out.iter().map(|y| uniform(y.shape(), -1.0, 1.0, &mut rng)).collect();
        let mut case = Case {
            op,
            inputs,
            params,
            cotangents,
        };
        return check_case(module.name(), &mut case, tol, &mut rng);
    }
    vec![GradReport::failure(format!("{}/kink-free draw", module.name()))]
}

/// Reports for all modules.
pub fn check_all(seed: u64, tol: f64) -> Vec<GradReport> {
    Module::ALL.iter().flat_map(|&m| check_module(m, seed, tol)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::{conv2d, conv2d_backward, relu6, relu6_backward, sigmoid, sigmoid_backward, ConvSpec};
    use crate::tensor::{hadamard, hadamard_backward};

    struct Unary(fn(&Tensor<f64>) -> Tensor<f64>, fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>);

    impl DifferentiableOp for Unary {
        fn forward(&self, x: &[Tensor<f64>], _: &ParamStore<f64>) -> Result<Vec<Tensor<f64>>> {
            Ok(vec![(self.0)(&x[0])])
        }

        fn vjp(&self, x: &[Tensor<f64>], _: &ParamStore<f64>, c: &[Tensor<f64>]) -> Result<(Vec<Tensor<f64>>, Grads<f64>)> {
            Ok((vec![(self.1)(&x[0], &c[0])?], Grads::new()))
        }
    }

    fn sigmoid_vjp(x: &Tensor<f64>, c: &Tensor<f64>) -> Result<Tensor<f64>> {
        sigmoid_backward(&sigmoid(x), c)
    }

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::full(dims([1, 1, 1, 1]), v)
    }

    struct Conv(ConvSpec);

    impl DifferentiableOp for Conv {
        fn forward(&self, x: &[Tensor<f64>], _: &ParamStore<f64>) -> Result<Vec<Tensor<f64>>> {
            Ok(vec![conv2d(&x[0], &x[1], None, &self.0)?])
        }

        fn vjp(&self, x: &[Tensor<f64>], _: &ParamStore<f64>, c: &[Tensor<f64>]) -> Result<(Vec<Tensor<f64>>, Grads<f64>)> {
            let g = conv2d_backward(&x[0], &x[1], &self.0, &c[0])?;
            Ok((vec![g.input, g.weight], Grads::new()))
        }
    }

    struct Hadamard;

    impl DifferentiableOp for Hadamard {
        fn forward(&self, x: &[Tensor<f64>], _: &ParamStore<f64>) -> Result<Vec<Tensor<f64>>> {
            Ok(vec![hadamard(&x[0], &x[1], None)?])
        }

        fn vjp(&self, x: &[Tensor<f64>], _: &ParamStore<f64>, c: &[Tensor<f64>]) -> Result<(Vec<Tensor<f64>>, Grads<f64>)> {
            Ok((hadamard_backward(&x[0], &x[1], None, &c[0])?, Grads::new()))
        }
    }

    #[test]
    fn sigmoid_slope_at_zero() {
        let ones = [scalar(1.0)];
        let fd = finite_diff_grad(|x| Ok(vec![sigmoid(x)]), &scalar(0.0), &ones, STEP).unwrap();
        assert!((fd.data()[0] - 0.25).abs() < 1e-9);
        let an = sigmoid_vjp(&scalar(0.0), &ones[0]).unwrap();
        assert_eq!(an.data()[0], 0.25);
    }

    #[test]
    fn relu6_slopes() {
        let ones = [scalar(1.0)];
        for (x, slope) in [(3.0, 1.0), (7.0, 0.0), (-2.0, 0.0)] {
            let fd = finite_diff_grad(|t| Ok(vec![relu6(t)]), &scalar(x), &ones, STEP).unwrap();
            assert!((fd.data()[0] - slope).abs() < 1e-9, "x = {x}");
            assert_eq!(relu6_backward(&scalar(x), &ones[0]).unwrap().data()[0], slope);
        }
    }

    #[test]
    fn conv_matches_full_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = uniform(dims([1, 2, 4, 4]), -1.0, 1.0, &mut rng);
        let w = uniform(dims([3, 2, 3, 3]), -1.0, 1.0, &mut rng);
        let spec = ConvSpec::new(3).padding(1);
        let c = uniform(dims([1, 3, 4, 4]), -1.0, 1.0, &mut rng);
        let fd = finite_diff_grad(|t| Ok(vec![conv2d(t, &w, None, &spec)?]), &x, std::slice::from_ref(&c), STEP).unwrap();
        let an = conv2d_backward(&x, &w, &spec, &c).unwrap().input;
        let rel = GradReport::from_pairs("conv".into(), an.data(), fd.data(), 1e-7);
        assert!(rel.pass, "{rel}");
        let reports = check_op("conv", &Conv(spec), vec![x, w], ParamStore::new(), 0, 1e-7);
        assert_eq!(reports.len(), 2);
        assert!(reports.iter().all(|r| r.pass && r.checked > 0));
    }

    #[test]
    fn hadamard_gradient_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = uniform(dims([1, 2, 3, 3]), -1.0, 1.0, &mut rng);
        let b = uniform(dims([1, 2, 3, 3]), -1.0, 1.0, &mut rng);
        let c = uniform(dims([1, 2, 3, 3]), -1.0, 1.0, &mut rng);
        let g = hadamard_backward(&a, &b, None, &c).unwrap();
        let expect: Vec<f64> = c.data().iter().zip(b.data()).map(|(c, b)| c * b).collect();
        assert_eq!(g[0].data(), &expect[..]);
        assert!(check_op("hadamard", &Hadamard, vec![a, b], ParamStore::new(), 1, 1e-6).iter().all(|r| r.pass));
    }

    #[test]
    fn vjp_is_linear_in_cotangent() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = uniform(dims([1, 2, 5, 5]), -1.0, 1.0, &mut rng);
        let w = uniform(dims([2, 2, 3, 3]), -1.0, 1.0, &mut rng);
        let op = Conv(ConvSpec::new(3));
        let c1 = uniform(dims([1, 2, 3, 3]), -1.0, 1.0, &mut rng);
        let c2 = uniform(dims([1, 2, 3, 3]), -1.0, 1.0, &mut rng);
        let sum = c1.zip_map(&c2.scale(2.0), "t", |a, b| a + b).unwrap();
        let inputs = [x, w];
        let p = ParamStore::new();
        let g1 = op.vjp(&inputs, &p, &[c1]).unwrap().0;
        let g2 = op.vjp(&inputs, &p, &[c2]).unwrap().0;
        let gs = op.vjp(&inputs, &p, &[sum]).unwrap().0;
        for k in 0..2 {
            for i in 0..gs[k].len() {
                let want = g1[k].data()[i] + 2.0 * g2[k].data()[i];
                assert!((gs[k].data()[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_tolerance_fails() {
        let reports = check_module(Module::Loss, 0, 0.0);
        assert!(!reports.is_empty());
        assert!(reports.iter().all(|r| !r.pass));
    }

    #[test]
    fn broken_adjoint_is_caught() {
        fn wrong(x: &Tensor<f64>, c: &Tensor<f64>) -> Result<Tensor<f64>> {
            Ok(sigmoid_vjp(x, c)?.scale(1.01))
        }
        let x = Tensor::from_vec([1, 1, 2, 2], vec![0.1, -0.4, 0.8, 1.3]).unwrap();
        let r = check_op("sigmoid", &Unary(sigmoid, wrong), vec![x.clone()], ParamStore::new(), 0, 1e-6);
        assert!(!r[0].pass);
        let r = check_op("sigmoid", &Unary(sigmoid, sigmoid_vjp), vec![x], ParamStore::new(), 0, 1e-6);
        assert!(r[0].pass, "{}", r[0]);
    }

    #[test]
    fn unknown_module_is_rejected() {
        assert!("dam".parse::<Module>().is_ok());
        assert!("decoder".parse::<Module>().is_err());
    }

    #[test]
    fn every_module_passes() {
        let reports = check_all(0, 1e-5);
        for r in &reports {
            assert!(r.pass, "{r}");
        }
        for m in Module::ALL {
            assert!(reports.iter().any(|r| r.op.starts_with(m.name())));
        }
    }
}
