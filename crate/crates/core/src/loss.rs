//! Supervision losses, edge targets and the MAE metric.
//!
//! Maps are `(N, C, H, W)`; every plane is an independent image. BCE and MAE
//! average over all pixels, IoU averages its per-image value over planes, and
//! SSIM averages the windowed index over all valid window positions.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Probability clamp applied by [`bce_loss`].
pub const BCE_CLAMP: f64 = 1e-7;
/// Smoothing in the IoU ratio.
pub const IOU_EPS: f64 = 1.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64(v).unwrap_or_else(T::nan)
}

fn same_shape<T: Scalar>(op: &'static str, p: &Tensor<T>, g: &Tensor<T>) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::Incompatible {
            op,
            lhs: p.shape(),
            rhs: g.shape(),
        });
    }
    if p.is_empty() {
        return Err(Error::InvalidArgument(format!("{op}: empty input")));
    }
    Ok(())
}

/// Mean binary cross-entropy with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    same_shape("bce_loss", pred, gt)?;
    let (lo, hi) = (c::<T>(BCE_CLAMP), c::<T>(1.0 - BCE_CLAMP));
    let sum = pred.data().iter().zip(gt.data()).fold(T::zero(), |acc, (&p, &g)| {
        let p = p.max(lo).min(hi);
        acc - (g * p.ln() + (T::one() - g) * (T::one() - p).ln())
    });
    Ok(sum / c(pred.len() as f64))
}

/// Zero where the clamp is active.
pub fn bce_loss_grad<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("bce_loss", pred, gt)?;
    let (lo, hi) = (c::<T>(BCE_CLAMP), c::<T>(1.0 - BCE_CLAMP));
    let inv_n = T::one() / c(pred.len() as f64);
    pred.zip_map(gt, "bce_loss", |p, g| {
        if p < lo || p > hi {
            T::zero()
        } else {
            (-g / p + (T::one() - g) / (T::one() - p)) * inv_n
        }
    })
}

struct IouTerms<T> {
    inter: T,
    union: T,
}

fn iou_terms<T: Scalar>(p: &[T], g: &[T]) -> IouTerms<T> {
    let (mut inter, mut sp, mut sg) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in p.iter().zip(g) {
        inter = inter + a * b;
        sp = sp + a;
        sg = sg + b;
    }
    IouTerms {
        inter,
        union: sp + sg - inter,
    }
}

fn planes<T: Scalar>(t: &Tensor<T>) -> std::slice::Chunks<'_, T> {
    t.data().chunks(t.shape().plane())
}

/// `1 - (sum pg + eps) / (sum p + sum g - sum pg + eps)`, averaged over planes.
pub fn iou_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    same_shape("iou_loss", pred, gt)?;
    let eps = c::<T>(IOU_EPS);
    let count = pred.shape().n() * pred.shape().c();
    let sum = planes(pred).zip(planes(gt)).fold(T::zero(), |acc, (p, g)| {
        let t = iou_terms(p, g);
        acc + T::one() - (t.inter + eps) / (t.union + eps)
    });
    Ok(sum / c(count as f64))
}

pub fn iou_loss_grad<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("iou_loss", pred, gt)?;
    let eps = c::<T>(IOU_EPS);
    let inv = T::one() / c((pred.shape().n() * pred.shape().c()) as f64);
    let mut out = Vec::with_capacity(pred.len());
    for (p, g) in planes(pred).zip(planes(gt)) {
        let t = iou_terms(p, g);
        let (num, den) = (t.inter + eps, t.union + eps);
        let den2 = den * den;
        // d(num/den)/dp = (g den - num (1 - g)) / den^2
        out.extend(g.iter().map(|&gv| -(gv * den - num * (T::one() - gv)) / den2 * inv));
    }
    Tensor::from_shape_vec(pred.shape(), out)
}

fn gaussian_window<T: Scalar>() -> Vec<T> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| c(v / s)).collect()
}

/// Separable valid-mode Gaussian filter of an `h x w` plane.
fn filter_valid<T: Scalar>(x: &[T], h: usize, w: usize, k: &[T]) -> Vec<T> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![T::zero(); h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..n).fold(T::zero(), |a, i| a + k[i] * x[y * w + ox + i]);
        }
    }
    let mut out = vec![T::zero(); oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..n).fold(T::zero(), |a, i| a + k[i] * rows[(oy + i) * ow + ox]);
        }
    }
    out
}

/// Adjoint of [`filter_valid`].
fn filter_valid_adjoint<T: Scalar>(g: &[T], h: usize, w: usize, k: &[T]) -> Vec<T> {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![T::zero(); h * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            let v = g[oy * ow + ox];
            for i in 0..n {
                rows[(oy + i) * ow + ox] = rows[(oy + i) * ow + ox] + k[i] * v;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for ox in 0..ow {
            let v = rows[y * ow + ox];
            for i in 0..n {
                out[y * w + ox + i] = out[y * w + ox + i] + k[i] * v;
            }
        }
    }
    out
}

fn check_window(s: Shape) -> Result<()> {
    if s.h() < SSIM_WINDOW || s.w() < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim_loss: image {}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            s.h(),
            s.w()
        )));
    }
    Ok(())
}

/// Windowed statistics of one plane pair.
struct SsimStats<T> {
    mx: Vec<T>,
    my: Vec<T>,
    mxx: Vec<T>,
    myy: Vec<T>,
    mxy: Vec<T>,
}

fn ssim_stats<T: Scalar>(x: &[T], y: &[T], h: usize, w: usize, k: &[T]) -> SsimStats<T> {
    let prod = |f: &dyn Fn(T, T) -> T| -> Vec<T> { x.iter().zip(y).map(|(&a, &b)| f(a, b)).collect() };
    SsimStats {
        mx: filter_valid(x, h, w, k),
        my: filter_valid(y, h, w, k),
        mxx: filter_valid(&prod(&|a, _| a * a), h, w, k),
        myy: filter_valid(&prod(&|_, b| b * b), h, w, k),
        mxy: filter_valid(&prod(&|a, b| a * b), h, w, k),
    }
}

/// Numerators and denominators of the SSIM index at window `i`.
fn ssim_parts<T: Scalar>(s: &SsimStats<T>, i: usize) -> [T; 4] {
    let two = c::<T>(2.0);
    let (mx, my) = (s.mx[i], s.my[i]);
    [
        two * mx * my + c(SSIM_C1),
        two * (s.mxy[i] - mx * my) + c(SSIM_C2),
        mx * mx + my * my + c(SSIM_C1),
        (s.mxx[i] - mx * mx) + (s.myy[i] - my * my) + c(SSIM_C2),
    ]
}

/// `1 - mean SSIM` with an 11x11 Gaussian window (sigma 1.5) over valid
/// positions only.
pub fn ssim_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    same_shape("ssim_loss", pred, gt)?;
    check_window(pred.shape())?;
    let (h, w) = (pred.shape().h(), pred.shape().w());
    let k = gaussian_window::<T>();
    let mut sum = T::zero();
    let mut count = 0usize;
    for (x, y) in planes(pred).zip(planes(gt)) {
        let s = ssim_stats(x, y, h, w, &k);
        for i in 0..s.mx.len() {
            let [a1, a2, b1, b2] = ssim_parts(&s, i);
            sum = sum + a1 * a2 / (b1 * b2);
        }
        count += s.mx.len();
    }
    Ok(T::one() - sum / c(count as f64))
}

/// Gradient of [`ssim_loss`] with respect to `pred`.
pub fn ssim_loss_grad<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>> {
    same_shape("ssim_loss", pred, gt)?;
    check_window(pred.shape())?;
    let (h, w) = (pred.shape().h(), pred.shape().w());
    let k = gaussian_window::<T>();
    let two = c::<T>(2.0);
    let positions = (h + 1 - SSIM_WINDOW) * (w + 1 - SSIM_WINDOW) * pred.shape().n() * pred.shape().c();
    let scale = -T::one() / c(positions as f64);
    let mut out = Vec::with_capacity(pred.len());
    for (x, y) in planes(pred).zip(planes(gt)) {
        let s = ssim_stats(x, y, h, w, &k);
        let m = s.mx.len();
        let (mut g_mx, mut g_mxx, mut g_mxy) = (vec![T::zero(); m], vec![T::zero(); m], vec![T::zero(); m]);
        for i in 0..m {
            let [a1, a2, b1, b2] = ssim_parts(&s, i);
            let v = a1 * a2 / (b1 * b2) * scale;
            let (mx, my) = (s.mx[i], s.my[i]);
            g_mx[i] = v * (two * my / a1 - two * my / a2 - two * mx / b1 + two * mx / b2);
            g_mxy[i] = v * two / a2;
            g_mxx[i] = -v / b2;
        }
        let d_mx = filter_valid_adjoint(&g_mx, h, w, &k);
        let d_mxx = filter_valid_adjoint(&g_mxx, h, w, &k);
        let d_mxy = filter_valid_adjoint(&g_mxy, h, w, &k);
        for p in 0..h * w {
            out.push(d_mx[p] + two * x[p] * d_mxx[p] + y[p] * d_mxy[p]);
        }
    }
    Tensor::from_shape_vec(pred.shape(), out)
}

/// The three components of one hybrid term.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize)]
pub struct HybridTerms {
    pub bce: f64,
    pub iou: f64,
    pub ssim: f64,
}

impl HybridTerms {
    pub fn hybrid(&self) -> f64 {
        self.bce + self.iou + self.ssim
    }
}

pub fn hybrid_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<HybridTerms> {
    Ok(HybridTerms {
        bce: bce_loss(pred, gt)?.to_f64().unwrap_or(f64::NAN),
        iou: iou_loss(pred, gt)?.to_f64().unwrap_or(f64::NAN),
        ssim: ssim_loss(pred, gt)?.to_f64().unwrap_or(f64::NAN),
    })
}

pub fn hybrid_loss_grad<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<Tensor<T>> {
    let g = crate::tensor::add(&bce_loss_grad(pred, gt)?, &iou_loss_grad(pred, gt)?)?;
    crate::tensor::add(&g, &ssim_loss_grad(pred, gt)?)
}

/// Per-branch hybrid terms and their sum.
#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    /// Semantic head prediction against the saliency mask.
    pub saliency_head: HybridTerms,
    /// Texture head prediction against the edge mask.
    pub texture_head: HybridTerms,
    /// Decoder output against the saliency mask.
    pub decoder: HybridTerms,
    pub total: f64,
}

pub fn total_loss<T: Scalar>(
    s: &Tensor<T>,
    s_p: &Tensor<T>,
    t_p: &Tensor<T>,
    g_s: &Tensor<T>,
    g_e: &Tensor<T>,
) -> Result<LossBreakdown> {
    let saliency_head = hybrid_loss(s_p, g_s)?;
    let texture_head = hybrid_loss(t_p, g_e)?;
    let decoder = hybrid_loss(s, g_s)?;
    Ok(LossBreakdown {
        saliency_head,
        texture_head,
        decoder,
        total: saliency_head.hybrid() + texture_head.hybrid() + decoder.hybrid(),
    })
}

/// Gradients of the total loss for `(S, S_p, T_p)`.
pub fn total_loss_grad<T: Scalar>(
    s: &Tensor<T>,
    s_p: &Tensor<T>,
    t_p: &Tensor<T>,
    g_s: &Tensor<T>,
    g_e: &Tensor<T>,
) -> Result<[Tensor<T>; 3]> {
    Ok([
        hybrid_loss_grad(s, g_s)?,
        hybrid_loss_grad(s_p, g_s)?,
        hybrid_loss_grad(t_p, g_e)?,
    ])
}

/// Morphological gradient with a 3x3 square: `dilate(G) - erode(G)`, with
/// erosion treating out-of-image pixels as background.
pub fn edge_from_saliency<T: Scalar>(gt: &Tensor<T>) -> Result<Tensor<T>> {
    if let Some(v) = gt.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        return Err(Error::InvalidArgument(format!(
            "edge_from_saliency: mask must be binary, found {}",
            v.to_f64().unwrap_or(f64::NAN)
        )));
    }
    let (h, w) = (gt.shape().h() as isize, gt.shape().w() as isize);
    let mut out = Vec::with_capacity(gt.len());
    for plane in planes(gt) {
        let at = |y: isize, x: isize| {
            if y < 0 || x < 0 || y >= h || x >= w {
                false
            } else {
                plane[(y * w + x) as usize] == T::one()
            }
        };
        for y in 0..h {
            for x in 0..w {
                let (mut any, mut all) = (false, true);
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let v = at(y + dy, x + dx);
                        any |= v;
                        all &= v;
                    }
                }
                out.push(if any && !all { T::one() } else { T::zero() });
            }
        }
    }
    Tensor::from_shape_vec(gt.shape(), out)
}

/// Mean absolute error.
pub fn mae<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<T> {
    same_shape("mae", pred, gt)?;
    let sum = pred
        .data()
        .iter()
        .zip(gt.data())
        .fold(T::zero(), |a, (&p, &g)| a + (p - g).abs());
    Ok(sum / c(pred.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn shape(n: usize, h: usize, w: usize) -> Shape {
        Shape::new([n, 1, h, w]).unwrap()
    }

    fn random(s: Shape, seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(s, |_, _, _, _| rng.gen_range(lo..hi))
    }

    fn mask(s: Shape, seed: u64) -> Tensor<f64> {
        random(s, seed, 0.0, 1.0).map(|v| if v > 0.5 { 1.0 } else { 0.0 })
    }

    fn square(h: usize, w: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Tensor<f64> {
        Tensor::from_fn(shape(1, h, w), |_, _, y, x| {
            if (y0..y1).contains(&y) && (x0..x1).contains(&x) {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn bce_closed_forms_and_oracle() {
        let g = mask(shape(1, 16, 16), 1);
        assert!(bce_loss(&g, &g).unwrap() < 1e-6);
        let half = Tensor::full(g.shape(), 0.5);
        assert!((bce_loss(&half, &g).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);

        let p = random(shape(2, 9, 7), 2, 0.0, 1.0);
        let g = mask(p.shape(), 3);
        let mut acc = 0.0;
        for (&pv, &gv) in p.data().iter().zip(g.data()) {
            let q = pv.clamp(1e-7, 1.0 - 1e-7);
            acc += -(gv * q.ln() + (1.0 - gv) * (1.0 - q).ln());
        }
        assert!((bce_loss(&p, &g).unwrap() - acc / p.len() as f64).abs() < 1e-7);
        assert!(bce_loss(&p, &Tensor::zeros(shape(1, 9, 7))).is_err());
    }

    #[test]
    fn bce_constant_minimizer_is_the_mask_mean() {
        let g = mask(shape(1, 20, 20), 4);
        let mean = g.mean();
        let best = (1..1000)
            .map(|i| i as f64 / 1000.0)
            .min_by(|a, b| {
                let la = bce_loss(&Tensor::full(g.shape(), *a), &g).unwrap();
                let lb = bce_loss(&Tensor::full(g.shape(), *b), &g).unwrap();
                la.partial_cmp(&lb).unwrap()
            })
            .unwrap();
        assert!((best - mean).abs() <= 1e-3);
    }

    #[test]
    fn iou_closed_forms_and_oracle() {
        let g = square(64, 64, 10, 40, 5, 50);
        assert!(iou_loss(&g, &g).unwrap() < 1e-3);
        let ones = Tensor::<f64>::ones(shape(1, 256, 256));
        let half = Tensor::full(ones.shape(), 0.5);
        assert!((iou_loss(&half, &ones).unwrap() - 0.5).abs() < 1e-4);

        let p = random(shape(3, 6, 5), 5, 0.0, 1.0);
        let g = mask(p.shape(), 6);
        let mut acc = 0.0;
        for n in 0..3 {
            let (mut i, mut sp, mut sg) = (0.0, 0.0, 0.0);
            for y in 0..6 {
                for x in 0..5 {
                    let (a, b) = (p.at(n, 0, y, x), g.at(n, 0, y, x));
                    i += a * b;
                    sp += a;
                    sg += b;
                }
            }
            acc += 1.0 - (i + 1.0) / (sp + sg - i + 1.0);
        }
        assert!((iou_loss(&p, &g).unwrap() - acc / 3.0).abs() < 1e-14);
    }

    /// Direct 2-D window evaluation, independent of the separable filter.
    fn ssim_oracle(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
        let r = 5.0f64;
        let mut k = [[0.0; 11]; 11];
        let mut s = 0.0;
        for (i, row) in k.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (-((i as f64 - r).powi(2) + (j as f64 - r).powi(2)) / (2.0 * 1.5 * 1.5)).exp();
                s += *v;
            }
        }
        let [n, ch, h, w] = x.dims();
        let (mut total, mut count) = (0.0, 0);
        for ni in 0..n {
            for ci in 0..ch {
                for oy in 0..=h - 11 {
                    for ox in 0..=w - 11 {
                        let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                        for i in 0..11 {
                            for j in 0..11 {
                                let wgt = k[i][j] / s;
                                let (a, b) = (x.at(ni, ci, oy + i, ox + j), y.at(ni, ci, oy + i, ox + j));
                                mx += wgt * a;
                                my += wgt * b;
                                xx += wgt * a * a;
                                yy += wgt * b * b;
                                xy += wgt * a * b;
                            }
                        }
                        let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
                        total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                            / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
                        count += 1;
                    }
                }
            }
        }
        1.0 - total / count as f64
    }

    #[test]
    fn ssim_properties() {
        let x = random(shape(2, 16, 14), 7, 0.0, 1.0);
        let y = random(x.shape(), 8, 0.0, 1.0);
        assert!(ssim_loss(&x, &x).unwrap().abs() < 1e-6);
        let (a, b) = (ssim_loss(&x, &y).unwrap(), ssim_loss(&y, &x).unwrap());
        assert!((a - b).abs() < 1e-14);
        assert!((a - ssim_oracle(&x, &y)).abs() < 1e-12);

        let g = square(32, 32, 0, 32, 0, 16);
        let inv = g.map(|v| 1.0 - v);
        let l = ssim_loss(&inv, &g).unwrap();
        assert!(l > 0.0 && l <= 2.0 && l > ssim_loss(&g, &g).unwrap());

        let (c1, c2) = (0.3, 0.8);
        let l = ssim_loss(&Tensor::full(shape(1, 12, 12), c1), &Tensor::full(shape(1, 12, 12), c2)).unwrap();
        let closed = 1.0 - (2.0 * c1 * c2 + SSIM_C1) / (c1 * c1 + c2 * c2 + SSIM_C1);
        assert!((l - closed).abs() < 1e-12);

        assert!(ssim_loss(&Tensor::<f64>::zeros(shape(1, 10, 20)), &Tensor::zeros(shape(1, 10, 20))).is_err());
    }

    fn central_difference(f: impl Fn(&Tensor<f64>) -> f64, x: &Tensor<f64>) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut d = x.clone().into_data();
                d[i] += h;
                let up = f(&Tensor::from_shape_vec(x.shape(), d.clone()).unwrap());
                d[i] -= 2.0 * h;
                let down = f(&Tensor::from_shape_vec(x.shape(), d).unwrap());
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    #[test]
    fn analytic_gradients_match_central_differences() {
        let p = random(shape(2, 13, 12), 9, 0.05, 0.95);
        let g = mask(p.shape(), 10);
        type Pair = (fn(&Tensor<f64>, &Tensor<f64>) -> Result<f64>, fn(&Tensor<f64>, &Tensor<f64>) -> Result<Tensor<f64>>);
        let cases: [Pair; 3] = [(bce_loss, bce_loss_grad), (iou_loss, iou_loss_grad), (ssim_loss, ssim_loss_grad)];
        for (f, df) in cases {
            let analytic = df(&p, &g).unwrap();
            let numeric = central_difference(|x| f(x, &g).unwrap(), &p);
            let scale = analytic.max_abs().max(1e-12);
            for (a, n) in analytic.data().iter().zip(&numeric) {
                assert!((a - n).abs() / scale < 1e-5, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn hybrid_and_total_are_additive_and_separable() {
        let g = square(32, 32, 8, 24, 6, 20);
        let e = edge_from_saliency(&g).unwrap();
        let p = random(g.shape(), 11, 0.01, 0.99);
        let h = hybrid_loss(&p, &g).unwrap();
        assert_eq!(h.hybrid(), h.bce + h.iou + h.ssim);
        assert!(h.bce >= 0.0 && h.iou >= 0.0 && h.ssim >= 0.0);

        let perfect = total_loss(&g, &g, &e, &g, &e).unwrap();
        assert!(perfect.total < 0.02, "{perfect:?}");

        let full = total_loss(&p, &p, &p, &g, &e).unwrap();
        let sum = hybrid_loss(&p, &g).unwrap().hybrid() + hybrid_loss(&p, &e).unwrap().hybrid() + hybrid_loss(&p, &g).unwrap().hybrid();
        assert_eq!(full.total, sum);

        let zero = Tensor::zeros(g.shape());
        let changed = total_loss(&p, &zero, &p, &g, &e).unwrap();
        assert_ne!(changed.saliency_head, full.saliency_head);
        assert_eq!(changed.texture_head, full.texture_head);
        assert_eq!(changed.decoder, full.decoder);
    }

    #[test]
    fn edge_ring_of_a_square() {
        let e = edge_from_saliency(&square(8, 8, 2, 6, 2, 6)).unwrap();
        // Dilation covers rows/cols 1..7, erosion keeps 3..5.
        let expected = Tensor::from_fn(shape(1, 8, 8), |_, _, y, x| {
            let outer = (1..7).contains(&y) && (1..7).contains(&x);
            let inner = (3..5).contains(&y) && (3..5).contains(&x);
            if outer && !inner {
                1.0
            } else {
                0.0
            }
        });
        assert_eq!(e, expected);
        assert_eq!(e.sum(), 32.0);
    }

    #[test]
    fn edge_special_masks() {
        let zero = Tensor::<f64>::zeros(shape(1, 8, 8));
        assert_eq!(edge_from_saliency(&zero).unwrap(), zero);
        let frame = edge_from_saliency(&Tensor::<f64>::ones(shape(1, 8, 8))).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let border = y == 0 || x == 0 || y == 7 || x == 7;
                assert_eq!(frame.at(0, 0, y, x), if border { 1.0 } else { 0.0 });
            }
        }
        assert!(edge_from_saliency(&Tensor::full(shape(1, 4, 4), 0.5)).is_err());
    }

    #[test]
    fn mae_cases() {
        let g = mask(shape(1, 10, 10), 12);
        assert_eq!(mae(&g, &g).unwrap(), 0.0);
        let ones = Tensor::ones(g.shape());
        assert_eq!(mae(&Tensor::full(g.shape(), 0.5), &ones).unwrap(), 0.5);
        let p = random(shape(2, 5, 6), 13, 0.0, 1.0);
        let g = mask(p.shape(), 14);
        let oracle: f64 = p.data().iter().zip(g.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 60.0;
        assert!((mae(&p, &g).unwrap() - oracle).abs() < 1e-15);
    }
}
