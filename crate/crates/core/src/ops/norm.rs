use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Per-channel inference-mode batch normalization parameters.
#[derive(Clone, Copy)]
pub struct BatchNorm<'a, T> {
    pub gamma: &'a [T],
    pub beta: &'a [T],
    pub mean: &'a [T],
    pub var: &'a [T],
    pub eps: T,
}

impl<T: Scalar> BatchNorm<'_, T> {
    fn check(&self, c: usize) -> Result<()> {
        for (name, v) in [
            ("gamma length", self.gamma),
            ("beta length", self.beta),
            ("running mean length", self.mean),
            ("running variance length", self.var),
        ] {
            if v.len() != c {
                return Err(Error::DimMismatch {
                    op: "batch_norm",
                    dim: name,
                    expected: c,
                    got: v.len(),
                });
            }
        }
        if self.var.iter().any(|&v| v < T::zero()) {
            return Err(Error::InvalidArgument("batch_norm: negative running variance".into()));
        }
        Ok(())
    }

    fn scale(&self, c: usize) -> T {
        self.gamma[c] / (self.var[c] + self.eps).sqrt()
    }
}

/// `y = gamma (x - mean) / sqrt(var + eps) + beta` per channel.
pub fn batch_norm_inference<T: Scalar>(input: &Tensor<T>, bn: &BatchNorm<'_, T>) -> Result<Tensor<T>> {
    let [n, c, _, _] = input.dims();
    bn.check(c)?;
    let p = input.shape().plane();
    let mut out = input.data().to_vec();
    for ni in 0..n {
        for ci in 0..c {
            let k = bn.scale(ci);
            let (m, b) = (bn.mean[ci], bn.beta[ci]);
            for v in &mut out[(ni * c + ci) * p..(ni * c + ci + 1) * p] {
                *v = k * (*v - m) + b;
            }
        }
    }
    Tensor::from_shape_vec(input.shape(), out)
}

pub struct BatchNormGrads<T> {
    pub input: Tensor<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Gradients with respect to the input and the affine parameters; running
/// statistics are constants at inference.
pub fn batch_norm_backward<T: Scalar>(
    input: &Tensor<T>,
    bn: &BatchNorm<'_, T>,
    grad_out: &Tensor<T>,
) -> Result<BatchNormGrads<T>> {
    let [n, c, _, _] = input.dims();
    bn.check(c)?;
    crate::tensor::same_shape("batch_norm_backward", input, grad_out)?;
    let p = input.shape().plane();
    let mut gi = vec![T::zero(); input.len()];
    let mut gg = vec![T::zero(); c];
    let mut gb = vec![T::zero(); c];
    let x = input.data();
    let go = grad_out.data();
    for ni in 0..n {
        for ci in 0..c {
            let inv = T::one() / (bn.var[ci] + bn.eps).sqrt();
            let k = bn.gamma[ci] * inv;
            for i in (ni * c + ci) * p..(ni * c + ci + 1) * p {
                gi[i] = go[i] * k;
                gg[ci] = gg[ci] + go[i] * (x[i] - bn.mean[ci]) * inv;
                gb[ci] = gb[ci] + go[i];
            }
        }
    }
    Ok(BatchNormGrads {
        input: Tensor::from_parts(input.shape(), gi),
        gamma: gg,
        beta: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn identity_normalization() {
        let eps = 1e-5f64;
        let x = Tensor::from_vec([1, 2, 1, 2], vec![1.0, -3.0, 0.5, 7.0]).unwrap();
        let var = [1.0 - eps; 2];
        let bn = BatchNorm {
            gamma: &[1.0, 1.0],
            beta: &[0.0, 0.0],
            mean: &[0.0, 0.0],
            var: &var,
            eps,
        };
        let y = batch_norm_inference(&x, &bn).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_scale_gives_beta() {
        let x = Tensor::from_fn(Shape::new([2, 2, 2, 2]).unwrap(), |n, c, y, x| (n + c + y * x) as f64);
        let bn = BatchNorm {
            gamma: &[0.0, 0.0],
            beta: &[0.25, -1.5],
            mean: &[0.3, 0.1],
            var: &[2.0, 0.5],
            eps: 1e-5,
        };
        let y = batch_norm_inference(&x, &bn).unwrap();
        for n in 0..2 {
            assert!(y.plane(n, 0).iter().all(|&v| v == 0.25));
            assert!(y.plane(n, 1).iter().all(|&v| v == -1.5));
        }
    }

    #[test]
    fn scalar_closed_form() {
        let x = Tensor::from_vec([1, 1, 1, 1], vec![2.0f64]).unwrap();
        let bn = BatchNorm {
            gamma: &[3.0],
            beta: &[1.0],
            mean: &[1.0],
            var: &[4.0],
            eps: 0.0,
        };
        assert_eq!(batch_norm_inference(&x, &bn).unwrap().data(), &[2.5]);
    }

    #[test]
    fn negative_variance_rejected() {
        let x = Tensor::from_vec([1, 1, 1, 1], vec![2.0f64]).unwrap();
        let bn = BatchNorm {
            gamma: &[1.0],
            beta: &[0.0],
            mean: &[0.0],
            var: &[-1.0],
            eps: 1e-5,
        };
        assert!(batch_norm_inference(&x, &bn).is_err());
    }
}
