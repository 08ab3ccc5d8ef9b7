use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

pub fn relu6<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let six = T::of(6.0);
    if super::kink::tracking() {
        let branch = |v: &T| {
            if *v <= T::zero() {
                0
            } else if *v < six {
                1
            } else {
                2
            }
        };
        super::kink::record_kink(
            relu6_kink_margin(input).to_f64().unwrap_or(0.0),
            input.data().iter().map(branch),
        );
    }
    input.map(|v| v.max(T::zero()).min(six))
}

/// Slope is 1 strictly inside (0, 6) and 0 elsewhere.
pub fn relu6_backward<T: Scalar>(input: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    let six = T::of(6.0);
    input.zip_map(grad, "relu6_backward", |x, g| if x > T::zero() && x < six { g } else { T::zero() })
}

/// Distance of every pre-activation from the nearest kink of relu6.
pub fn relu6_kink_margin<T: Scalar>(input: &Tensor<T>) -> T {
    let six = T::of(6.0);
    input
        .data()
        .iter()
        .map(|&v| v.abs().min((v - six).abs()))
        .fold(T::infinity(), T::min)
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(sigmoid_scalar)
}

/// Backward pass expressed through the forward output `y = sigmoid(x)`.
pub fn sigmoid_backward<T: Scalar>(output: &Tensor<T>, grad: &Tensor<T>) -> Result<Tensor<T>> {
    output.zip_map(grad, "sigmoid_backward", |y, g| g * y * (T::one() - y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_vec([1, 1, 1, 1], vec![v]).unwrap()
    }

    #[test]
    fn relu6_clamps() {
        let x = Tensor::from_vec([1, 1, 1, 3], vec![-1.0f32, 3.0, 7.0]).unwrap();
        assert_eq!(relu6(&x).data(), &[0.0, 3.0, 6.0]);
    }

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid(&scalar(0.0)).data()[0], 0.5);
        assert!((sigmoid(&scalar(100.0)).data()[0] - 1.0).abs() < 1e-7);
        assert!(sigmoid(&scalar(-800.0)).data()[0] >= 0.0);
    }

    proptest! {
        #[test]
        fn sigmoid_symmetry(x in -50.0f64..50.0) {
            let s = sigmoid_scalar(x) + sigmoid_scalar(-x);
            prop_assert!((s - 1.0).abs() < 1e-7);
        }

        #[test]
        fn ranges(x in -30.0f32..30.0) {
            let s = sigmoid_scalar(x);
            prop_assert!((0.0..=1.0).contains(&s));
            if x.abs() < 15.0 {
                prop_assert!(s > 0.0 && s < 1.0);
            }
            let r = relu6(&Tensor::from_vec([1, 1, 1, 1], vec![x]).unwrap()).data()[0];
            prop_assert!((0.0..=6.0).contains(&r));
        }
    }
}
