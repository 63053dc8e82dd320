use serde::{Deserialize, Serialize};

use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// Exact form `x * Phi(x)` with the Gaussian CDF via `erf`.
    Gelu,
    Sigmoid,
}

impl Activation {
    pub fn eval<T: Element>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => x * gaussian_cdf(x),
            Activation::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at `x`, given the forward output `y`.
    pub fn derivative<T: Element>(self, x: T, y: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let pdf = (-(x * x) * T::from_f64(0.5)).exp() * T::from_f64(FRAC_1_SQRT_2PI);
                gaussian_cdf(x) + x * pdf
            }
            Activation::Sigmoid => y * (T::one() - y),
        }
    }
}

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

fn gaussian_cdf<T: Element>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Logistic function, evaluated so that neither branch overflows.
pub fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Element>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    x.map(|v| kind.eval(v))
}

pub fn activation_backward<T: Element>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    grad_out: &Tensor<T>,
    kind: Activation,
) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(y.data())
        .zip(grad_out.data())
        .map(|((&xv, &yv), &g)| g * kind.derivative(xv, yv))
        .collect();
    Tensor::from_parts(x.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn point_values() {
        assert_eq!(Activation::Sigmoid.eval(0.0f32), 0.5);
        assert_eq!(Activation::Relu.eval(-3.0f32), 0.0);
        assert_eq!(Activation::Relu.eval(3.0f32), 3.0);
        assert_eq!(Activation::Gelu.eval(0.0f64), 0.0);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
        assert!(sigmoid(-30.0f32) > 0.0);
    }
}
