//! Fully connected layers applied independently at every spatial position,
//! with channels as features. A `(N, C, 1, 1)` input is an ordinary
//! batch of feature vectors.

use rayon::prelude::*;

use super::gemm::{gemm, MatView};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// `weight` is an `in_features x out_features` matrix stored as
/// `(in, out, 1, 1)`; `bias` is `(1, out, 1, 1)`.
#[derive(Debug, Clone)]
pub struct LinearParams<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

fn check(x: Shape, weight: Shape, bias: Option<Shape>) -> Result<(usize, usize)> {
    let [fan_in, fan_out, one_a, one_b] = weight.0;
    if one_a != 1 || one_b != 1 || fan_in == 0 || fan_out == 0 {
        return Err(Error::shape("linear", format!("weight {weight} is not an (in, out, 1, 1) matrix")));
    }
    if x.c() != fan_in {
        return Err(Error::shape("linear", format!("input {x} has {} features, weight expects {fan_in}", x.c())));
    }
    if let Some(b) = bias {
        if b.0 != [1, fan_out, 1, 1] {
            return Err(Error::shape("linear", format!("bias {b} for {fan_out} outputs")));
        }
    }
    Ok((fan_in, fan_out))
}

pub fn linear<T: Element>(x: &Tensor<T>, p: &LinearParams<T>) -> Result<Tensor<T>> {
    linear_forward(x, &p.weight, p.bias.as_ref())
}

pub fn linear_forward<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let (fan_in, fan_out) = check(x.shape(), weight.shape(), bias.map(Tensor::shape))?;
    let [n, _, h, w] = x.dims();
    let plane = h * w;
    let out_shape = Shape::new(n, fan_out, h, w);
    let mut out = vec![T::zero(); out_shape.numel()?];
    if plane == 0 {
        return Ok(Tensor::from_parts(out_shape, out));
    }
    let xs = x.data();
    // out_b (out x P) = W^T (out x in) . x_b (in x P)
    let wt = MatView::row_major(fan_in, fan_out).t();
    out.par_chunks_mut(fan_out * plane).enumerate().for_each(|(b, dst)| {
        let beta = match bias {
            Some(bias) => {
                for (plane_out, &v) in dst.chunks_mut(plane).zip(bias.data()) {
                    plane_out.fill(v);
                }
                T::one()
            }
            None => T::zero(),
        };
        let src = &xs[b * fan_in * plane..][..fan_in * plane];
        let xv = MatView::row_major(fan_in, plane);
        gemm(T::one(), weight.data(), wt, src, xv, beta, dst, MatView::row_major(fan_out, plane));
    });
    Ok(Tensor::from_parts(out_shape, out))
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LinearGrads<T>> {
    let (fan_in, fan_out) = check(x.shape(), weight.shape(), None)?;
    let [n, _, h, w] = x.dims();
    let expect = Shape::new(n, fan_out, h, w);
    if grad_out.shape() != expect {
        return Err(Error::mismatch("linear_backward", grad_out.shape(), expect));
    }
    let plane = h * w;
    let xs = x.data();
    let ws = weight.data();
    let gs = grad_out.data();

    let wv = MatView::row_major(fan_in, fan_out);
    let xv = MatView::row_major(fan_in, plane);
    let gv = MatView::row_major(fan_out, plane);
    let mut gx = vec![T::zero(); x.len()];
    if plane > 0 {
        gx.par_chunks_mut(fan_in * plane).enumerate().for_each(|(b, dst)| {
            let g = &gs[b * fan_out * plane..][..fan_out * plane];
            gemm(T::one(), ws, wv, g, gv, T::zero(), dst, xv);
        });
    }

    let mut gw = vec![T::zero(); weight.len()];
    for b in 0..n {
        let xb = &xs[b * fan_in * plane..][..fan_in * plane];
        let g = &gs[b * fan_out * plane..][..fan_out * plane];
        gemm(T::one(), xb, xv, g, gv.t(), T::one(), &mut gw, wv);
    }

    let gb = (0..fan_out)
        .map(|o| (0..n).map(|b| gs[(b * fan_out + o) * plane..][..plane].iter().copied().sum::<T>()).sum())
        .collect();

    Ok(LinearGrads {
        input: Tensor::from_parts(x.shape(), gx),
        weight: Tensor::from_parts(weight.shape(), gw),
        bias: Tensor::from_parts(Shape::new(1, fan_out, 1, 1), gb),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_small_case() {
        let x: Tensor = Tensor::new([1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let eye = LinearParams { weight: Tensor::new([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), bias: None };
        assert!(linear(&x, &eye).unwrap().bit_eq(&x));

        let p = LinearParams {
            weight: Tensor::new([2, 2, 1, 1], vec![1.0, 0.0, 0.0, 2.0]).unwrap(),
            bias: Some(Tensor::new([1, 2, 1, 1], vec![1.0, 1.0]).unwrap()),
        };
        assert_eq!(linear(&x, &p).unwrap().data(), &[2.0, 5.0]);
    }

    #[test]
    fn applies_per_position() {
        // two positions with features (1, 2) and (3, 4)
        let x: Tensor = Tensor::new([1, 2, 1, 2], vec![1.0, 3.0, 2.0, 4.0]).unwrap();
        let w: Tensor = Tensor::new([2, 1, 1, 1], vec![10.0, 1.0]).unwrap();
        let y = linear_forward(&x, &w, None).unwrap();
        assert_eq!(y.data(), &[12.0, 34.0]);
    }

    #[test]
    fn dimension_mismatch() {
        let x: Tensor = Tensor::zeros([1, 3, 1, 1]);
        let w: Tensor = Tensor::zeros([2, 2, 1, 1]);
        assert!(matches!(linear_forward(&x, &w, None), Err(Error::Shape { .. })));
    }
}
