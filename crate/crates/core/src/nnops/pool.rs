use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Mean over spatial positions: `(N, C, H, W) -> (N, C, 1, 1)`.
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.dims();
    let plane = h * w;
    if plane == 0 {
        return Err(Error::geometry("global_avg_pool", format!("empty spatial extent in {}", x.shape())));
    }
    let inv = T::one() / T::from_f64(plane as f64);
    let data = x.data().chunks(plane).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    Ok(Tensor::from_parts(Shape::new(n, c, 1, 1), data))
}

pub fn global_avg_pool_backward<T: Element>(input: Shape, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let expect = Shape::new(input.n(), input.c(), 1, 1);
    if grad_out.shape() != expect {
        return Err(Error::mismatch("global_avg_pool_backward", grad_out.shape(), expect));
    }
    let plane = input.plane();
    let inv = T::one() / T::from_f64(plane as f64);
    let data = grad_out.data().iter().flat_map(|&g| std::iter::repeat_n(g * inv, plane)).collect();
    Ok(Tensor::from_parts(input, data))
}
