//! 2-D cross-correlation with zero padding, stride, dilation and channel
//! groups, computed by unfolding each group's input into columns.
//!
//! Work is split across (sample, group) pairs in the forward pass and
//! across groups in the backward pass. Each output element is owned by
//! exactly one task and accumulated in a fixed order, so results are
//! bitwise reproducible regardless of thread count.

use rayon::prelude::*;

use super::gemm::{gemm, MatView};
use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for ConvGeometry {
    fn default() -> Self {
        ConvGeometry { stride: 1, padding: 0, dilation: 1, groups: 1 }
    }
}

impl ConvGeometry {
    pub fn strided(stride: usize, padding: usize) -> Self {
        ConvGeometry { stride, padding, ..Default::default() }
    }

    /// Stride-1 geometry that preserves spatial size for an odd kernel:
    /// `padding = dilation * (kernel - 1) / 2`.
    pub fn same(kernel: usize, dilation: usize, groups: usize) -> Self {
        ConvGeometry { stride: 1, padding: dilation * (kernel - 1) / 2, dilation, groups }
    }

    /// `floor((size + 2p - d(k-1) - 1) / s) + 1`, or `None` when that is
    /// not positive.
    pub fn output_size(&self, size: usize, kernel: usize) -> Option<usize> {
        let span = self.dilation * (kernel.checked_sub(1)?) + 1;
        let padded = size + 2 * self.padding;
        if padded < span || self.stride == 0 {
            return None;
        }
        Some((padded - span) / self.stride + 1)
    }
}

/// Weights of one convolution layer: `weight` is `(C_out, C_in / groups, K, K)`
/// and `bias`, when present, is `(1, C_out, 1, 1)`.
#[derive(Debug, Clone)]
pub struct ConvParams<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub geometry: ConvGeometry,
}

/// Validated sizes shared by the forward and backward kernels.
#[derive(Debug, Clone)]
struct Plan {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
    in_per_group: usize,
    out_per_group: usize,
    g: ConvGeometry,
    rows: Vec<Option<(usize, usize, usize)>>,
    cols: Vec<Option<(usize, usize, usize)>>,
}

impl Plan {
    fn new(x: Shape, weight: Shape, bias: Option<Shape>, g: ConvGeometry) -> Result<Plan> {
        let [n, c_in, h, w] = x.0;
        let [c_out, in_per_group, k, k2] = weight.0;
        if k != k2 {
            return Err(Error::shape("conv2d", format!("non-square kernel {weight}")));
        }
        if g.groups == 0 || g.stride == 0 || g.dilation == 0 {
            return Err(Error::shape("conv2d", format!("invalid geometry {g:?}")));
        }
        if c_in % g.groups != 0 || c_out % g.groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("groups {} must divide C_in {c_in} and C_out {c_out}", g.groups),
            ));
        }
        if in_per_group != c_in / g.groups {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight {weight} expects {in_per_group} input channels per group, input {x} has {}",
                    c_in / g.groups
                ),
            ));
        }
        if let Some(b) = bias {
            if b.0 != [1, c_out, 1, 1] {
                return Err(Error::shape("conv2d", format!("bias {b} for {c_out} output channels")));
            }
        }
        let (h_out, w_out) = match (g.output_size(h, k), g.output_size(w, k)) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::geometry(
                    "conv2d",
                    format!("kernel {k} dilation {} padding {} does not fit input {x}", g.dilation, g.padding),
                ))
            }
        };
        let taps = |size, out| (0..k).map(|t| valid_range(size, out, t * g.dilation, g)).collect();
        Ok(Plan {
            rows: taps(h, h_out),
            cols: taps(w, w_out),
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            h_out,
            w_out,
            in_per_group,
            out_per_group: c_out / g.groups,
            g,
        })
    }

    fn out_shape(&self) -> Shape {
        Shape::new(self.n, self.c_out, self.h_out, self.w_out)
    }

    /// Range of output columns whose tap `kw` lands inside the input row,
    /// and the input column of the first one.
    fn valid_cols(&self, tap: usize) -> Option<(usize, usize, usize)> {
        self.cols[tap]
    }

    fn valid_rows(&self, tap: usize) -> Option<(usize, usize, usize)> {
        self.rows[tap]
    }

    /// One input and one output channel per group.
    fn is_depthwise(&self) -> bool {
        self.in_per_group == 1 && self.out_per_group == 1
    }

    /// Visits every in-bounds run of one kernel tap as
    /// `(tap, first output index, first input index, run length)`, the
    /// input advancing by the stride along the run. Taps are visited in
    /// row-major order and rows top to bottom.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        for kh in 0..self.k {
            let Some((oh0, oh1, ih0)) = self.valid_rows(kh) else { continue };
            for kw in 0..self.k {
                let Some((ow0, ow1, iw0)) = self.valid_cols(kw) else { continue };
                for (r, oh) in (oh0..oh1).enumerate() {
                    let ih = ih0 + r * self.g.stride;
                    f(kh * self.k + kw, oh * self.w_out + ow0, ih * self.w + iw0, ow1 - ow0);
                }
            }
        }
    }

    /// A 1x1, stride-1, unpadded convolution maps whole planes to planes.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.g.stride == 1 && self.g.padding == 0
    }
}

/// For an output index `o` the input index is `o * stride + offset - padding`.
/// Returns `(first_o, last_o_exclusive, first_input)`.
fn valid_range(size: usize, out: usize, offset: usize, g: ConvGeometry) -> Option<(usize, usize, usize)> {
    let s = g.stride;
    let lo = if offset >= g.padding { 0 } else { (g.padding - offset).div_ceil(s) };
    // largest o with o*s + offset - p <= size - 1
    let limit = size + g.padding;
    if limit <= offset {
        return None;
    }
    let hi = ((limit - offset - 1) / s + 1).min(out);
    if lo >= hi {
        return None;
    }
    Some((lo, hi, lo * s + offset - g.padding))
}

pub fn conv2d<T: Element>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    conv2d_forward(x, &p.weight, p.bias.as_ref(), p.geometry)
}

pub fn conv2d_forward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeometry,
) -> Result<Tensor<T>> {
    let plan = Plan::new(x.shape(), weight.shape(), bias.map(Tensor::shape), g)?;
    let out_shape = plan.out_shape();
    let mut out = vec![T::zero(); out_shape.numel()?];
    let plane_out = plan.h_out * plan.w_out;
    if plane_out == 0 || out.is_empty() {
        return Ok(Tensor::from_parts(out_shape, out));
    }
    let xs = x.data();
    let ws = weight.data();
    let rows = plan.col_rows();
    let groups = plan.g.groups;

    out.par_chunks_mut(plan.out_per_group * plane_out).enumerate().for_each(|(idx, dst)| {
        let (n, group) = (idx / groups, idx % groups);
        if plan.is_depthwise() {
            if let Some(b) = bias {
                dst.fill(b.data()[group]);
            }
            let src = plan.input_planes(xs, n, group);
            plan.for_each_tap(|tap, out_at, in_at, len| {
                let wv = ws[group * rows + tap];
                let (d, s) = (&mut dst[out_at..out_at + len], &src[in_at..]);
                for (j, d) in d.iter_mut().enumerate() {
                    *d = *d + wv * s[j * plan.g.stride];
                }
            });
            return;
        }
        let col = plan.columns(xs, n, group);
        let col: &[T] = col.as_deref().unwrap_or_else(|| plan.input_planes(xs, n, group));
        let opg = plan.out_per_group;
        let beta = match bias {
            Some(b) => {
                for (oo, plane) in dst.chunks_mut(plane_out).enumerate() {
                    plane.fill(b.data()[group * opg + oo]);
                }
                T::one()
            }
            None => T::zero(),
        };
        let w = &ws[group * opg * rows..][..opg * rows];
        gemm(
            T::one(),
            w,
            MatView::row_major(opg, rows),
            col,
            MatView::row_major(rows, plane_out),
            beta,
            dst,
            MatView::row_major(opg, plane_out),
        );
    });
    Ok(Tensor::from_parts(out_shape, out))
}

impl Plan {
    /// Rows of the unfolded input of one group: `in_per_group * K^2`.
    fn col_rows(&self) -> usize {
        self.in_per_group * self.k * self.k
    }

    /// The group's input channels, usable directly as columns when the
    /// convolution is pointwise.
    fn input_planes<'a, T>(&self, xs: &'a [T], n: usize, group: usize) -> &'a [T] {
        let plane = self.h * self.w;
        &xs[(n * self.c_in + group * self.in_per_group) * plane..][..self.in_per_group * plane]
    }

    /// Unfolded input `(in_per_group * K^2, H_out * W_out)` for one sample
    /// and group, zero where a tap falls into padding. `None` when the
    /// input planes already have that layout.
    fn columns<T: Element>(&self, xs: &[T], n: usize, group: usize) -> Option<Vec<T>> {
        if self.is_pointwise() {
            return None;
        }
        let plane_out = self.h_out * self.w_out;
        let mut col = vec![T::zero(); self.col_rows() * plane_out];
        let src = self.input_planes(xs, n, group);
        let mut rows = col.chunks_mut(plane_out);
        for ci in 0..self.in_per_group {
            let channel = &src[ci * self.h * self.w..][..self.h * self.w];
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let dst = rows.next().expect("row count matches col_rows");
                    let (Some((oh0, oh1, ih0)), Some((ow0, ow1, iw0))) = (self.valid_rows(kh), self.valid_cols(kw))
                    else {
                        continue;
                    };
                    for (r, oh) in (oh0..oh1).enumerate() {
                        let row = &channel[(ih0 + r * self.g.stride) * self.w..][..self.w];
                        let out = &mut dst[oh * self.w_out + ow0..oh * self.w_out + ow1];
                        if self.g.stride == 1 {
                            out.copy_from_slice(&row[iw0..iw0 + (ow1 - ow0)]);
                        } else {
                            for (j, d) in out.iter_mut().enumerate() {
                                *d = row[iw0 + j * self.g.stride];
                            }
                        }
                    }
                }
            }
        }
        Some(col)
    }

    /// Adjoint of [`Plan::columns`]: adds unfolded gradients back onto the
    /// group's input planes.
    fn fold<T: Element>(&self, col: &[T], dst: &mut [T]) {
        let plane_out = self.h_out * self.w_out;
        let mut rows = col.chunks(plane_out);
        for ci in 0..self.in_per_group {
            let channel = &mut dst[ci * self.h * self.w..][..self.h * self.w];
            for kh in 0..self.k {
                for kw in 0..self.k {
                    let src = rows.next().expect("row count matches col_rows");
                    let (Some((oh0, oh1, ih0)), Some((ow0, ow1, iw0))) = (self.valid_rows(kh), self.valid_cols(kw))
                    else {
                        continue;
                    };
                    for (r, oh) in (oh0..oh1).enumerate() {
                        let row = &mut channel[(ih0 + r * self.g.stride) * self.w..][..self.w];
                        let g = &src[oh * self.w_out + ow0..oh * self.w_out + ow1];
                        for (j, &v) in g.iter().enumerate() {
                            let d = &mut row[iw0 + j * self.g.stride];
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution with respect to its input, weight and bias.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: ConvGeometry,
) -> Result<ConvGrads<T>> {
    let plan = Plan::new(x.shape(), weight.shape(), None, g)?;
    if grad_out.shape() != plan.out_shape() {
        return Err(Error::mismatch("conv2d_backward", grad_out.shape(), plan.out_shape()));
    }
    let xs = x.data();
    let ws = weight.data();
    let gys = grad_out.data();
    let plane_in = plan.h * plan.w;
    let plane_out = plan.h_out * plan.w_out;
    let rows = plan.col_rows();
    let groups = plan.g.groups;
    let opg = plan.out_per_group;

    // Per group: weight and bias gradients of its output channels, and the
    // input gradient of its input channels for every sample.
    let per_group: Vec<(Vec<T>, Vec<T>, Vec<T>)> = (0..groups)
        .into_par_iter()
        .map(|group| {
            let mut gw = vec![T::zero(); opg * rows];
            let mut gb = vec![T::zero(); opg];
            let mut gx = vec![T::zero(); plan.n * plan.in_per_group * plane_in];
            if plane_out == 0 {
                return (gw, gb, gx);
            }
            let mut gcol = vec![T::zero(); rows * plane_out];
            let w = &ws[group * opg * rows..][..opg * rows];
            let wv = MatView::row_major(opg, rows);
            let colv = MatView::row_major(rows, plane_out);
            let gyv = MatView::row_major(opg, plane_out);
            for n in 0..plan.n {
                let gy = &gys[(n * plan.c_out + group * opg) * plane_out..][..opg * plane_out];
                for (db, g) in gb.iter_mut().zip(gy.chunks(plane_out)) {
                    *db = *db + g.iter().copied().sum::<T>();
                }
                if plan.is_depthwise() {
                    let src = plan.input_planes(xs, n, group);
                    let dst = &mut gx[n * plane_in..][..plane_in];
                    plan.for_each_tap(|tap, out_at, in_at, len| {
                        let wv = w[tap];
                        let mut acc = T::zero();
                        for (j, &g) in gy[out_at..out_at + len].iter().enumerate() {
                            let i = in_at + j * plan.g.stride;
                            acc = acc + g * src[i];
                            dst[i] = dst[i] + wv * g;
                        }
                        gw[tap] = gw[tap] + acc;
                    });
                    continue;
                }
                let col = plan.columns(xs, n, group);
                let col: &[T] = col.as_deref().unwrap_or_else(|| plan.input_planes(xs, n, group));
                gemm(T::one(), gy, gyv, col, colv.t(), T::one(), &mut gw, wv);
                gemm(T::one(), w, wv.t(), gy, gyv, T::zero(), &mut gcol, colv);
                let dst = &mut gx[n * plan.in_per_group * plane_in..][..plan.in_per_group * plane_in];
                if plan.is_pointwise() {
                    dst.copy_from_slice(&gcol);
                } else {
                    plan.fold(&gcol, dst);
                }
            }
            (gw, gb, gx)
        })
        .collect();

    let mut gx = vec![T::zero(); x.len()];
    let mut gw = Vec::with_capacity(weight.len());
    let mut gb = Vec::with_capacity(plan.c_out);
    let span = plan.in_per_group * plane_in;
    for (group, (w, b, xg)) in per_group.into_iter().enumerate() {
        gw.extend(w);
        gb.extend(b);
        for n in 0..plan.n {
            let at = (n * plan.c_in + group * plan.in_per_group) * plane_in;
            gx[at..at + span].copy_from_slice(&xg[n * span..][..span]);
        }
    }

    Ok(ConvGrads {
        input: Tensor::from_parts(x.shape(), gx),
        weight: Tensor::from_parts(weight.shape(), gw),
        bias: Tensor::from_parts(Shape::new(1, plan.c_out, 1, 1), gb),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::tensor::Init;

    fn rand(shape: [usize; 4], seed: u64) -> Tensor {
        Tensor::create(shape, Init::Uniform { rng: &mut Rng::seed(seed), lo: -1.0, hi: 1.0 }).unwrap()
    }

    #[test]
    fn output_size_formula() {
        let g = ConvGeometry { stride: 2, padding: 3, dilation: 1, groups: 1 };
        assert_eq!(g.output_size(224, 7), Some(112));
        assert_eq!(ConvGeometry::strided(2, 0).output_size(56, 2), Some(28));
        assert_eq!(ConvGeometry::same(7, 3, 1).output_size(9, 7), Some(9));
        assert_eq!(ConvGeometry::default().output_size(2, 3), None);
    }

    #[test]
    fn depthwise_identity_kernel() {
        let x = rand([2, 3, 5, 6], 1);
        let mut w: Tensor = Tensor::zeros([3, 1, 3, 3]);
        for c in 0..3 {
            w.set(c, 0, 1, 1, 1.0);
        }
        let g = ConvGeometry { padding: 1, groups: 3, ..Default::default() };
        let y = conv2d_forward(&x, &w, None, g).unwrap();
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn pointwise_channel_sum() {
        let x: Tensor = Tensor::new([1, 3, 1, 1], vec![2.0, 3.0, 4.0]).unwrap();
        let w: Tensor = Tensor::full([1, 3, 1, 1], 1.0);
        let y = conv2d_forward(&x, &w, None, ConvGeometry::default()).unwrap();
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn bias_is_added_per_channel() {
        let x: Tensor = Tensor::zeros([1, 1, 2, 2]);
        let w: Tensor = Tensor::full([2, 1, 1, 1], 1.0);
        let b: Tensor = Tensor::new([1, 2, 1, 1], vec![0.5, -1.0]).unwrap();
        let y = conv2d_forward(&x, &w, Some(&b), ConvGeometry::default()).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5, 0.5, 0.5, -1.0, -1.0, -1.0, -1.0]);
    }

    #[test]
    fn errors() {
        let x = rand([1, 4, 5, 5], 2);
        let w = rand([4, 3, 3, 3], 3);
        assert!(matches!(conv2d_forward(&x, &w, None, ConvGeometry::default()), Err(Error::Shape { .. })));
        let w = rand([4, 4, 7, 7], 3);
        assert!(matches!(conv2d_forward(&x, &w, None, ConvGeometry::default()), Err(Error::Geometry { .. })));
        let w = rand([4, 2, 3, 3], 3);
        let g = ConvGeometry { groups: 3, ..Default::default() };
        assert!(matches!(conv2d_forward(&x, &w, None, g), Err(Error::Shape { .. })));
    }

    #[test]
    fn strided_shapes() {
        let x = rand([1, 3, 32, 32], 4);
        let w = rand([8, 3, 7, 7], 5);
        let y = conv2d_forward(&x, &w, None, ConvGeometry::strided(2, 3)).unwrap();
        assert_eq!(y.dims(), [1, 8, 16, 16]);
        let w = rand([8, 8, 2, 2], 6);
        let z = conv2d_forward(&y, &w, None, ConvGeometry::strided(2, 0)).unwrap();
        assert_eq!(z.dims(), [1, 8, 8, 8]);
    }
}
