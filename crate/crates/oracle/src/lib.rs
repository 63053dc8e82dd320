//! Reference implementations for tests: straight loops over flat `f64`
//! buffers in NCHW order, written for readability rather than speed. The
//! arithmetic here shares no code with `convformer-core`; [`bridge`] only
//! copies weights out of it.

pub mod bridge;
pub mod sweep;

pub type Dims = [usize; 4];

pub fn numel(d: Dims) -> usize {
    d.iter().product()
}

fn at(d: Dims, n: usize, c: usize, h: usize, w: usize) -> usize {
    ((n * d[1] + c) * d[2] + h) * d[3] + w
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

/// Cross-correlation, one output element at a time, every tap tested
/// against the padded border.
pub fn conv2d(x: &[f64], xd: Dims, w: &[f64], wd: Dims, bias: Option<&[f64]>, g: Geometry) -> (Vec<f64>, Dims) {
    let [n, c_in, h, wi] = xd;
    let [c_out, cpg, k, _] = wd;
    assert_eq!(cpg * g.groups, c_in);
    let span = g.dilation * (k - 1) + 1;
    let h_out = (h + 2 * g.padding - span) / g.stride + 1;
    let w_out = (wi + 2 * g.padding - span) / g.stride + 1;
    let od = [n, c_out, h_out, w_out];
    let opg = c_out / g.groups;
    let mut out = vec![0.0; numel(od)];
    for b in 0..n {
        for o in 0..c_out {
            let group = o / opg;
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut acc = bias.map_or(0.0, |bs| bs[o]);
                    for ci in 0..cpg {
                        let c = group * cpg + ci;
                        for kh in 0..k {
                            for kw in 0..k {
                                let ih = (oh * g.stride + kh * g.dilation) as isize - g.padding as isize;
                                let iw = (ow * g.stride + kw * g.dilation) as isize - g.padding as isize;
                                if ih < 0 || iw < 0 || ih >= h as isize || iw >= wi as isize {
                                    continue;
                                }
                                let xv = x[at(xd, b, c, ih as usize, iw as usize)];
                                acc += w[at(wd, o, ci, kh, kw)] * xv;
                            }
                        }
                    }
                    out[at(od, b, o, oh, ow)] = acc;
                }
            }
        }
    }
    (out, od)
}

pub fn global_avg_pool(x: &[f64], d: Dims) -> Vec<f64> {
    let [n, c, h, w] = d;
    let mut out = vec![0.0; n * c];
    for b in 0..n {
        for ch in 0..c {
            let mut s = 0.0;
            for i in 0..h {
                for j in 0..w {
                    s += x[at(d, b, ch, i, j)];
                }
            }
            out[b * c + ch] = s / (h * w) as f64;
        }
    }
    out
}

/// `y[n, o, h, w] = b[o] + sum_i x[n, i, h, w] * w[i, o]`, with `w`
/// stored `in x out`.
pub fn linear(x: &[f64], d: Dims, w: &[f64], out_features: usize, bias: Option<&[f64]>) -> (Vec<f64>, Dims) {
    let [n, fan_in, h, wi] = d;
    let od = [n, out_features, h, wi];
    let mut out = vec![0.0; numel(od)];
    for b in 0..n {
        for o in 0..out_features {
            for i in 0..h {
                for j in 0..wi {
                    let mut acc = bias.map_or(0.0, |bs| bs[o]);
                    for f in 0..fan_in {
                        acc += x[at(d, b, f, i, j)] * w[f * out_features + o];
                    }
                    out[at(od, b, o, i, j)] = acc;
                }
            }
        }
    }
    (out, od)
}

/// Per-channel mean and biased variance over batch and space.
pub fn channel_stats(x: &[f64], d: Dims) -> (Vec<f64>, Vec<f64>) {
    let [n, c, h, w] = d;
    let count = (n * h * w) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    s += x[at(d, b, ch, i, j)];
                }
            }
        }
        let m = s / count;
        let mut v = 0.0;
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    v += (x[at(d, b, ch, i, j)] - m).powi(2);
                }
            }
        }
        mean[ch] = m;
        var[ch] = v / count;
    }
    (mean, var)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

/// Batch norm with the stored statistics, or with the batch's own when
/// `use_batch` is set.
pub fn batchnorm(x: &[f64], d: Dims, p: &Norm, use_batch: bool) -> Vec<f64> {
    let (bm, bv) = channel_stats(x, d);
    let (mean, var) = if use_batch { (&bm, &bv) } else { (&p.mean, &p.var) };
    let [n, c, h, w] = d;
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let k = at(d, b, ch, i, j);
                    out[k] = p.gamma[ch] * (x[k] - mean[ch]) / (var[ch] + p.eps).sqrt() + p.beta[ch];
                }
            }
        }
    }
    out
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Error function: Maclaurin series for `|x| < 3`, Lentz continued
/// fraction for the complement beyond.
pub fn erf(x: f64) -> f64 {
    let a = x.abs();
    let r = if a < 3.0 {
        let mut term = a;
        let mut sum = a;
        let mut n = 0.0;
        while term.abs() > 1e-17 * sum.abs() {
            n += 1.0;
            term *= -a * a / n;
            sum += term / (2.0 * n + 1.0);
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        // erfc(a) = exp(-a^2)/sqrt(pi) * 1/(a + (1/2)/(a + 1/(a + (3/2)/(a + ...))))
        let tiny = 1e-300;
        let mut f = a;
        let mut c = a;
        let mut dd = 0.0;
        for i in 1..200 {
            let an = i as f64 / 2.0;
            dd = a + an * dd;
            dd = if dd.abs() < tiny { tiny } else { dd };
            c = a + an / c;
            c = if c.abs() < tiny { tiny } else { c };
            dd = 1.0 / dd;
            let delta = c * dd;
            f *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        1.0 - (-a * a).exp() / std::f64::consts::PI.sqrt() / f
    };
    r.copysign(x)
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// `mean_n (log sum_j exp(z_nj) - z_n,label)`, no stabilization.
pub fn cross_entropy(logits: &[f64], classes: usize, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &l) in logits.chunks(classes).zip(labels) {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        total += z.ln() - row[l];
    }
    total / labels.len() as f64
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Vec<f64>,
    pub dims: Dims,
    pub bias: Option<Vec<f64>>,
    pub geometry: Geometry,
}

impl Conv {
    pub fn apply(&self, x: &[f64], d: Dims) -> (Vec<f64>, Dims) {
        conv2d(x, d, &self.weight, self.dims, self.bias.as_deref(), self.geometry)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in x out`.
    pub weight: Vec<f64>,
    pub out_features: usize,
    pub bias: Option<Vec<f64>>,
}

impl Dense {
    pub fn apply(&self, x: &[f64], d: Dims) -> (Vec<f64>, Dims) {
        linear(x, d, &self.weight, self.out_features, self.bias.as_deref())
    }
}

/// Weights of one MCA layer. Absent optional parts switch the matching
/// term off; `inner_residual` controls the `X +` in the reduce step.
#[derive(Debug, Clone, PartialEq)]
pub struct Mca {
    pub expand: Conv,
    pub branches: Vec<Conv>,
    pub branch_norm: Norm,
    pub reduce: Conv,
    pub out: Conv,
    pub proj: Option<Conv>,
    pub gate: Option<(Dense, Dense)>,
    pub inner_residual: bool,
}

/// `Attn = sigmoid(FC2(relu(FC1(GAP(x)))))`, one value per sample and channel.
pub fn gate(x: &[f64], d: Dims, fc1: &Dense, fc2: &Dense) -> Vec<f64> {
    let pooled = global_avg_pool(x, d);
    let pd = [d[0], d[1], 1, 1];
    let (h, hd) = fc1.apply(&pooled, pd);
    let h: Vec<f64> = h.into_iter().map(relu).collect();
    let (a, _) = fc2.apply(&h, hd);
    a.into_iter().map(sigmoid).collect()
}

/// The MCA equations applied literally.
pub fn mca(x: &[f64], d: Dims, p: &Mca, use_batch_stats: bool) -> Vec<f64> {
    let (xe, ed) = p.expand.apply(x, d);
    let mut fused = vec![0.0; xe.len()];
    for br in &p.branches {
        let (y, yd) = br.apply(&xe, ed);
        assert_eq!(yd, ed, "branches keep resolution");
        fused = add(&fused, &y);
    }
    let fused: Vec<f64> = batchnorm(&fused, ed, &p.branch_norm, use_batch_stats).into_iter().map(relu).collect();
    let (reduced, _) = p.reduce.apply(&fused, ed);
    let inner = if p.inner_residual { add(x, &reduced) } else { reduced };
    let (mut out, _) = p.out.apply(&inner, d);
    if let Some((fc1, fc2)) = &p.gate {
        let attn = gate(x, d, fc1, fc2);
        let plane = d[2] * d[3];
        for (i, v) in out.iter_mut().enumerate() {
            *v *= attn[i / plane];
        }
    }
    if let Some(proj) = &p.proj {
        out = proj.apply(&out, d).0;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub norm1: Norm,
    pub mca: Mca,
    pub norm2: Norm,
    pub fc1: Dense,
    pub fc2: Dense,
}

/// `Y = MCA(BN(X)) + X`, `Z = FC2(GELU(FC1(BN(Y)))) + Y`.
pub fn block(x: &[f64], d: Dims, p: &Block, use_batch_stats: bool) -> Vec<f64> {
    let u = batchnorm(x, d, &p.norm1, use_batch_stats);
    let y = add(&mca(&u, d, &p.mca, use_batch_stats), x);
    let v = batchnorm(&y, d, &p.norm2, use_batch_stats);
    let (h, hd) = p.fc1.apply(&v, d);
    let h: Vec<f64> = h.into_iter().map(gelu).collect();
    let (m, _) = p.fc2.apply(&h, hd);
    add(&m, &y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_values() {
        // Abramowitz & Stegun table values.
        for (x, e) in [
            (0.5, 0.520_499_877_813_046_5),
            (1.0, 0.842_700_792_949_714_9),
            (2.0, 0.995_322_265_018_952_7),
            (3.5, 0.999_999_256_901_627_7),
        ] {
            assert!((erf(x) - e).abs() < 1e-15, "erf({x}) = {}", erf(x));
            assert!((erf(-x) + e).abs() < 1e-15);
        }
        assert_eq!(erf(0.0), 0.0);
    }

    #[test]
    fn conv_counts_taps() {
        let x = vec![1.0; 16];
        let w = vec![1.0; 9];
        let g = Geometry { stride: 1, padding: 1, dilation: 1, groups: 1 };
        let (y, d) = conv2d(&x, [1, 1, 4, 4], &w, [1, 1, 3, 3], None, g);
        assert_eq!(d, [1, 1, 4, 4]);
        assert_eq!(&y[..4], &[4.0, 6.0, 6.0, 4.0]);
        assert_eq!(y[5], 9.0);
    }

    #[test]
    fn cross_entropy_uniform() {
        assert!((cross_entropy(&[0.0; 10], 10, &[3]) - 10f64.ln()).abs() < 1e-15);
    }
}
