//! Central finite-difference check of tape gradients, in 64-bit.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor64;

use super::{NodeId, Tape};

/// Tensors at or below this size are swept coordinate by coordinate;
/// larger ones are probed at [`SAMPLED_COORDS`] seeded positions.
pub const FULL_SWEEP_LIMIT: usize = 512;
pub const SAMPLED_COORDS: usize = 64;
pub const DEFAULT_STEP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub index: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(coordinate, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|r| r.max_rel_error).fold(0.0, f64::max)
    }

    /// Index of the input with the largest error.
    pub fn worst_input(&self) -> Option<usize> {
        self.inputs.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).map(|r| r.index)
    }
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn coordinates(len: usize, rng: &mut Rng) -> Vec<usize> {
    if len <= FULL_SWEEP_LIMIT {
        return (0..len).collect();
    }
    let mut all: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut all);
    all.truncate(SAMPLED_COORDS);
    all.sort_unstable();
    all
}

fn evaluate<F>(f: &F, inputs: &[Tensor64]) -> Result<(Tape<f64>, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = f(&mut tape, &ids)?;
    Ok((tape, ids, root))
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences `(f(x + h) - f(x - h)) / 2h`, coordinate by coordinate.
/// `seed` fixes the subsampled coordinates of large inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor64], step: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    check(f, inputs, &[Difference::Central(step)], f64::INFINITY, seed)
}

/// A finite-difference estimate of one partial derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Difference {
    /// `(f(x + h) - f(x - h)) / 2h`, error `O(h^2)`.
    Central(f64),
    /// `(4 D(h/2) - D(h)) / 3` over central differences `D`, error `O(h^4)`.
    Richardson(f64),
}

/// Estimates tried in turn by [`grad_check_refined`].
pub const REFINED: [Difference; 6] = [
    Difference::Central(DEFAULT_STEP),
    Difference::Central(1e-3),
    Difference::Central(1e-5),
    Difference::Central(1e-6),
    Difference::Richardson(1e-3),
    Difference::Richardson(1e-2),
];

/// Like [`grad_check`] at [`DEFAULT_STEP`], except that a coordinate whose
/// error reaches `tolerance / 10` is estimated again by the other entries
/// of [`REFINED`] and keeps its best agreement. A central difference that
/// straddles a ReLU kink, drowns a tiny gradient in roundoff, or sits near
/// a stationary point of GELU is wrong for one estimate but not for all of
/// them; a wrong analytic gradient disagrees with every estimate.
pub fn grad_check_refined<F>(f: F, inputs: &[Tensor64], tolerance: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    check(f, inputs, &REFINED, tolerance, seed)
}

fn check<F>(f: F, inputs: &[Tensor64], estimates: &[Difference], tolerance: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let (tape, ids, root) = evaluate(&f, inputs)?;
    let grads = tape.backward(root)?;
    let mut rng = Rng::seed(seed);
    let mut work: Vec<Tensor64> = inputs.to_vec();
    let mut reports = Vec::with_capacity(inputs.len());

    for (index, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        let mut report = InputReport { index, checked: 0, max_rel_error: 0.0, worst: None };
        for coord in coordinates(inputs[index].len(), &mut rng) {
            let a = analytic.data()[coord];
            let original = work[index].data()[coord];
            let mut central = |h: f64| -> Result<f64> {
                let mut at = |v: f64| -> Result<f64> {
                    work[index].data_mut()[coord] = v;
                    let (t, _, r) = evaluate(&f, &work)?;
                    t.value(r).item()
                };
                let d = (at(original + h)? - at(original - h)?) / (2.0 * h);
                work[index].data_mut()[coord] = original;
                Ok(d)
            };
            let mut best = (f64::INFINITY, f64::NAN);
            for &estimate in estimates {
                let numeric = match estimate {
                    Difference::Central(h) => central(h)?,
                    Difference::Richardson(h) => (4.0 * central(h / 2.0)? - central(h)?) / 3.0,
                };
                let err = relative_error(a, numeric);
                if err < best.0 {
                    best = (err, numeric);
                }
                if best.0 < tolerance / 10.0 {
                    break;
                }
            }
            report.checked += 1;
            if best.0 >= report.max_rel_error {
                report.max_rel_error = best.0;
                report.worst = Some((coord, a, best.1));
            }
        }
        reports.push(report);
    }
    Ok(GradCheckReport { inputs: reports })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnops::Activation;
    use crate::tensor::{Init, Tensor};

    fn rand(shape: [usize; 4], seed: u64) -> Tensor64 {
        Tensor::create(shape, Init::Uniform { rng: &mut Rng::seed(seed), lo: -2.0, hi: 2.0 }).unwrap()
    }

    #[test]
    fn sum_of_identity_is_exact() {
        let report = grad_check(|t, x| t.sum(x[0]), &[rand([1, 2, 3, 3], 1)], DEFAULT_STEP, 0).unwrap();
        assert!(report.max_rel_error() < 1e-10, "{report:?}");
        assert_eq!(report.inputs[0].checked, 18);
    }

    #[test]
    fn sigmoid_sum_is_tight() {
        let f = |t: &mut Tape<f64>, x: &[NodeId]| {
            let s = t.activation(x[0], Activation::Sigmoid)?;
            t.sum(s)
        };
        let report = grad_check(f, &[rand([2, 3, 4, 4], 2)], DEFAULT_STEP, 0).unwrap();
        assert!(report.max_rel_error() < 1e-6, "{report:?}");
    }

    #[test]
    fn large_inputs_are_subsampled() {
        let report = grad_check(|t, x| t.sum(x[0]), &[rand([1, 4, 16, 16], 3)], DEFAULT_STEP, 0).unwrap();
        assert_eq!(report.inputs[0].checked, SAMPLED_COORDS);
    }

    #[test]
    fn product_rule_across_two_inputs() {
        let f = |t: &mut Tape<f64>, x: &[NodeId]| {
            let y = t.mul(x[0], x[1])?;
            t.sum(y)
        };
        let a = rand([1, 1, 2, 2], 4);
        let report = grad_check(f, &[a.clone(), a], DEFAULT_STEP, 0).unwrap();
        assert!(report.max_rel_error() < 1e-8);
        assert_eq!(report.inputs.len(), 2);
    }

    #[test]
    fn refinement_cannot_rescue_a_wrong_gradient() {
        // d/dx sum(x * c) = c, but the tape sees c as a constant leaf that
        // the closure rebuilds from the perturbed input: a deliberately
        // inconsistent function whose gradient is wrong at every step.
        let f = |t: &mut Tape<f64>, x: &[NodeId]| {
            let frozen = t.leaf(Tensor::full([1, 1, 1, 2], 3.0));
            let y = t.mul(x[0], frozen)?;
            let sq = t.value(x[0]).data()[0];
            let extra = t.leaf(Tensor::scalar(sq * sq));
            let s = t.sum(y)?;
            t.add(s, extra)
        };
        let report = grad_check_refined(f, &[rand([1, 1, 1, 2], 5)], 1e-4, 0).unwrap();
        assert!(report.max_rel_error() > 1e-2);
    }

    #[test]
    fn refinement_crosses_kinks() {
        // Inputs within the default step of zero make relu differences wrong.
        let f = |t: &mut Tape<f64>, x: &[NodeId]| {
            let r = t.relu(x[0])?;
            t.sum(r)
        };
        let x = Tensor::new([1, 1, 1, 3], vec![3e-5, -2e-5, 0.7]).unwrap();
        assert!(grad_check(f, std::slice::from_ref(&x), DEFAULT_STEP, 0).unwrap().max_rel_error() > 0.1);
        assert!(grad_check_refined(f, &[x], 1e-4, 0).unwrap().max_rel_error() < 1e-8);
    }

    #[test]
    fn extrapolation_resolves_stationary_points() {
        // gelu has a minimum near -0.7518; just beside it the derivative is
        // tiny while the curvature is not.
        let f = |t: &mut Tape<f64>, x: &[NodeId]| {
            let y = t.activation(x[0], Activation::Gelu)?;
            t.sum(y)
        };
        let x = Tensor::new([1, 1, 1, 1], vec![-0.751_791_524_6 + 1e-7]).unwrap();
        assert!(grad_check(f, std::slice::from_ref(&x), DEFAULT_STEP, 0).unwrap().max_rel_error() > 1e-4);
        assert!(grad_check_refined(f, &[x], 1e-4, 0).unwrap().max_rel_error() < 1e-4);
    }

    #[test]
    fn relative_error_denominator() {
        assert_eq!(relative_error(1.0, 2.0), 0.5);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-15);
    }
}
