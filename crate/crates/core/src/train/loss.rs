use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

fn check<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<usize> {
    let [n, k, h, w] = logits.dims();
    if h != 1 || w != 1 {
        return Err(Error::shape("cross_entropy", format!("logits {} are not (N, k, 1, 1)", logits.shape())));
    }
    if labels.len() != n || n == 0 {
        return Err(Error::Contract(format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
    }
    Ok(k)
}

/// Mean over the batch of `-log softmax(logits)[label]`, accumulated in
/// 64-bit with max-subtraction.
pub fn cross_entropy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let k = check(logits, labels)?;
    let mut total = 0.0;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let z: f64 = row.iter().map(|v| (v.as_f64() - max).exp()).sum();
        total += z.ln() - (row[label].as_f64() - max);
    }
    Ok(total / labels.len() as f64)
}

/// Fraction of samples whose largest logit (first on ties) is the label.
pub fn accuracy<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> Result<f64> {
    let k = check(logits, labels)?;
    let correct = logits.data().chunks(k).zip(labels).filter(|(row, &label)| argmax(row) == label).count();
    Ok(correct as f64 / labels.len() as f64)
}

pub fn argmax<T: Element>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits() {
        let logits: Tensor<f32> = Tensor::zeros([3, 10, 1, 1]);
        let loss = cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn saturates_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 5.0, 20.0, 80.0] {
            let mut logits: Tensor<f64> = Tensor::zeros([1, 4, 1, 1]);
            logits.set(0, 2, 0, 0, margin);
            let loss = cross_entropy(&logits, &[2]).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-30);
    }

    #[test]
    fn label_out_of_range() {
        let logits: Tensor<f32> = Tensor::zeros([1, 3, 1, 1]);
        assert!(matches!(cross_entropy(&logits, &[3]), Err(Error::Contract(_))));
    }

    #[test]
    fn accuracy_counts_argmax() {
        let logits: Tensor<f32> = Tensor::new([2, 3, 1, 1], vec![0.0, 2.0, 1.0, 5.0, 5.0, 0.0]).unwrap();
        assert_eq!(accuracy(&logits, &[1, 1]).unwrap(), 0.5);
    }
}
