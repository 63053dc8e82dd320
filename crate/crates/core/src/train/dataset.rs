use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Synthetic images whose class is the direction of a linear intensity
/// ramp. Class `c` of `k` points along angle `2 pi c / k`; each sample has a
/// random ramp strength, a random brightness offset and pixel noise.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDataset {
    /// `(M, 3, S, S)`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
}

const NOISE_STD: f64 = 0.1;
const CHANNEL_GAIN: [f64; 3] = [1.0, 0.8, 0.6];

pub fn make_toy_dataset(seed: u64, samples: usize, classes: usize, size: usize) -> Result<ToyDataset> {
    if classes == 0 || samples < classes {
        return Err(Error::Contract(format!("need at least one sample per class, got {samples} for {classes}")));
    }
    if size < 2 {
        return Err(Error::Contract(format!("image size {size} too small")));
    }
    let mut rng = Rng::seed(seed);
    let mut labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    rng.shuffle(&mut labels);

    let plane = size * size;
    let mut data = Vec::with_capacity(samples * 3 * plane);
    let centre = (size as f64 - 1.0) / 2.0;
    for &label in &labels {
        let angle = std::f64::consts::TAU * label as f64 / classes as f64;
        let (dy, dx) = angle.sin_cos();
        let strength = rng.uniform(0.5, 1.5);
        let offset = rng.uniform(-0.5, 0.5);
        for gain in CHANNEL_GAIN {
            for y in 0..size {
                for x in 0..size {
                    let u = ((x as f64 - centre) * dx + (y as f64 - centre) * dy) / centre;
                    let v = gain * strength * u + offset + NOISE_STD * rng.normal();
                    data.push(v as f32);
                }
            }
        }
    }
    Ok(ToyDataset { images: Tensor::new([samples, 3, size, size], data)?, labels, classes, seed })
}

impl ToyDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Images and labels of the given sample indices, in that order.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let [_, c, h, w] = self.images.dims();
        let stride = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Contract(format!("sample {i} out of range for {}", self.len())));
            }
            data.extend_from_slice(&self.images.data()[i * stride..(i + 1) * stride]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new([indices.len(), c, h, w], data)?, labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic() {
        let a = make_toy_dataset(3, 40, 10, 32).unwrap();
        let b = make_toy_dataset(3, 40, 10, 32).unwrap();
        let c = make_toy_dataset(4, 40, 10, 32).unwrap();
        assert!(a.images.bit_eq(&b.images));
        assert_eq!(a.labels, b.labels);
        assert!(!a.images.bit_eq(&c.images));
    }

    #[test]
    fn balanced() {
        let d = make_toy_dataset(1, 100, 10, 32).unwrap();
        for k in 0..10 {
            assert_eq!(d.labels.iter().filter(|&&l| l == k).count(), 10);
        }
        let d = make_toy_dataset(1, 23, 10, 32).unwrap();
        for k in 0..10 {
            let n = d.labels.iter().filter(|&&l| l == k).count();
            assert!(n == 2 || n == 3);
        }
    }

    #[test]
    fn rejects_too_few_samples() {
        assert!(make_toy_dataset(1, 5, 10, 32).is_err());
    }

    #[test]
    fn batch_gathers_samples() {
        let d = make_toy_dataset(2, 20, 4, 8).unwrap();
        let (x, y) = d.batch(&[3, 0]).unwrap();
        assert_eq!(x.dims(), [2, 3, 8, 8]);
        assert_eq!(y, vec![d.labels[3], d.labels[0]]);
        assert_eq!(x.get(0, 1, 2, 5), d.images.get(3, 1, 2, 5));
        assert!(d.batch(&[20]).is_err());
    }
}
