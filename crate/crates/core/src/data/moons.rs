use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, Normalization};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Two interleaved half circles.
///
/// Class 0 lies on `(cos t, sin t)` and class 1 on `(1 − cos t, 0.5 − sin t)`
/// with `t ~ U[0, π]`, plus isotropic Gaussian noise of standard deviation
/// `noise_sd`. Class 0 gets the extra point when `n` is odd; rows are shuffled.
pub fn make_moons(n: usize, noise_sd: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Contract(format!("make_moons needs n >= 2, got {n}")));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(Error::Contract(format!("noise_sd must be non-negative, got {noise_sd}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sd).expect("validated sd");
    let n0 = n.div_ceil(2);
    let mut points: Vec<([f64; 2], usize)> = (0..n)
        .map(|i| {
            let t = rng.gen_range(0.0..=std::f64::consts::PI);
            let (label, base) = if i < n0 {
                (0, [t.cos(), t.sin()])
            } else {
                (1, [1.0 - t.cos(), 0.5 - t.sin()])
            };
            let p = if noise_sd > 0.0 {
                [base[0] + noise.sample(&mut rng), base[1] + noise.sample(&mut rng)]
            } else {
                base
            };
            (p, label)
        })
        .collect();
    points.shuffle(&mut rng);

    let examples = Tensor::new(vec![n, 2], points.iter().flat_map(|(p, _)| *p).collect())?;
    let labels = points.iter().map(|&(_, y)| y).collect();
    Dataset::new(examples, Some(labels), 2, vec![2], Normalization::Raw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_geometry() {
        let ds = make_moons(200, 0.0, 1).unwrap();
        let labels = ds.labels().unwrap();
        for (i, &y) in labels.iter().enumerate() {
            let [x, yv] = [ds.examples.row(i)[0], ds.examples.row(i)[1]];
            if y == 0 {
                assert!(((x * x + yv * yv).sqrt() - 1.0).abs() < 1e-12);
                assert!(yv >= 0.0);
            } else {
                let (dx, dy) = (1.0 - x, 0.5 - yv);
                assert!(((dx * dx + dy * dy).sqrt() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn balanced_and_deterministic() {
        let a = make_moons(1000, 0.1, 7).unwrap();
        let b = make_moons(1000, 0.1, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels().unwrap().iter().filter(|&&y| y == 1).count(), 500);
        assert_ne!(a, make_moons(1000, 0.1, 8).unwrap());
    }

    #[test]
    fn rejects_too_few_points() {
        assert!(make_moons(1, 0.1, 0).is_err());
    }
}
