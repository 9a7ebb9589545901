use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One training iteration's worth of data.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub labeled_x: Tensor,
    pub labels: Vec<usize>,
    pub unlabeled_x: Option<Tensor>,
    /// Row indices into the labeled pool.
    pub labeled_ids: Vec<usize>,
    /// Row indices into the unlabeled pool.
    pub unlabeled_ids: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labeled_ids.len() + self.unlabeled_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Walks a pool in a fresh random order each epoch.
#[derive(Clone, Debug)]
struct Cycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Cycler {
    fn new(n: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        Self { order, pos: 0, rng }
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let step = (k - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + step]);
            self.pos += step;
        }
        out
    }
}

/// Endless stream of labeled/unlabeled mini-batches.
///
/// Each pool is shuffled without replacement once per epoch, independently of
/// the other, and the whole stream is fixed by the seed.
#[derive(Clone, Debug)]
pub struct BatchSampler<'a> {
    labeled: &'a Dataset,
    unlabeled: Option<&'a Dataset>,
    labeled_order: Cycler,
    unlabeled_order: Option<Cycler>,
    nl: usize,
    nu: usize,
}

impl<'a> BatchSampler<'a> {
    pub fn new(
        labeled: &'a Dataset,
        unlabeled: Option<&'a Dataset>,
        nl: usize,
        nu: usize,
        seed: u64,
    ) -> Result<Self> {
        if labeled.is_empty() || nl == 0 {
            return Err(Error::Contract("labeled pool and batch must be nonempty".into()));
        }
        labeled.labels()?;
        if nl > labeled.len() {
            return Err(Error::Contract(format!(
                "labeled batch {nl} exceeds pool of {}",
                labeled.len()
            )));
        }
        let unlabeled = unlabeled.filter(|_| nu > 0);
        if let Some(u) = unlabeled {
            if nu > u.len() {
                return Err(Error::Contract(format!("unlabeled batch {nu} exceeds pool of {}", u.len())));
            }
            if u.feature_len() != labeled.feature_len() {
                return Err(Error::dim("batch_sampler", "pools have different feature lengths"));
            }
        }
        Ok(Self {
            labeled,
            unlabeled,
            labeled_order: Cycler::new(labeled.len(), seed, 1),
            unlabeled_order: unlabeled.map(|u| Cycler::new(u.len(), seed, 2)),
            nl,
            nu,
        })
    }

    pub fn next_batch(&mut self) -> Result<Batch> {
        let labeled_ids = self.labeled_order.take(self.nl);
        let all_labels = self.labeled.labels()?;
        let (unlabeled_x, unlabeled_ids) = match (self.unlabeled, &mut self.unlabeled_order) {
            (Some(pool), Some(order)) => {
                let ids = order.take(self.nu);
                (Some(pool.examples.select_rows(&ids)?), ids)
            }
            _ => (None, Vec::new()),
        };
        Ok(Batch {
            labeled_x: self.labeled.examples.select_rows(&labeled_ids)?,
            labels: labeled_ids.iter().map(|&i| all_labels[i]).collect(),
            unlabeled_x,
            labeled_ids,
            unlabeled_ids,
        })
    }
}

impl Iterator for BatchSampler<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        // Pools and sizes were validated in `new`, so assembly cannot fail.
        Some(self.next_batch().expect("validated sampler"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_moons;

    #[test]
    fn epoch_covers_each_labeled_example_once() {
        let l = make_moons(12, 0.1, 0).unwrap();
        let u = make_moons(30, 0.1, 1).unwrap();
        let mut s = BatchSampler::new(&l, Some(&u), 4, 7, 5).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next().unwrap().labeled_ids).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..12).collect::<Vec<_>>());
        let b = s.next().unwrap();
        assert_eq!(b.unlabeled_x.unwrap().shape(), &[7, 2]);
        assert!(b.unlabeled_ids.iter().all(|&i| i < 30));
    }

    #[test]
    fn same_seed_same_stream() {
        let l = make_moons(10, 0.1, 0).unwrap();
        let a: Vec<_> = BatchSampler::new(&l, None, 3, 0, 9).unwrap().take(8).collect();
        let b: Vec<_> = BatchSampler::new(&l, None, 3, 0, 9).unwrap().take(8).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_batch_is_rejected() {
        let l = make_moons(4, 0.1, 0).unwrap();
        assert!(BatchSampler::new(&l, None, 5, 0, 0).is_err());
    }
}
