//! Datasets: synthetic moons, IDX images, normalization, splits and batching.

mod idx;
mod moons;
mod sampler;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, IdxImages};
pub use moons::make_moons;
pub use sampler::{Batch, BatchSampler};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Untransformed features (e.g. moons coordinates).
    #[default]
    Raw,
    /// Pixels in `[0, 1]`.
    Unit,
    /// Pixels shifted to `[−0.5, 0.5]`, so no pixel sits at zero where a
    /// multiplicative mask would have no effect.
    CenterHalf,
}

/// Examples stored as flat rows, with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N × P]`
    pub examples: Tensor,
    pub labels: Option<Vec<usize>>,
    pub num_classes: usize,
    /// Per-example shape, e.g. `[1, 28, 28]` or `[2]`; its product is `P`.
    pub sample_shape: Vec<usize>,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn new(
        examples: Tensor,
        labels: Option<Vec<usize>>,
        num_classes: usize,
        sample_shape: Vec<usize>,
        normalization: Normalization,
    ) -> Result<Self> {
        let (n, p) = examples.dims2()?;
        if sample_shape.iter().product::<usize>() != p {
            return Err(Error::dim(
                "dataset",
                format!("sample shape {sample_shape:?} does not have {p} elements"),
            ));
        }
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::Contract(format!("{} labels for {n} examples", labels.len())));
            }
            if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
                return Err(Error::Contract(format!("label {bad} outside [0, {num_classes})")));
            }
        }
        Ok(Self {
            examples,
            labels,
            num_classes,
            sample_shape,
            normalization,
        })
    }

    pub fn len(&self) -> usize {
        self.examples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattened example length `P`.
    pub fn feature_len(&self) -> usize {
        self.examples.row_len()
    }

    pub fn labels(&self) -> Result<&[usize]> {
        self.labels
            .as_deref()
            .ok_or_else(|| Error::Contract("dataset has no labels".into()))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Ok(Dataset {
            examples: self.examples.select_rows(indices)?,
            labels,
            num_classes: self.num_classes,
            sample_shape: self.sample_shape.clone(),
            normalization: self.normalization,
        })
    }

    pub fn without_labels(mut self) -> Dataset {
        self.labels = None;
        self
    }
}

/// Applies a pixel normalization to a dataset whose values lie in `[0, 1]`.
pub fn normalize(ds: &Dataset, scheme: Normalization) -> Result<Dataset> {
    if let Some(v) = ds.examples.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Contract(format!(
            "normalization expects inputs in [0, 1], found {v}"
        )));
    }
    let examples = match scheme {
        Normalization::CenterHalf => ds.examples.map(|v| v - 0.5),
        Normalization::Unit => ds.examples.clone(),
        Normalization::Raw => {
            return Err(Error::Contract("`raw` is not a normalization scheme".into()));
        }
    };
    Ok(Dataset {
        examples,
        normalization: scheme,
        ..ds.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Split {
    pub labeled: Dataset,
    pub unlabeled: Option<Dataset>,
}

/// Draws a class-balanced labeled subset and a disjoint unlabeled subset.
///
/// Class quotas are `n_labeled / K`, with the remainder going to the lowest
/// class ids.
pub fn split(ds: &Dataset, spec: &SplitSpec) -> Result<Split> {
    let labels = ds.labels()?;
    if spec.n_labeled == 0 {
        return Err(Error::Contract("n_labeled must be at least 1".into()));
    }
    if spec.n_labeled + spec.n_unlabeled > ds.len() {
        return Err(Error::Contract(format!(
            "split of {} + {} exceeds {} examples",
            spec.n_labeled,
            spec.n_unlabeled,
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let k = ds.num_classes;
    let mut chosen = Vec::with_capacity(spec.n_labeled);
    let mut taken = vec![false; ds.len()];
    for (c, members) in by_class.iter_mut().enumerate() {
        let quota = spec.n_labeled / k + usize::from(c < spec.n_labeled % k);
        if quota > members.len() {
            return Err(Error::Contract(format!(
                "class {c} has {} examples, {quota} requested",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for &i in &members[..quota] {
            chosen.push(i);
            taken[i] = true;
        }
    }
    chosen.sort_unstable();
    let mut rest: Vec<usize> = (0..ds.len()).filter(|&i| !taken[i]).collect();
    rest.shuffle(&mut rng);
    rest.truncate(spec.n_unlabeled);
    rest.sort_unstable();

    let unlabeled = if rest.is_empty() {
        None
    } else {
        Some(ds.subset(&rest)?.without_labels())
    };
    Ok(Split {
        labeled: ds.subset(&chosen)?,
        unlabeled,
    })
}
