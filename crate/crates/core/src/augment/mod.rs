//! Virtual training samples.
//!
//! Each epoch the training indices are shuffled and cut into groups of `n`
//! (the last group padded with black slots), every slot is independently
//! blacked out with probability `p`, and each group becomes a [`SampleSet`]
//! whose label is the sum of its real members' labels.

mod geometric;

pub use geometric::{flip, random_geometric_augment, rotate, translate, AugmentationConfig};

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Real(usize),
    Black,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub slots: Vec<Slot>,
    pub virtual_label: f64,
}

impl SampleSet {
    /// Builds a set whose label is the sum of `labels` over its real slots.
    pub fn new(slots: Vec<Slot>, labels: &[f64]) -> Self {
        let virtual_label = virtual_label(&Self::real_labels(&slots, labels));
        Self {
            slots,
            virtual_label,
        }
    }

    fn real_labels(slots: &[Slot], labels: &[f64]) -> Vec<f64> {
        slots
            .iter()
            .filter_map(|s| match s {
                Slot::Real(i) => Some(labels[*i]),
                Slot::Black => None,
            })
            .collect()
    }

    pub fn real_indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.slots.iter().filter_map(|s| match s {
            Slot::Real(i) => Some(*i),
            Slot::Black => None,
        })
    }

    /// Whether the stored label still equals the sum over the real slots.
    pub fn label_consistent(&self, labels: &[f64]) -> bool {
        virtual_label(&Self::real_labels(&self.slots, labels)) == self.virtual_label
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetSamplerConfig {
    /// Slots per set.
    pub n: usize,
    /// Probability that a slot is replaced by a black image.
    pub p: f64,
    /// Draw real samples with replacement instead of permuting the epoch.
    pub with_replacement: bool,
    pub seed: u64,
}

impl SetSamplerConfig {
    pub fn new(n: usize, p: f64) -> Self {
        Self {
            n,
            p,
            with_replacement: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::invalid("set size n must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::invalid(format!(
                "black-substitution probability p must lie in [0, 1], got {}",
                self.p
            )));
        }
        Ok(())
    }

    /// Expected number of real images per set, `n (1 - p)`.
    pub fn expected_real_slots(&self) -> f64 {
        self.n as f64 * (1.0 - self.p)
    }
}

/// Slot layouts for one epoch over `m` samples: a permutation cut into
/// `ceil(m / n)` sets, the last padded with black slots, then each slot
/// independently blacked out with probability `p`.
pub fn epoch_slots<R: Rng + ?Sized>(
    m: usize,
    config: &SetSamplerConfig,
    rng: &mut R,
) -> Result<Vec<Vec<Slot>>> {
    config.validate()?;
    if m == 0 {
        return Err(Error::invalid(
            "cannot build sets from an empty training split",
        ));
    }
    let n = config.n;
    let order: Vec<usize> = if config.with_replacement {
        let sets = m.div_ceil(n);
        (0..sets * n).map(|_| rng.random_range(0..m)).collect()
    } else {
        permutation(m, rng)
    };
    let mut sets: Vec<Vec<Slot>> = order
        .chunks(n)
        .map(|chunk| {
            let mut slots: Vec<Slot> = chunk.iter().map(|&i| Slot::Real(i)).collect();
            slots.resize(n, Slot::Black);
            slots
        })
        .collect();
    if config.p > 0.0 {
        for slot in sets.iter_mut().flatten() {
            // padding slots draw too, so the stream does not depend on m mod n
            let black = rng.random::<f64>() < config.p;
            if black {
                *slot = Slot::Black;
            }
        }
    }
    Ok(sets)
}

/// Uniformly random ordering of `0..m`. Every per-sample training path
/// visits its epoch in this order, so paths that agree on the generator agree
/// on the order.
pub fn permutation<R: Rng + ?Sized>(m: usize, rng: &mut R) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(rng);
    order
}

/// One epoch of labelled virtual samples over `labels.len()` training images.
pub fn make_epoch_sets<R: Rng + ?Sized>(
    labels: &[f64],
    config: &SetSamplerConfig,
    rng: &mut R,
) -> Result<Vec<SampleSet>> {
    Ok(epoch_slots(labels.len(), config, rng)?
        .into_iter()
        .map(|slots| SampleSet::new(slots, labels))
        .collect())
}

/// Label of a virtual sample: the sum of its real members' labels.
pub fn virtual_label(labels: &[f64]) -> f64 {
    labels.iter().sum()
}

/// Number of distinct non-empty sets of at most `n` out of `m` samples,
/// `sum_{i=1..n} C(m, i)`.
pub fn count_combinations(m: u64, n: u64) -> Result<BigUint> {
    if n == 0 || n > m {
        return Err(Error::invalid(format!(
            "count_combinations needs 1 <= n <= m, got m={m}, n={n}"
        )));
    }
    let mut total = BigUint::from(0u32);
    let mut binom = BigUint::from(1u32);
    for i in 1..=n {
        // C(m, i) = C(m, i-1) * (m - i + 1) / i, exact at every step
        binom = binom * (m - i + 1) / i;
        total += &binom;
    }
    Ok(total)
}

/// Linear interpolation of two samples and their labels with weight `lambda`
/// on the first.
pub fn mixup_pair(
    x1: &Tensor,
    y1: f64,
    x2: &Tensor,
    y2: f64,
    lambda: f64,
) -> Result<(Tensor, f64)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!(
            "mixup lambda must lie in [0, 1], got {lambda}"
        )));
    }
    let mixed = x1.zip_map(x2, |a, b| lambda * a + (1.0 - lambda) * b)?;
    Ok((mixed, lambda * y1 + (1.0 - lambda) * y2))
}
