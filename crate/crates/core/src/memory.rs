//! Exemplar memory: per-class stored training samples under a budget.
//!
//! Each class keeps its exemplars in selection order, so a prefix of the
//! list is itself a valid (smaller) selection. Shrinking quotas truncate.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasets::MemoryPolicy;
use crate::numerics::{Checkpoint, CheckpointError, NumericsError, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    #[default]
    Herding,
    Random,
}

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("class {0} is already stored in memory")]
    DuplicateClass(usize),
    #[error("class {class}: {samples} sample row(s), {features} feature row(s), {indices} index(es)")]
    Misaligned {
        class: usize,
        samples: usize,
        features: usize,
        indices: usize,
    },
    #[error("per-class subset size must be at least 1")]
    EmptySubset,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Stored exemplars of one class, in selection order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassExemplars {
    /// Row indices into the source training split.
    pub indices: Vec<usize>,
    /// Verbatim copies of the source rows.
    pub samples: Tensor,
}

impl ClassExemplars {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    fn truncate(&mut self, n: usize) {
        if n < self.len() {
            self.indices.truncate(n);
            let keep: Vec<usize> = (0..n).collect();
            self.samples = self.samples.select_rows(&keep);
        }
    }
}

/// Training rows of one new class offered to [`ExemplarMemory::update`].
#[derive(Clone, Debug)]
pub struct ClassCandidates {
    pub class: usize,
    /// Row indices into the source training split.
    pub indices: Vec<usize>,
    pub samples: Tensor,
    /// Features of `samples` under the current extractor.
    pub features: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExemplarMemory {
    pub policy: MemoryPolicy,
    pub selection: Selection,
    per_class: BTreeMap<usize, ClassExemplars>,
}

/// Greedy herding over `features`; returns up to `k` row positions in pick order.
///
/// At step `j` the row minimising `‖μ − (S + f)/j‖` is taken, where `μ` is
/// the mean of all rows and `S` the sum of rows picked so far. Rows are
/// visited in the order of `keys` and ties keep the smallest key, so the
/// result does not depend on the input order.
pub fn herding_select(features: &Tensor, keys: &[usize], k: usize) -> Vec<usize> {
    let n = features.rows();
    let d = features.cols();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| keys[i]);
    let mut mean = vec![0.0; d];
    for &i in &order {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n.max(1) as f64;
    }
    let mut picked = Vec::with_capacity(k.min(n));
    let mut taken = vec![false; n];
    let mut sum = vec![0.0; d];
    for step in 1..=k.min(n) {
        let mut best: Option<(usize, f64)> = None;
        for &i in &order {
            if taken[i] {
                continue;
            }
            let dist: f64 = features
                .row(i)
                .iter()
                .zip(&sum)
                .zip(&mean)
                .map(|((f, s), m)| {
                    let diff = m - (s + f) / step as f64;
                    diff * diff
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("candidate available");
        taken[i] = true;
        for (s, f) in sum.iter_mut().zip(features.row(i)) {
            *s += f;
        }
        picked.push(i);
    }
    picked
}

/// Uniform selection without replacement of up to `k` positions, visiting rows in key order.
pub fn random_select(keys: &[usize], k: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by_key(|&i| keys[i]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    index::sample(&mut rng, order.len(), k.min(order.len()))
        .into_iter()
        .map(|j| order[j])
        .collect()
}

impl ExemplarMemory {
    pub fn new(policy: MemoryPolicy, selection: Selection) -> Self {
        Self {
            policy,
            selection,
            per_class: BTreeMap::new(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.per_class.len()
    }

    pub fn total(&self) -> usize {
        self.per_class.values().map(ClassExemplars::len).sum()
    }

    pub fn class(&self, class: usize) -> Option<&ClassExemplars> {
        self.per_class.get(&class)
    }

    pub fn classes(&self) -> impl Iterator<Item = (usize, &ClassExemplars)> {
        self.per_class.iter().map(|(&c, e)| (c, e))
    }

    /// Adds new classes and rebalances to the current quota.
    ///
    /// Under [`MemoryPolicy::FixedTotal`] every stored class is truncated to
    /// `floor(budget / C_t)`. Classes with fewer rows than the quota keep all.
    pub fn update(&mut self, new_classes: &[ClassCandidates], seed: u64) -> Result<(), MemoryError> {
        for cand in new_classes {
            if self.per_class.contains_key(&cand.class) {
                return Err(MemoryError::DuplicateClass(cand.class));
            }
            let (s, f, i) = (cand.samples.rows(), cand.features.rows(), cand.indices.len());
            if s != f || s != i {
                return Err(MemoryError::Misaligned {
                    class: cand.class,
                    samples: s,
                    features: f,
                    indices: i,
                });
            }
        }
        let quota = self.policy.quota(self.per_class.len() + new_classes.len());
        for ex in self.per_class.values_mut() {
            ex.truncate(quota);
        }
        for cand in new_classes {
            let picked = match self.selection {
                Selection::Herding => herding_select(&cand.features, &cand.indices, quota),
                Selection::Random => random_select(&cand.indices, quota, seed ^ (cand.class as u64).wrapping_mul(0x9e37_79b9)),
            };
            self.per_class.insert(
                cand.class,
                ClassExemplars {
                    indices: picked.iter().map(|&p| cand.indices[p]).collect(),
                    samples: cand.samples.select_rows(&picked),
                },
            );
        }
        Ok(())
    }

    /// Every stored exemplar as `(samples, labels)`, classes ascending.
    pub fn all_samples(&self) -> (Tensor, Vec<usize>) {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (&c, ex) in &self.per_class {
            for r in 0..ex.len() {
                rows.push(ex.samples.row(r).to_vec());
                labels.push(c);
            }
        }
        (stack(&rows, self.sample_dim()), labels)
    }

    fn sample_dim(&self) -> usize {
        self.per_class.values().next().map_or(0, |e| e.samples.cols())
    }

    /// Class-balanced subset: up to `per_class` rows of every seen class.
    ///
    /// Classes present in `current` are drawn from it; all other stored
    /// classes are drawn from memory. Output is grouped by class, ascending.
    pub fn balanced_subset(
        &self,
        current: &Tensor,
        current_labels: &[usize],
        per_class: usize,
        seed: u64,
    ) -> Result<(Tensor, Vec<usize>), MemoryError> {
        if per_class == 0 {
            return Err(MemoryError::EmptySubset);
        }
        let mut by_class: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
        for (r, &y) in current_labels.iter().enumerate() {
            by_class.entry(y).or_default().push(current.row(r));
        }
        for (&c, ex) in &self.per_class {
            if !by_class.contains_key(&c) {
                by_class.insert(c, (0..ex.len()).map(|r| ex.samples.row(r)).collect());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, mut pool) in by_class {
            pool.shuffle(&mut rng);
            for row in pool.into_iter().take(per_class) {
                rows.push(row.to_vec());
                labels.push(c);
            }
        }
        let dim = current.cols().max(self.sample_dim());
        Ok((stack(&rows, dim), labels))
    }

    /// Stores `memory/<class>/indices` and `memory/<class>/samples`.
    pub fn write_checkpoint(&self, ck: &mut Checkpoint) {
        ck.set_meta("memory_classes", self.per_class.keys().map(usize::to_string).collect::<Vec<_>>().join(","));
        for (&c, ex) in &self.per_class {
            let idx = Tensor::row_vector(ex.indices.iter().map(|&i| i as f64).collect());
            ck.insert(format!("memory/{c}/indices"), idx);
            ck.insert(format!("memory/{c}/samples"), ex.samples.clone());
        }
    }

    pub fn read_checkpoint(ck: &Checkpoint, policy: MemoryPolicy, selection: Selection) -> Result<Self, MemoryError> {
        let mut mem = Self::new(policy, selection);
        let listed = ck.meta("memory_classes")?;
        for part in listed.split(',').filter(|s| !s.is_empty()) {
            let c: usize = part
                .parse()
                .map_err(|_| CheckpointError::Invalid(format!("bad memory class `{part}`")))?;
            let indices = ck.tensor(&format!("memory/{c}/indices"))?.data().iter().map(|&v| v as usize).collect();
            let samples = ck.tensor(&format!("memory/{c}/samples"))?.clone();
            mem.per_class.insert(c, ClassExemplars { indices, samples });
        }
        Ok(mem)
    }
}

fn stack(rows: &[Vec<f64>], dim: usize) -> Tensor {
    if rows.is_empty() {
        return Tensor::zeros(&[0, dim]);
    }
    Tensor::from_rows(rows).expect("rows share a width")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn candidates(class: usize, n: usize, offset: f64) -> ClassCandidates {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![offset + i as f64, (i * i) as f64 * 0.1]).collect();
        let samples = Tensor::from_rows(&rows).unwrap();
        ClassCandidates {
            class,
            indices: (0..n).map(|i| class * 100 + i).collect(),
            features: samples.clone(),
            samples,
        }
    }

    #[test]
    fn herding_first_pick_is_nearest_to_mean() {
        let f = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![10.0, 10.0]]).unwrap();
        assert_eq!(herding_select(&f, &[0, 1, 2], 1), vec![1]);
    }

    #[test]
    fn herding_is_order_independent() {
        let rows = vec![vec![0.3, 1.0], vec![2.0, -1.0], vec![0.7, 0.2], vec![-1.5, 0.4], vec![0.1, 0.1]];
        let f = Tensor::from_rows(&rows).unwrap();
        let keys = [10, 11, 12, 13, 14];
        let a: Vec<usize> = herding_select(&f, &keys, 3).iter().map(|&p| keys[p]).collect();
        let perm = [3, 0, 4, 2, 1];
        let g = f.select_rows(&perm);
        let pk: Vec<usize> = perm.iter().map(|&p| keys[p]).collect();
        let b: Vec<usize> = herding_select(&g, &pk, 3).iter().map(|&p| pk[p]).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn fixed_total_budget() {
        let mut m = ExemplarMemory::new(MemoryPolicy::FixedTotal(10), Selection::Herding);
        let new: Vec<ClassCandidates> = (0..5).map(|c| candidates(c, 6, c as f64 * 10.0)).collect();
        m.update(&new, 0).unwrap();
        assert!(m.classes().all(|(_, e)| e.len() == 2));
        assert_eq!(m.total(), 10);
    }

    #[test]
    fn shrinking_quota_keeps_prefix() {
        let mut m = ExemplarMemory::new(MemoryPolicy::FixedTotal(12), Selection::Herding);
        m.update(&[candidates(0, 20, 0.0), candidates(1, 20, 5.0)], 0).unwrap();
        let before = m.class(0).unwrap().clone();
        m.update(&[candidates(2, 20, 9.0), candidates(3, 20, 3.0)], 0).unwrap();
        let after = m.class(0).unwrap();
        assert_eq!(after.len(), 3);
        assert_eq!(after.indices[..], before.indices[..3]);
        assert!(m.total() <= 12);
    }

    #[test]
    fn per_class_policy_and_small_classes() {
        let mut m = ExemplarMemory::new(MemoryPolicy::PerClass(20), Selection::Random);
        m.update(&[candidates(0, 50, 0.0), candidates(1, 7, 1.0)], 3).unwrap();
        assert_eq!(m.class(0).unwrap().len(), 20);
        assert_eq!(m.class(1).unwrap().len(), 7);
        assert!(matches!(m.update(&[candidates(1, 3, 0.0)], 0), Err(MemoryError::DuplicateClass(1))));
    }

    #[test]
    fn exemplars_are_verbatim_rows() {
        let mut m = ExemplarMemory::new(MemoryPolicy::PerClass(4), Selection::Herding);
        let c = candidates(2, 9, 1.0);
        m.update(std::slice::from_ref(&c), 0).unwrap();
        let ex = m.class(2).unwrap();
        for (r, &src) in ex.indices.iter().enumerate() {
            assert_eq!(ex.samples.row(r), c.samples.row(src - 200));
        }
    }

    #[test]
    fn balanced_subset_counts() {
        let mut m = ExemplarMemory::new(MemoryPolicy::PerClass(3), Selection::Herding);
        m.update(&[candidates(0, 10, 0.0), candidates(1, 10, 4.0)], 0).unwrap();
        let cur = candidates(2, 8, 8.0);
        let labels = vec![2; 8];
        let (x, y) = m.balanced_subset(&cur.samples, &labels, 5, 11).unwrap();
        let count = |c| y.iter().filter(|&&l| l == c).count();
        assert_eq!((count(0), count(1), count(2)), (3, 3, 5));
        assert_eq!(x.rows(), 11);
        assert_eq!(m.balanced_subset(&cur.samples, &labels, 5, 11).unwrap(), (x, y));
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = ExemplarMemory::new(MemoryPolicy::PerClass(3), Selection::Herding);
        m.update(&[candidates(0, 10, 0.0), candidates(4, 10, 4.0)], 0).unwrap();
        let mut ck = Checkpoint::new();
        m.write_checkpoint(&mut ck);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(ExemplarMemory::read_checkpoint(&back, m.policy, m.selection).unwrap(), m);
    }
}
