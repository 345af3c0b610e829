//! Class-disjoint task streams (B-base / Inc-k protocols).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetPair};

/// Exemplar budget policy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryPolicy {
    /// At most `budget` exemplars in total, rebalanced across seen classes.
    FixedTotal(usize),
    /// At most `count` exemplars per class.
    PerClass(usize),
}

impl MemoryPolicy {
    /// Per-class quota once `seen_classes` classes are known.
    pub fn quota(&self, seen_classes: usize) -> usize {
        match *self {
            MemoryPolicy::FixedTotal(budget) => budget.checked_div(seen_classes).unwrap_or(budget),
            MemoryPolicy::PerClass(count) => count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskProtocol {
    pub base_classes: usize,
    pub increment: usize,
    /// Explicit class order; `None` shuffles the classes with the split seed.
    pub class_order: Option<Vec<usize>>,
    pub memory: MemoryPolicy,
}

impl TaskProtocol {
    /// Number of tasks for `num_classes`, validating `b + m·k = C` with `m ≥ 1`.
    pub fn num_tasks(&self, num_classes: usize) -> Result<usize, DatasetError> {
        if self.increment == 0 {
            return Err(DatasetError::Protocol("increment must be at least 1".into()));
        }
        if self.base_classes >= num_classes {
            return Err(DatasetError::Protocol(format!(
                "base classes ({}) must be fewer than the total ({num_classes})",
                self.base_classes
            )));
        }
        let rest = num_classes - self.base_classes;
        if rest % self.increment != 0 {
            return Err(DatasetError::Protocol(format!(
                "{rest} remaining classes are not divisible into increments of {}",
                self.increment
            )));
        }
        let m = rest / self.increment;
        Ok(if self.base_classes == 0 { m } else { m + 1 })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub classes: Vec<usize>,
    /// Row indices into the training split.
    pub train_indices: Vec<usize>,
    /// Row indices into the test split.
    pub test_indices: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub tasks: Vec<Task>,
    pub class_order: Vec<usize>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    /// Classes seen after task `t` (0-based), in arrival order.
    pub fn seen_classes(&self, t: usize) -> Vec<usize> {
        self.tasks[..=t].iter().flat_map(|task| task.classes.iter().copied()).collect()
    }

    /// Test rows of every class seen by task `t` (0-based), sorted.
    pub fn cumulative_test(&self, t: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = self.tasks[..=t]
            .iter()
            .flat_map(|task| task.test_indices.iter().copied())
            .collect();
        idx.sort_unstable();
        idx
    }
}

/// Partitions the classes of `data` into tasks.
pub fn split_tasks(data: &DatasetPair, protocol: &TaskProtocol, seed: u64) -> Result<TaskStream, DatasetError> {
    let num_classes = data.num_classes();
    let num_tasks = protocol.num_tasks(num_classes)?;
    let class_order = match &protocol.class_order {
        Some(order) => {
            let mut sorted = order.clone();
            sorted.sort_unstable();
            if sorted != (0..num_classes).collect::<Vec<_>>() {
                return Err(DatasetError::Protocol(format!(
                    "class order must be a permutation of 0..{num_classes}"
                )));
            }
            order.clone()
        }
        None => {
            let mut order: Vec<usize> = (0..num_classes).collect();
            order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            order
        }
    };

    let mut tasks = Vec::with_capacity(num_tasks);
    let mut start = 0;
    for t in 0..num_tasks {
        let size = if t == 0 && protocol.base_classes > 0 {
            protocol.base_classes
        } else {
            protocol.increment
        };
        let classes = class_order[start..start + size].to_vec();
        start += size;
        tasks.push(Task {
            train_indices: data.train.indices_of(&classes),
            test_indices: data.test.indices_of(&classes),
            classes,
        });
    }
    Ok(TaskStream { tasks, class_order })
}
