//! Multi-cluster Gaussian classes on a sphere.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetPair, LabeledDataset, Split};
use crate::numerics::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub clusters_per_class: usize,
    pub dim: usize,
    pub samples_per_class: usize,
    pub cluster_spread: f64,
    pub cluster_separation: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            num_classes: 10,
            clusters_per_class: 2,
            dim: 32,
            samples_per_class: 200,
            cluster_spread: 0.5,
            cluster_separation: 3.0,
        }
    }
}

/// Each class is a mixture of `clusters_per_class` isotropic blobs whose
/// centers lie uniformly on the sphere of radius `cluster_separation`.
/// Samples are assigned to clusters round-robin and split 80/20 per class.
pub fn gen_synthetic_manifolds(cfg: &SyntheticConfig) -> Result<DatasetPair, DatasetError> {
    if cfg.num_classes == 0 || cfg.clusters_per_class == 0 || cfg.samples_per_class == 0 {
        return Err(DatasetError::Generator("all counts must be at least 1".into()));
    }
    if cfg.dim < 2 {
        return Err(DatasetError::Generator(format!("dim must be at least 2, got {}", cfg.dim)));
    }
    if cfg.samples_per_class < cfg.clusters_per_class {
        return Err(DatasetError::Generator(format!(
            "samples_per_class ({}) is smaller than clusters_per_class ({})",
            cfg.samples_per_class, cfg.clusters_per_class
        )));
    }
    if cfg.samples_per_class < 2 {
        return Err(DatasetError::Generator(
            "samples_per_class must be at least 2 so both splits hold every class".into(),
        ));
    }
    if !(cfg.cluster_spread > 0.0) || !(cfg.cluster_separation > 0.0) {
        return Err(DatasetError::Generator("spread and separation must be positive".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.cluster_spread).map_err(|e| DatasetError::Generator(e.to_string()))?;

    let mut train_rows = Vec::new();
    let mut train_labels = Vec::new();
    let mut test_rows = Vec::new();
    let mut test_labels = Vec::new();
    let n_test = ((cfg.samples_per_class as f64 * 0.2).round() as usize).clamp(1, cfg.samples_per_class - 1);

    for class in 0..cfg.num_classes {
        let centers: Vec<Vec<f64>> = (0..cfg.clusters_per_class)
            .map(|_| {
                let raw: Vec<f64> = (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = raw.iter().map(|x| x * x).sum::<f64>().sqrt();
                raw.iter().map(|x| x / norm * cfg.cluster_separation).collect()
            })
            .collect();
        let mut samples: Vec<Vec<f64>> = (0..cfg.samples_per_class)
            .map(|j| {
                let c = &centers[j % cfg.clusters_per_class];
                c.iter().map(|&m| m + noise.sample(&mut rng)).collect()
            })
            .collect();
        samples.shuffle(&mut rng);
        for (j, s) in samples.into_iter().enumerate() {
            if j < n_test {
                test_rows.push(s);
                test_labels.push(class);
            } else {
                train_rows.push(s);
                train_labels.push(class);
            }
        }
    }

    let train = LabeledDataset::new(Tensor::from_rows(&train_rows)?, train_labels, cfg.num_classes, Split::Train)?;
    let test = LabeledDataset::new(Tensor::from_rows(&test_rows)?, test_labels, cfg.num_classes, Split::Test)?;
    DatasetPair::new(train, test)
}
