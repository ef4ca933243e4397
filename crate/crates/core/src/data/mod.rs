//! Labeled datasets, synthetic blobs, CSV persistence, and forget/remain splits.

mod csv_io;
mod split;

pub use csv_io::{load_csv, write_csv, LabelMapping};
pub use split::{split_forget, DatasetSplit, ForgetSpec};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{config, invalid, Result};
use crate::linalg::Matrix;
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// One row per sample.
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Dataset> {
        if features.rows() != labels.len() {
            return Err(invalid(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(invalid(format!("label {y} out of range for {num_classes} classes")));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn batch(&self, idx: &[usize]) -> (Matrix, Vec<usize>) {
        (
            self.features.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Samples of `self` followed by samples of `other`.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim() != other.dim() && !self.is_empty() && !other.is_empty() {
            return Err(invalid("cannot concatenate datasets of different dimension"));
        }
        let dim = if self.is_empty() { other.dim() } else { self.dim() };
        let mut data = self.features.as_slice().to_vec();
        data.extend_from_slice(other.features.as_slice());
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&other.labels);
        Dataset::new(
            Matrix::from_vec(labels.len(), dim, data)?,
            labels,
            self.num_classes.max(other.num_classes),
        )
    }

    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobsConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    /// Minimum pairwise center distance in units of `sigma`.
    pub separation: f64,
    pub sigma: f64,
}

impl Default for BlobsConfig {
    fn default() -> Self {
        BlobsConfig {
            num_classes: 8,
            per_class: 250,
            dim: 2,
            separation: 6.0,
            sigma: 1.0,
        }
    }
}

const PLACEMENT_ATTEMPTS: usize = 1000;

/// Isotropic Gaussian clusters with a stratified 80/20 train/test split.
pub fn make_blobs(cfg: &BlobsConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    if cfg.num_classes == 0 || cfg.per_class == 0 || cfg.dim == 0 {
        return Err(config("blobs: num_classes, per_class and dim must be positive"));
    }
    if !(cfg.sigma > 0.0 && cfg.separation > 0.0) {
        return Err(config("blobs: sigma and separation must be positive"));
    }
    let mut rng = stream(seed, Stream::Blobs);
    let min_dist = cfg.separation * cfg.sigma;
    // Centers live in a box whose volume grows with the class count; large
    // separations relative to it are infeasible.
    let half_width = 5.0 * cfg.sigma * (cfg.num_classes as f64).powf(1.0 / cfg.dim as f64);
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_classes);
    for k in 0..cfg.num_classes {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c: Vec<f64> = (0..cfg.dim)
                .map(|_| rng.random_range(-half_width..=half_width))
                .collect();
            let ok = centers.iter().all(|o| {
                o.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() >= min_dist
            });
            if ok {
                centers.push(c);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(config(format!(
                "blobs: could not place center {k} at separation {} in dim {} after {PLACEMENT_ATTEMPTS} attempts",
                cfg.separation, cfg.dim
            )));
        }
    }

    let n_train = cfg.per_class * 4 / 5;
    let (mut train_x, mut train_y, mut test_x, mut test_y) = (vec![], vec![], vec![], vec![]);
    for (k, c) in centers.iter().enumerate() {
        for i in 0..cfg.per_class {
            let (xs, ys) = if i < n_train {
                (&mut train_x, &mut train_y)
            } else {
                (&mut test_x, &mut test_y)
            };
            for &ci in c {
                let z: f64 = rng.sample(StandardNormal);
                xs.push(ci + cfg.sigma * z);
            }
            ys.push(k);
        }
    }
    let train = Dataset::new(
        Matrix::from_vec(train_y.len(), cfg.dim, train_x)?,
        train_y,
        cfg.num_classes,
    )?;
    let test = Dataset::new(
        Matrix::from_vec(test_y.len(), cfg.dim, test_x)?,
        test_y,
        cfg.num_classes,
    )?;
    Ok((train, test))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eighty_twenty_stratified() {
        let cfg = BlobsConfig {
            per_class: 100,
            ..BlobsConfig::default()
        };
        let (train, test) = make_blobs(&cfg, 1).unwrap();
        assert_eq!((train.len(), test.len()), (640, 160));
        for k in 0..8 {
            assert_eq!(train.class_indices(k).len(), 80);
            assert_eq!(test.class_indices(k).len(), 20);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let cfg = BlobsConfig::default();
        assert_eq!(make_blobs(&cfg, 5).unwrap(), make_blobs(&cfg, 5).unwrap());
        assert_ne!(make_blobs(&cfg, 5).unwrap().0, make_blobs(&cfg, 6).unwrap().0);
    }

    #[test]
    fn tight_clusters_are_linearly_separable() {
        let cfg = BlobsConfig {
            sigma: 1e-6,
            per_class: 20,
            ..BlobsConfig::default()
        };
        let (train, test) = make_blobs(&cfg, 3).unwrap();
        // nearest class mean is a linear classifier
        let means: Vec<Vec<f64>> = (0..cfg.num_classes)
            .map(|k| {
                let idx = train.class_indices(k);
                (0..2)
                    .map(|d| idx.iter().map(|&i| train.features[(i, d)]).sum::<f64>() / idx.len() as f64)
                    .collect()
            })
            .collect();
        for i in 0..test.len() {
            let x = test.features.row(i);
            let pred = (0..cfg.num_classes)
                .min_by(|&a, &b| {
                    let da: f64 = means[a].iter().zip(x).map(|(m, v)| (m - v).powi(2)).sum();
                    let db: f64 = means[b].iter().zip(x).map(|(m, v)| (m - v).powi(2)).sum();
                    da.total_cmp(&db)
                })
                .unwrap();
            assert_eq!(pred, test.labels[i]);
        }
    }

    #[test]
    fn infeasible_separation_is_reported() {
        let cfg = BlobsConfig {
            num_classes: 3,
            dim: 1,
            separation: 6.0,
            ..BlobsConfig::default()
        };
        assert!(make_blobs(&cfg, 0).is_ok());
        let cfg = BlobsConfig {
            num_classes: 40,
            dim: 1,
            separation: 100.0,
            ..cfg
        };
        assert!(matches!(make_blobs(&cfg, 0), Err(crate::Error::Config(_))));
    }
}
