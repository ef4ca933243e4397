use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{config, Result};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ForgetSpec {
    RandomFraction { fraction: f64 },
    ClassWise { class: usize },
}

impl ForgetSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ForgetSpec::RandomFraction { .. } => "random_fraction",
            ForgetSpec::ClassWise { .. } => "class_wise",
        }
    }
}

/// Training data partitioned into forget and remain index sets, plus the held-out test set.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Dataset,
    pub test: Dataset,
    /// Ascending indices into `train`.
    pub forget: Vec<usize>,
    /// Ascending complement of `forget`.
    pub remain: Vec<usize>,
    pub kind: ForgetSpec,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn forget_set(&self) -> Dataset {
        self.train.subset(&self.forget)
    }

    pub fn remain_set(&self) -> Dataset {
        self.train.subset(&self.remain)
    }

    /// `forget ⊎ remain = 0..N`
    pub fn is_partition(&self) -> bool {
        let mut mark = vec![0u8; self.train.len()];
        for &i in self.forget.iter().chain(&self.remain) {
            match mark.get_mut(i) {
                Some(m) => *m += 1,
                None => return false,
            }
        }
        mark.iter().all(|&m| m == 1)
    }
}

pub fn split_forget(train: &Dataset, test: &Dataset, kind: ForgetSpec, seed: u64) -> Result<DatasetSplit> {
    let n = train.len();
    let forget: Vec<usize> = match kind {
        ForgetSpec::RandomFraction { fraction } => {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(config(format!("forget fraction {fraction} outside (0, 1)")));
            }
            let k = (fraction * n as f64).floor() as usize;
            let mut rng = stream(seed, Stream::Split);
            let mut idx = rand::seq::index::sample(&mut rng, n, k).into_vec();
            idx.sort_unstable();
            idx
        }
        ForgetSpec::ClassWise { class } => {
            let idx = train.class_indices(class);
            if idx.is_empty() {
                return Err(config(format!("class {class} does not occur in the training set")));
            }
            idx
        }
    };
    let mut in_forget = vec![false; n];
    for &i in &forget {
        in_forget[i] = true;
    }
    let remain = (0..n).filter(|&i| !in_forget[i]).collect();
    let split = DatasetSplit {
        train: train.clone(),
        test: test.clone(),
        forget,
        remain,
        kind,
        seed,
    };
    assert!(split.is_partition(), "forget/remain must partition the training set");
    Ok(split)
}
