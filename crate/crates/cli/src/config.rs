//! Run configuration: a JSON file plus `--set dotted.path=value` overrides.

use std::path::{Path, PathBuf};

use semu::adapter::SemuConfig;
use semu::data::{BlobsConfig, ForgetSpec};
use semu::diffusion::{DdpmTrainConfig, GenUnlearnConfig, MixtureConfig, ScheduleSpec};
use semu::nn::{Activation, LayerSpec, TrainConfig};
use semu::unlearn::UnlearnConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{io_at, CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Diffusion,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    /// Initialization and pretraining order.
    #[serde(default)]
    pub model_seed: u64,
    /// Dataset synthesis and the forget split.
    #[serde(default)]
    pub data_seed: u64,
    /// Relabeling, shuffling and sampling during unlearning.
    #[serde(default)]
    pub unlearn_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Blobs(BlobsConfig),
    Csv(CsvSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSpec {
    pub train: PathBuf,
    pub test: PathBuf,
    #[serde(default = "default_label_column")]
    pub label_column: String,
}

fn default_label_column() -> String {
    "label".to_string()
}

/// A ReLU MLP given by its hidden widths, or an explicit layer stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub layers: Option<Vec<LayerSpec>>,
}

impl ModelSpec {
    pub fn layer_specs(&self, in_features: usize, num_classes: usize) -> CliResult<Vec<LayerSpec>> {
        let specs = match &self.layers {
            Some(layers) => {
                if !self.hidden.is_empty() {
                    return Err(CliError::config("model: give either `hidden` or `layers`, not both"));
                }
                layers.clone()
            }
            None => mlp_specs(in_features, &self.hidden, num_classes),
        };
        semu::nn::validate_stack(&specs)?;
        let (first, last) = (specs[0].in_features(), specs[specs.len() - 1].out_features());
        if first != in_features || last != num_classes {
            return Err(CliError::config(format!(
                "model maps {first} -> {last} features but the data has {in_features} features and {num_classes} classes"
            )));
        }
        Ok(specs)
    }
}

pub fn mlp_specs(in_features: usize, hidden: &[usize], out: usize) -> Vec<LayerSpec> {
    let mut dims = vec![in_features];
    dims.extend_from_slice(hidden);
    dims.push(out);
    dims.windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i + 2 < dims.len() { Activation::Relu } else { Activation::None };
            LayerSpec::dense(w[0], w[1], act)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    #[serde(default)]
    pub mia_seed: u64,
    /// Generated samples per class when judging a generator.
    #[serde(default = "default_samples")]
    pub samples_per_class: usize,
    #[serde(default)]
    pub sample_seed: u64,
}

fn default_samples() -> usize {
    500
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            mia_seed: 0,
            samples_per_class: default_samples(),
            sample_seed: 0,
        }
    }
}

/// Frozen classifier that judges generated samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSpec {
    #[serde(default)]
    pub mixture: MixtureConfig,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub schedule: ScheduleSpec,
    pub train: DdpmTrainConfig,
    pub oracle: OracleSpec,
    /// Batch size for accumulating the forget gradient.
    #[serde(default = "default_forget_batch")]
    pub forget_batch_size: usize,
}

fn default_forget_batch() -> usize {
    128
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Task,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub semu: Option<SemuConfig>,
    #[serde(default)]
    pub eval: EvalSpec,
    #[serde(default)]
    pub dataset: Option<DatasetSpec>,
    #[serde(default)]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    /// Training of the retrain baseline; defaults to `train`.
    #[serde(default)]
    pub retrain: Option<TrainConfig>,
    #[serde(default)]
    pub forgetting: Option<ForgetSpec>,
    #[serde(default)]
    pub unlearn: Option<UnlearnConfig>,
    #[serde(default)]
    pub diffusion: Option<DiffusionSpec>,
    #[serde(default)]
    pub generation: Option<GenUnlearnConfig>,
}

fn require<'a, T>(section: &'a Option<T>, name: &str, task: Task) -> CliResult<&'a T> {
    section
        .as_ref()
        .ok_or_else(|| CliError::config(format!("missing field `{name}` (required for task {task:?})")))
}

impl RunConfig {
    pub fn dataset(&self) -> CliResult<&DatasetSpec> {
        require(&self.dataset, "dataset", self.task)
    }

    pub fn model(&self) -> CliResult<&ModelSpec> {
        require(&self.model, "model", self.task)
    }

    pub fn train(&self) -> CliResult<&TrainConfig> {
        require(&self.train, "train", self.task)
    }

    pub fn retrain(&self) -> CliResult<&TrainConfig> {
        self.retrain.as_ref().map_or_else(|| self.train(), Ok)
    }

    pub fn forgetting(&self) -> CliResult<ForgetSpec> {
        require(&self.forgetting, "forgetting", self.task).copied()
    }

    pub fn semu(&self) -> CliResult<&SemuConfig> {
        require(&self.semu, "semu", self.task)
    }

    /// The unlearning settings with the run's unlearn seed filled in.
    pub fn unlearn(&self) -> CliResult<UnlearnConfig> {
        let mut u = require(&self.unlearn, "unlearn", self.task)?.clone();
        u.seed = self.seeds.unlearn_seed;
        u.validate()?;
        Ok(u)
    }

    pub fn diffusion(&self) -> CliResult<&DiffusionSpec> {
        require(&self.diffusion, "diffusion", self.task)
    }

    pub fn generation(&self) -> CliResult<GenUnlearnConfig> {
        let mut g = require(&self.generation, "generation", self.task)?.clone();
        g.seed = self.seeds.unlearn_seed;
        g.validate(self.diffusion()?.mixture.num_classes)?;
        Ok(g)
    }

    pub fn expect_task(&self, task: Task) -> CliResult<()> {
        if self.task != task {
            return Err(CliError::config(format!(
                "this command needs task {task:?}, the config has {:?}",
                self.task
            )));
        }
        Ok(())
    }
}

/// Reads `path` (or starts from `{}`), applies the overrides in order and
/// deserializes. Errors name the offending field path.
pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<RunConfig> {
    let mut value = match path {
        Some(p) => {
            let text = io_at(p, std::fs::read_to_string(p))?;
            serde_json::from_str(&text)
                .map_err(|e| CliError::config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    for s in overrides {
        apply_override(&mut value, s)?;
    }
    from_value(value)
}

pub fn from_value(value: Value) -> CliResult<RunConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        if path == "." {
            CliError::config(e.inner().to_string())
        } else {
            CliError::config(format!("{path}: {}", e.inner()))
        }
    })
}

/// `a.b.c=value`; the value is parsed as JSON when possible and kept as a
/// string otherwise. Missing objects along the path are created and
/// numeric segments index arrays.
pub fn apply_override(root: &mut Value, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::config(format!("--set expects KEY=VALUE, got {assignment:?}")))?;
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(CliError::config(format!("--set: malformed key {key:?}")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let segments: Vec<&str> = key.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        node = match node {
            Value::Object(map) => {
                if last {
                    map.insert(seg.to_string(), value);
                    return Ok(());
                }
                map.entry(seg.to_string()).or_insert_with(|| Value::Object(Map::new()))
            }
            Value::Array(items) => {
                let idx: usize = seg
                    .parse()
                    .map_err(|_| CliError::config(format!("--set {key}: {seg:?} is not an array index")))?;
                let len = items.len();
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| CliError::config(format!("--set {key}: index {idx} out of range ({len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => {
                return Err(CliError::config(format!(
                    "--set {key}: `{}` is not an object",
                    segments[..i].join(".")
                )))
            }
        };
    }
    unreachable!("the loop returns on the last segment")
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_create_and_replace() {
        let mut v = json!({"unlearn": {"lr": 0.1}, "model": {"hidden": [4, 4]}});
        apply_override(&mut v, "unlearn.lr=0.5").unwrap();
        apply_override(&mut v, "unlearn.mode=with_remain").unwrap();
        apply_override(&mut v, "seeds.unlearn_seed=7").unwrap();
        apply_override(&mut v, "model.hidden.1=9").unwrap();
        assert_eq!(
            v,
            json!({
                "unlearn": {"lr": 0.5, "mode": "with_remain"},
                "model": {"hidden": [4, 9]},
                "seeds": {"unlearn_seed": 7}
            })
        );
        assert!(apply_override(&mut v, "unlearn.lr.x=1").is_err());
        assert!(apply_override(&mut v, "model.hidden.5=1").is_err());
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "a..b=1").is_err());
    }

    #[test]
    fn errors_name_the_field() {
        let err = from_value(json!({"task": "classification", "unlearn": {"lr": 0.1}})).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("unlearn") && msg.contains("epochs"), "{msg}");
        assert_eq!(err.exit_code(), 2);

        let msg = from_value(json!({"task": "classification", "train": {"epochs": "x"}}))
            .unwrap_err()
            .to_string();
        assert!(msg.contains("train.epochs"), "{msg}");

        let msg = from_value(json!({"task": "classification", "bogus": 1})).unwrap_err().to_string();
        assert!(msg.contains("bogus"), "{msg}");

        let msg = from_value(json!({})).unwrap_err().to_string();
        assert!(msg.contains("task"), "{msg}");
    }

    #[test]
    fn unlearn_seed_comes_from_seeds() {
        let cfg = from_value(json!({
            "task": "classification",
            "seeds": {"unlearn_seed": 5},
            "unlearn": {"epochs": 1, "lr": 0.1, "batch_size": 4}
        }))
        .unwrap();
        assert_eq!(cfg.unlearn().unwrap().seed, 5);
        assert!(from_value(json!({
            "task": "classification",
            "unlearn": {"epochs": 1, "lr": 0.1, "batch_size": 4, "seed": 3}
        }))
        .is_err());
        let msg = cfg.semu().unwrap_err().to_string();
        assert!(msg.contains("semu"), "{msg}");
    }

    #[test]
    fn model_spec_must_fit_the_data() {
        let m = ModelSpec {
            hidden: vec![8],
            layers: None,
        };
        let specs = m.layer_specs(2, 3).unwrap();
        assert_eq!(specs.len(), 2);
        let explicit = ModelSpec {
            hidden: vec![],
            layers: Some(mlp_specs(4, &[5], 3)),
        };
        assert!(explicit.layer_specs(2, 3).is_err());
    }
}
