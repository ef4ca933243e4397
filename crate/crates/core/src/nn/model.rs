use std::borrow::Cow;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers;
use super::spec::{validate_stack, Activation, LayerSpec};
use crate::error::{invalid, Result};
use crate::linalg::Matrix;
use crate::rng::{stream, Stream};

pub const CHECKPOINT_FORMAT: &str = "semu-ckpt-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Feed-forward stack of dense/conv layers; the last layer emits logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub num_classes: usize,
    pub seed: u64,
}

/// Per-layer gradients, shaped exactly like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

/// Activations recorded during a forward pass for backpropagation.
pub struct Trace {
    inputs: Vec<Matrix>,
    pre: Vec<Matrix>,
    pub output: Matrix,
}

/// He-uniform weights (bound `√(6/fan_in)`) and zero biases.
pub fn init_model(specs: &[LayerSpec], seed: u64) -> Result<Model> {
    validate_stack(specs)?;
    let mut rng = stream(seed, Stream::Init);
    let layers = specs
        .iter()
        .map(|spec| {
            let (rows, cols) = spec.weight_shape();
            let bound = (6.0 / spec.fan_in() as f64).sqrt();
            let weight = Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound));
            Layer {
                spec: *spec,
                weight,
                bias: vec![0.0; rows],
            }
        })
        .collect();
    Ok(Model {
        layers,
        num_classes: specs.last().map(LayerSpec::out_features).unwrap_or(0),
        seed,
    })
}

impl Model {
    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn in_features(&self) -> usize {
        self.layers[0].spec.in_features()
    }

    pub fn weight_param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for layer in &self.layers {
            let mut z = layers::forward(&layer.spec, &layer.weight, &layer.bias, &h);
            if layer.spec.activation() == Activation::Relu {
                z.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_trace(&self, x: &Matrix) -> Result<Trace> {
        self.check_input(x)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for layer in &self.layers {
            let z = layers::forward(&layer.spec, &layer.weight, &layer.bias, &h);
            let mut a = z.clone();
            if layer.spec.activation() == Activation::Relu {
                a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            inputs.push(h);
            pre.push(z);
            h = a;
        }
        Ok(Trace {
            inputs,
            pre,
            output: h,
        })
    }

    /// Backpropagates `d_output` (gradient of the loss w.r.t. the model output).
    pub fn backward(&self, trace: &Trace, d_output: &Matrix) -> Result<GradientSet> {
        if d_output.shape() != trace.output.shape() {
            return Err(invalid(format!(
                "output gradient {}x{} does not match output {}x{}",
                d_output.rows(),
                d_output.cols(),
                trace.output.rows(),
                trace.output.cols()
            )));
        }
        let n = self.layers.len();
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        let mut d = d_output.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if layer.spec.activation() == Activation::Relu {
                for (g, &z) in d.as_mut_slice().iter_mut().zip(trace.pre[i].as_slice()) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let g = layers::backward(&layer.spec, &layer.weight, &trace.inputs[i], &d);
            weights.push(g.weight);
            biases.push(g.bias);
            d = g.input;
        }
        weights.reverse();
        biases.reverse();
        Ok(GradientSet { weights, biases })
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.in_features() {
            return Err(invalid(format!(
                "input has {} features, model expects {}",
                x.cols(),
                self.in_features()
            )));
        }
        if !x.is_finite() {
            return Err(invalid("input contains non-finite values"));
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            layers: self.layers.iter().map(LayerRecord::from).collect(),
            num_classes: self.num_classes,
            seed: self.seed,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Model> {
        ckpt.check_format()?;
        let model = model_from_records(&ckpt.layers, ckpt.seed)?;
        if model.num_classes != ckpt.num_classes {
            return Err(invalid(format!(
                "checkpoint num_classes {} but last layer emits {}",
                ckpt.num_classes, model.num_classes
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.to_checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Model> {
        let text = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        Model::from_checkpoint(&ckpt)
    }
}

pub(crate) fn model_from_records(records: &[LayerRecord], seed: u64) -> Result<Model> {
    let specs: Vec<LayerSpec> = records.iter().map(|r| r.spec).collect();
    validate_stack(&specs).map_err(|e| invalid(e.to_string()))?;
    let mut layers = Vec::with_capacity(records.len());
    for (i, r) in records.iter().enumerate() {
        let (rows, cols) = r.spec.weight_shape();
        if r.weight.shape() != (rows, cols) || r.bias.len() != rows {
            return Err(invalid(format!(
                "layer {i}: weight {}x{} / bias {} do not match spec {rows}x{cols}",
                r.weight.rows(),
                r.weight.cols(),
                r.bias.len()
            )));
        }
        if !r.weight.is_finite() || r.bias.iter().any(|b| !b.is_finite()) {
            return Err(invalid(format!("layer {i}: non-finite parameters")));
        }
        layers.push(Layer {
            spec: r.spec,
            weight: r.weight.clone(),
            bias: r.bias.clone(),
        });
    }
    let num_classes = specs.last().map(LayerSpec::out_features).unwrap_or(0);
    Ok(Model {
        layers,
        num_classes,
        seed,
    })
}

/// One layer as stored on disk: the spec fields plus `weight` and `bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    #[serde(flatten)]
    pub spec: LayerSpec,
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl From<&Layer> for LayerRecord {
    fn from(l: &Layer) -> Self {
        LayerRecord {
            spec: l.spec,
            weight: l.weight.clone(),
            bias: l.bias.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub layers: Vec<LayerRecord>,
    pub num_classes: usize,
    pub seed: u64,
}

impl Checkpoint {
    pub(crate) fn check_format(&self) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(invalid(format!(
                "unsupported checkpoint format {:?}, expected {CHECKPOINT_FORMAT:?}",
                self.format
            )));
        }
        Ok(())
    }
}

impl GradientSet {
    pub fn zeros_like(model: &Model) -> GradientSet {
        GradientSet {
            weights: model
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
            biases: model.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) -> Result<()> {
        self.axpy(1.0, other)
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &GradientSet) -> Result<()> {
        if self.weights.len() != other.weights.len() {
            return Err(invalid("gradient sets have different layer counts"));
        }
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            a.axpy(alpha, b)?;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            if a.len() != b.len() {
                return Err(invalid("bias gradient length mismatch"));
            }
            for (x, y) in a.iter_mut().zip(b) {
                *x += alpha * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for w in &mut self.weights {
            w.scale_in_place(s);
        }
        for b in &mut self.biases {
            b.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|x| x.is_finite())
    }
}

/// A parameterization that realizes some [`Model`] and exposes a subset of
/// parameters to the optimizer.
pub trait Trainable {
    /// The model computed from the current parameters.
    fn effective_model(&self) -> Cow<'_, Model>;

    /// Gradients of the trainable groups, given gradients of the effective model.
    fn trainable_grads(&self, full: &GradientSet) -> Result<Vec<Vec<f64>>>;

    fn trainable_params_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_trainable(&self) -> usize;
}

impl Trainable for Model {
    fn effective_model(&self) -> Cow<'_, Model> {
        Cow::Borrowed(self)
    }

    fn trainable_grads(&self, full: &GradientSet) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for (w, b) in full.weights.iter().zip(&full.biases) {
            out.push(w.as_slice().to_vec());
            out.push(b.clone());
        }
        Ok(out)
    }

    fn trainable_params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    fn num_trainable(&self) -> usize {
        self.param_count()
    }
}
