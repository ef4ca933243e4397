//! Subspace selection and adapter injection.
//!
//! For every layer the forgetting gradient `G` is (optionally) projected
//! perpendicular to the layer weight `A`, decomposed as `G′ = UΣVᵀ`, and
//! truncated at the smallest rank whose explained variance reaches γ. The
//! layer then computes with `A + U_r R V_rᵀ` where only the r×r matrix `R`
//! is trained and starts at zero.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{config, invalid, Result};
use crate::linalg::{
    explained_variance, perp_project, select_rank, subspace_project, svd, truncate, Matrix,
};
use crate::nn::{backward_ce, GradientSet, Model, Trainable};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SemuConfig {
    pub gamma_default: f64,
    /// Per-layer γ keyed by layer index.
    #[serde(default)]
    pub gamma_overrides: BTreeMap<usize, f64>,
    #[serde(default = "yes")]
    pub use_perp_projection: bool,
    #[serde(default)]
    pub grad_reduction: Reduction,
    /// Hard cap on every layer's rank.
    #[serde(default)]
    pub r_max: Option<usize>,
}

fn yes() -> bool {
    true
}

impl SemuConfig {
    pub fn with_gamma(gamma: f64) -> Self {
        SemuConfig {
            gamma_default: gamma,
            gamma_overrides: BTreeMap::new(),
            use_perp_projection: true,
            grad_reduction: Reduction::Sum,
            r_max: None,
        }
    }

    pub fn gamma_for(&self, layer: usize) -> f64 {
        self.gamma_overrides.get(&layer).copied().unwrap_or(self.gamma_default)
    }

    pub fn validate(&self, num_layers: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma_default) {
            return Err(config(format!("gamma {} outside [0, 1]", self.gamma_default)));
        }
        for (&layer, &g) in &self.gamma_overrides {
            if layer >= num_layers {
                return Err(config(format!(
                    "gamma override for layer {layer}, model has {num_layers} layers"
                )));
            }
            if !(0.0..=1.0).contains(&g) {
                return Err(config(format!("gamma override {g} for layer {layer} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Loss whose negated gradient drives subspace selection.
pub trait ForgetLoss {
    /// Loss and gradient on the forget samples at positions `batch`.
    fn loss_and_grad(&mut self, model: &Model, batch: &[usize]) -> Result<(f64, GradientSet)>;

    fn num_samples(&self) -> usize;
}

/// True-label cross-entropy on the forget set.
pub struct CrossEntropyForget<'a> {
    pub data: &'a Dataset,
}

impl ForgetLoss for CrossEntropyForget<'_> {
    fn loss_and_grad(&mut self, model: &Model, batch: &[usize]) -> Result<(f64, GradientSet)> {
        let (x, y) = self.data.batch(batch);
        backward_ce(model, &x, &y)
    }

    fn num_samples(&self) -> usize {
        self.data.len()
    }
}

/// Sum (or mean) over forget batches, in dataset order, of `∇(−ℓ)`.
pub fn accumulate_forget_gradients(
    model: &Model,
    loss: &mut dyn ForgetLoss,
    batch_size: usize,
    reduction: Reduction,
) -> Result<GradientSet> {
    let n = loss.num_samples();
    if n == 0 {
        return Err(config("forget set is empty"));
    }
    if batch_size == 0 {
        return Err(config("batch_size must be positive"));
    }
    let order: Vec<usize> = (0..n).collect();
    let mut acc = GradientSet::zeros_like(model);
    let mut batches = 0usize;
    for batch in order.chunks(batch_size) {
        let (_, g) = loss.loss_and_grad(model, batch)?;
        acc.axpy(-1.0, &g)?;
        batches += 1;
    }
    if reduction == Reduction::Mean {
        acc.scale(1.0 / batches as f64);
    }
    if !acc.is_finite() {
        return Err(crate::Error::Numerical("forget gradient is not finite".into()));
    }
    Ok(acc)
}

/// Frozen factors and trainable core of one adapted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapter {
    /// n×r
    pub u: Matrix,
    /// m×r
    pub v: Matrix,
    /// r×r, trainable
    pub r: Matrix,
}

impl Adapter {
    pub fn rank(&self) -> usize {
        self.r.rows()
    }

    /// `U R Vᵀ`
    pub fn delta(&self) -> Matrix {
        self.u
            .matmul(&self.r)
            .and_then(|ur| ur.matmul_t(&self.v))
            .expect("adapter factor shapes conform")
    }
}

/// A frozen base model with adapters on some layers.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedModel {
    pub base: Model,
    pub adapters: Vec<Option<Adapter>>,
}

impl AdaptedModel {
    /// No adapters: every parameter frozen.
    pub fn frozen(base: Model) -> Self {
        let n = base.layers.len();
        AdaptedModel {
            base,
            adapters: vec![None; n],
        }
    }

    pub fn trainable_params(&self) -> usize {
        self.adapters.iter().flatten().map(|a| a.rank() * a.rank()).sum()
    }

    /// Weight parameters of the base model.
    pub fn total_params(&self) -> usize {
        self.base.weight_param_count()
    }

    pub fn ranks(&self) -> Vec<usize> {
        self.adapters.iter().map(|a| a.as_ref().map_or(0, Adapter::rank)).collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.effective_model().forward(x)
    }
}

/// Plain model whose weights are the adapters' effective weights.
pub fn merge_adapters(adapted: &AdaptedModel) -> Model {
    let mut m = adapted.base.clone();
    for (layer, adapter) in m.layers.iter_mut().zip(&adapted.adapters) {
        if let Some(a) = adapter {
            layer.weight.add_assign(&a.delta()).expect("delta matches weight shape");
        }
    }
    m
}

impl Trainable for AdaptedModel {
    fn effective_model(&self) -> Cow<'_, Model> {
        Cow::Owned(merge_adapters(self))
    }

    /// `∂L/∂R = U_rᵀ (∂L/∂W) V_r` for each adapted layer.
    fn trainable_grads(&self, full: &GradientSet) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for (a, g) in self.adapters.iter().zip(&full.weights) {
            if let Some(a) = a {
                out.push(a.u.t_matmul(g)?.matmul(&a.v)?.into_vec());
            }
        }
        Ok(out)
    }

    fn trainable_params_mut(&mut self) -> Vec<&mut [f64]> {
        self.adapters.iter_mut().flatten().map(|a| a.r.as_mut_slice()).collect()
    }

    fn num_trainable(&self) -> usize {
        self.trainable_params()
    }
}

/// Spectrum of one layer's (projected) forgetting gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpectrum {
    pub layer: usize,
    pub kind: &'static str,
    pub shape: (usize, usize),
    pub gamma: f64,
    /// Singular values of G′; empty when the gradient vanishes.
    pub sigma: Vec<f64>,
    /// Cumulative explained variance `e_k`, k = 1..=q.
    pub explained: Vec<f64>,
    pub rank: usize,
}

struct LayerChoice {
    spectrum: LayerSpectrum,
    adapter: Option<Adapter>,
}

fn choose_layer(
    index: usize,
    model: &Model,
    grad: &Matrix,
    cfg: &SemuConfig,
) -> Result<LayerChoice> {
    let layer = &model.layers[index];
    let gamma = cfg.gamma_for(index);
    let mut spectrum = LayerSpectrum {
        layer: index,
        kind: layer.spec.kind_name(),
        shape: layer.weight.shape(),
        gamma,
        sigma: Vec::new(),
        explained: Vec::new(),
        rank: 0,
    };
    if grad.shape() != layer.weight.shape() {
        return Err(invalid(format!(
            "gradient for layer {index} is {}x{}, weight is {}x{}",
            grad.rows(),
            grad.cols(),
            layer.weight.rows(),
            layer.weight.cols()
        )));
    }
    if grad.is_zero() {
        return Ok(LayerChoice {
            spectrum,
            adapter: None,
        });
    }
    let g = if cfg.use_perp_projection {
        perp_project(grad, &layer.weight)?
    } else {
        grad.clone()
    };
    let factors = svd(&g)?;
    let selection = select_rank(&factors.sigma, gamma)?;
    let r = cfg.r_max.map_or(selection.r, |cap| selection.r.min(cap));
    spectrum.explained = explained_variance(&factors.sigma);
    if spectrum.explained.is_empty() {
        spectrum.sigma = Vec::new();
    } else {
        spectrum.sigma = factors.sigma.clone();
    }
    spectrum.rank = r;
    let adapter = if r == 0 {
        None
    } else {
        let (u, _, v) = truncate(&factors, r)?;
        Some(Adapter {
            u,
            v,
            r: Matrix::zeros(r, r),
        })
    };
    Ok(LayerChoice { spectrum, adapter })
}

/// Builds zero-initialized adapters and reports each layer's spectrum.
pub fn build_adapters_with_spectrum(
    model: &Model,
    grads: &GradientSet,
    cfg: &SemuConfig,
) -> Result<(AdaptedModel, Vec<LayerSpectrum>)> {
    cfg.validate(model.layers.len())?;
    if grads.weights.len() != model.layers.len() {
        return Err(invalid(format!(
            "{} gradient layers for a {}-layer model",
            grads.weights.len(),
            model.layers.len()
        )));
    }
    let mut adapters = Vec::with_capacity(model.layers.len());
    let mut spectra = Vec::with_capacity(model.layers.len());
    for (i, g) in grads.weights.iter().enumerate() {
        let choice = choose_layer(i, model, g, cfg)?;
        adapters.push(choice.adapter);
        spectra.push(choice.spectrum);
    }
    Ok((
        AdaptedModel {
            base: model.clone(),
            adapters,
        },
        spectra,
    ))
}

pub fn build_adapters(model: &Model, grads: &GradientSet, cfg: &SemuConfig) -> Result<AdaptedModel> {
    build_adapters_with_spectrum(model, grads, cfg).map(|(a, _)| a)
}

pub fn spectrum_report(grads: &GradientSet, model: &Model, cfg: &SemuConfig) -> Result<Vec<LayerSpectrum>> {
    build_adapters_with_spectrum(model, grads, cfg).map(|(_, s)| s)
}

/// The gradient the layer's subspace was selected from (after the optional
/// perpendicular projection).
pub fn selection_gradient(model: &Model, grads: &GradientSet, cfg: &SemuConfig, layer: usize) -> Result<Matrix> {
    let g = &grads.weights[layer];
    if cfg.use_perp_projection {
        perp_project(g, &model.layers[layer].weight)
    } else {
        Ok(g.clone())
    }
}

/// `‖p_{U,V}(G′)‖²_F / ‖G′‖²_F`
pub fn captured_fraction(g: &Matrix, adapter: &Adapter) -> Result<f64> {
    let total = g.frobenius_norm().powi(2);
    if total == 0.0 {
        return Ok(1.0);
    }
    let p = subspace_project(g, &adapter.u, &adapter.v)?;
    Ok(p.frobenius_norm().powi(2) / total)
}

pub const SPECTRUM_HEADER: &str = "layer_index,layer_kind,sigma_index,sigma,explained_cum,chosen_r";

/// CSV with one row per singular value (1-based `sigma_index`); a layer with
/// a vanishing gradient gets a single row with empty sigma columns.
pub fn write_spectrum_csv(spectra: &[LayerSpectrum], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{SPECTRUM_HEADER}")?;
    for s in spectra {
        if s.sigma.is_empty() {
            writeln!(out, "{},{},,,,{}", s.layer, s.kind, s.rank)?;
            continue;
        }
        for (k, (sigma, e)) in s.sigma.iter().zip(&s.explained).enumerate() {
            writeln!(out, "{},{},{},{},{},{}", s.layer, s.kind, k + 1, sigma, e, s.rank)?;
        }
    }
    Ok(())
}
