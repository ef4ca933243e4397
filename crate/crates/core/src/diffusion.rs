//! A class-conditional DDPM on 2-D Gaussian mixtures, with classifier-free
//! guidance and SEMU generation unlearning.

use std::f64::consts::{FRAC_PI_4, PI};
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    accumulate_forget_gradients, build_adapters_with_spectrum, AdaptedModel, ForgetLoss, LayerSpectrum,
    SemuConfig,
};
use crate::data::Dataset;
use crate::error::{config, invalid, Result};
use crate::linalg::Matrix;
use crate::metrics::argmax_rows;
use crate::nn::{
    epoch_batches, init_model, mse, sgd_step, Activation, Checkpoint, GradientSet, LayerSpec,
    Model, Sgd, Trainable,
};
use crate::rng::{stream, Stream};
use crate::unlearn::Mode;

/// Linear β schedule over timesteps `1..=T`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub beta: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// On-disk description of a schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        ScheduleSpec {
            timesteps: 50,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

impl ScheduleSpec {
    pub fn build(&self) -> Result<Schedule> {
        Schedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

impl Schedule {
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Schedule> {
        if timesteps == 0 {
            return Err(config("schedule needs at least one timestep"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(config(format!(
                "schedule betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let beta: Vec<f64> = (0..timesteps)
            .map(|i| {
                if timesteps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (timesteps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(timesteps);
        let mut acc = 1.0;
        for b in &beta {
            acc *= 1.0 - b;
            alpha_bar.push(acc);
        }
        Ok(Schedule { beta, alpha_bar })
    }

    pub fn timesteps(&self) -> usize {
        self.beta.len()
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.timesteps() {
            return Err(invalid(format!("timestep {t} outside 1..={}", self.timesteps())));
        }
        Ok(())
    }

    /// `ᾱ_t` for 1-based `t`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        self.alpha_bar[t - 1]
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·noise`
pub fn forward_diffuse(x0: [f64; 2], t: usize, noise: [f64; 2], schedule: &Schedule) -> Result<[f64; 2]> {
    schedule.check_t(t)?;
    let ab = schedule.alpha_bar_at(t);
    let (a, s) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok([a * x0[0] + s * noise[0], a * x0[1] + s * noise[1]])
}

fn diffuse_batch(x0: &Matrix, t: &[usize], noise: &Matrix, schedule: &Schedule) -> Result<Matrix> {
    let mut out = Matrix::zeros(x0.rows(), 2);
    for i in 0..x0.rows() {
        let xt = forward_diffuse(
            [x0[(i, 0)], x0[(i, 1)]],
            t[i],
            [noise[(i, 0)], noise[(i, 1)]],
            schedule,
        )?;
        out.row_mut(i).copy_from_slice(&xt);
    }
    Ok(out)
}

/// How `(x_t, t, c)` is encoded as network input: the point, a sinusoidal
/// time embedding, and a one-hot class where index `num_classes` is ∅.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conditioning {
    pub num_classes: usize,
    pub embed_dim: usize,
}

impl Conditioning {
    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    pub fn input_dim(&self) -> usize {
        2 + self.embed_dim + self.num_classes + 1
    }

    fn time_embedding(&self, t: usize, out: &mut [f64]) {
        let half = self.embed_dim / 2;
        for i in 0..half {
            let freq = (-(i as f64) * (1000f64).ln() / half.max(1) as f64).exp();
            let angle = t as f64 * freq;
            out[i] = angle.sin();
            out[half + i] = angle.cos();
        }
    }

    /// One input row per sample.
    pub fn encode(&self, x: &Matrix, t: &[usize], class: &[usize]) -> Result<Matrix> {
        if x.cols() != 2 || t.len() != x.rows() || class.len() != x.rows() {
            return Err(invalid(format!(
                "conditioning needs n×2 points with n timesteps and classes, got {}x{}, {}, {}",
                x.rows(),
                x.cols(),
                t.len(),
                class.len()
            )));
        }
        let dim = self.input_dim();
        let mut m = Matrix::zeros(x.rows(), dim);
        for i in 0..x.rows() {
            if class[i] > self.num_classes {
                return Err(invalid(format!("class {} out of range", class[i])));
            }
            let row = m.row_mut(i);
            row[0] = x[(i, 0)];
            row[1] = x[(i, 1)];
            self.time_embedding(t[i], &mut row[2..2 + self.embed_dim]);
            row[2 + self.embed_dim + class[i]] = 1.0;
        }
        Ok(m)
    }
}

/// Noise predictor `ε_θ(x_t | c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CondNoiseModel {
    pub net: Model,
    pub cond: Conditioning,
    pub schedule: ScheduleSpec,
}

pub const DIFFUSION_FORMAT: &str = "semu-ddpm-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DiffusionCheckpoint {
    #[serde(flatten)]
    net: Checkpoint,
    kind: String,
    conditioning: Conditioning,
    schedule: ScheduleSpec,
}

impl CondNoiseModel {
    /// MLP with the given hidden widths and ReLU activations.
    pub fn new(cond: Conditioning, hidden: &[usize], schedule: ScheduleSpec, seed: u64) -> Result<Self> {
        if cond.num_classes == 0 {
            return Err(config("diffusion model needs at least one class"));
        }
        let mut dims = vec![cond.input_dim()];
        dims.extend_from_slice(hidden);
        dims.push(2);
        let specs: Vec<LayerSpec> = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 < dims.len() { Activation::Relu } else { Activation::None };
                LayerSpec::dense(w[0], w[1], act)
            })
            .collect();
        Ok(CondNoiseModel {
            net: init_model(&specs, seed)?,
            cond,
            schedule,
        })
    }

    pub fn predict(&self, x: &Matrix, t: &[usize], class: &[usize]) -> Result<Matrix> {
        predict_with(&self.net, &self.cond, x, t, class)
    }

    pub fn with_net(&self, net: Model) -> CondNoiseModel {
        CondNoiseModel {
            net,
            cond: self.cond,
            schedule: self.schedule,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = DiffusionCheckpoint {
            net: self.net.to_checkpoint(),
            kind: DIFFUSION_FORMAT.to_string(),
            conditioning: self.cond,
            schedule: self.schedule,
        };
        std::fs::write(path, serde_json::to_string(&ckpt)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CondNoiseModel> {
        let ckpt: DiffusionCheckpoint = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if ckpt.kind != DIFFUSION_FORMAT {
            return Err(invalid(format!("not a diffusion checkpoint (kind {:?})", ckpt.kind)));
        }
        let net = Model::from_checkpoint(&ckpt.net)?;
        if net.in_features() != ckpt.conditioning.input_dim() || net.num_classes != 2 {
            return Err(invalid("network shape does not match its conditioning"));
        }
        Ok(CondNoiseModel {
            net,
            cond: ckpt.conditioning,
            schedule: ckpt.schedule,
        })
    }
}

fn predict_with(net: &Model, cond: &Conditioning, x: &Matrix, t: &[usize], class: &[usize]) -> Result<Matrix> {
    net.forward(&cond.encode(x, t, class)?)
}

/// `(1−w)·ε(x_t|∅) + w·ε(x_t|c)`
pub fn cfg_noise(model: &CondNoiseModel, x: &Matrix, t: &[usize], class: &[usize], w: f64) -> Result<Matrix> {
    if !(0.0..=1.0).contains(&w) {
        return Err(config(format!("guidance factor {w} outside [0, 1]")));
    }
    let null = vec![model.cond.null_class(); x.rows()];
    let uncond = model.predict(x, t, &null)?;
    let cond = model.predict(x, t, class)?;
    let mut out = uncond.scale(1.0 - w);
    out.axpy(w, &cond)?;
    Ok(out)
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DdpmTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "crate::nn::default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
    #[serde(default = "default_drop")]
    pub cond_drop_prob: f64,
}

fn default_drop() -> f64 {
    0.1
}

/// Drawn randomness for one denoising batch.
struct NoiseDraw {
    t: Vec<usize>,
    noise: Matrix,
}

fn draw_noise(rng: &mut ChaCha8Rng, n: usize, timesteps: usize) -> NoiseDraw {
    let t = (0..n).map(|_| rng.random_range(1..=timesteps)).collect();
    NoiseDraw {
        t,
        noise: normal_matrix(rng, n, 2),
    }
}

/// Elementwise-mean `‖ε_θ(x_t|c) − ε‖²` and its gradient.
fn denoising_loss(
    net: &Model,
    cond: &Conditioning,
    schedule: &Schedule,
    x0: &Matrix,
    class: &[usize],
    draw: &NoiseDraw,
) -> Result<(f64, GradientSet)> {
    let xt = diffuse_batch(x0, &draw.t, &draw.noise, schedule)?;
    let trace = net.forward_trace(&cond.encode(&xt, &draw.t, class)?)?;
    let (loss, d) = mse(&trace.output, &draw.noise)?;
    Ok((loss, net.backward(&trace, &d)?))
}

/// Mean denoising MSE over `data`, with seeded timesteps and noise.
pub fn denoising_mse(model: &CondNoiseModel, data: &Dataset, seed: u64) -> Result<f64> {
    let schedule = model.schedule.build()?;
    let mut rng = stream(seed, Stream::Diffusion);
    let draw = draw_noise(&mut rng, data.len(), schedule.timesteps());
    let xt = diffuse_batch(&data.features, &draw.t, &draw.noise, &schedule)?;
    let pred = model.predict(&xt, &draw.t, &data.labels)?;
    Ok(mse(&pred, &draw.noise)?.0)
}

/// Denoising training with conditioning dropout; returns the mean loss of
/// each epoch.
pub fn train_ddpm(model: &mut CondNoiseModel, data: &Dataset, cfg: &DdpmTrainConfig, seed: u64) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&cfg.cond_drop_prob) {
        return Err(config(format!("cond_drop_prob {} outside [0, 1)", cfg.cond_drop_prob)));
    }
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(config("training needs data and a positive batch_size"));
    }
    if data.dim() != 2 || data.num_classes > model.cond.num_classes {
        return Err(config("diffusion data must be 2-D with labels below the model's class count"));
    }
    let schedule = model.schedule.build()?;
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut shuffle = stream(seed, Stream::Shuffle);
    let mut rng = stream(seed, Stream::Diffusion);
    let cond = model.cond;
    let mut losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        for batch in epoch_batches(data.len(), cfg.batch_size, &mut shuffle) {
            let (x0, mut labels) = data.batch(&batch);
            for c in labels.iter_mut() {
                if rng.random::<f64>() < cfg.cond_drop_prob {
                    *c = cond.null_class();
                }
            }
            let draw = draw_noise(&mut rng, batch.len(), schedule.timesteps());
            let (loss, grads) = denoising_loss(&model.net, &cond, &schedule, &x0, &labels, &draw)?;
            let tg = model.net.trainable_grads(&grads)?;
            sgd_step(&mut model.net, &mut opt, &tg)?;
            total += loss * batch.len() as f64;
        }
        losses.push(total / data.len() as f64);
    }
    Ok(losses)
}

/// Ancestral sampling from `z_T ~ N(0, I)` with guided noise estimates and
/// posterior variance `β_t`.
pub fn sample(model: &CondNoiseModel, class: usize, w: f64, n: usize, seed: u64) -> Result<Matrix> {
    let schedule = model.schedule.build()?;
    let mut rng = stream(seed, Stream::Sampling);
    let mut z = normal_matrix(&mut rng, n, 2);
    let classes = vec![class; n];
    for t in (1..=schedule.timesteps()).rev() {
        let ts = vec![t; n];
        let eps = cfg_noise(model, &z, &ts, &classes, w)?;
        let beta = schedule.beta_at(t);
        let coef = beta / (1.0 - schedule.alpha_bar_at(t)).sqrt();
        let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
        let noise = if t > 1 { Some(normal_matrix(&mut rng, n, 2)) } else { None };
        for i in 0..n {
            for j in 0..2 {
                let mut v = inv_sqrt_alpha * (z[(i, j)] - coef * eps[(i, j)]);
                if let Some(xi) = &noise {
                    v += beta.sqrt() * xi[(i, j)];
                }
                z[(i, j)] = v;
            }
        }
    }
    Ok(z)
}

/// Pieces of one generation-unlearning batch, with all randomness drawn.
pub struct GenBatch {
    pub x0: Matrix,
    /// The forget class of each sample.
    pub class: Vec<usize>,
    /// The replacement class of each sample.
    pub class_prime: Vec<usize>,
    pub t: Vec<usize>,
    pub noise: Matrix,
}

pub struct RemainBatch {
    pub x0: Matrix,
    pub labels: Vec<usize>,
    pub t: Vec<usize>,
    pub noise: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenLossParts {
    pub forget: f64,
    pub remain: Option<f64>,
    pub total: f64,
}

/// `mean‖ε(x_t|c′) − ε(x_t|c)‖² + β·MSE_remain`. With `detach` the `c′`
/// branch is a constant target.
pub fn unlearn_loss_generation(
    net: &Model,
    cond: &Conditioning,
    schedule: &Schedule,
    forget: Option<&GenBatch>,
    remain: Option<&RemainBatch>,
    beta_remain: f64,
    detach: bool,
) -> Result<(GenLossParts, GradientSet)> {
    if beta_remain > 0.0 && remain.is_none() {
        return Err(config("beta_remain > 0 requires a remain batch"));
    }
    let mut grads = GradientSet::zeros_like(net);
    let mut forget_loss = 0.0;
    if let Some(b) = forget.filter(|b| b.x0.rows() > 0) {
        if b.class.iter().zip(&b.class_prime).any(|(c, p)| c == p) {
            return Err(invalid("replacement class equals the forgotten class"));
        }
        let n = b.x0.rows() as f64;
        let xt = diffuse_batch(&b.x0, &b.t, &b.noise, schedule)?;
        let tc = net.forward_trace(&cond.encode(&xt, &b.t, &b.class)?)?;
        let tp = net.forward_trace(&cond.encode(&xt, &b.t, &b.class_prime)?)?;
        let diff = tp.output.sub(&tc.output)?;
        forget_loss = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / n;
        let d = diff.scale(2.0 / n);
        grads.axpy(-1.0, &net.backward(&tc, &d)?)?;
        if !detach {
            grads.axpy(1.0, &net.backward(&tp, &d)?)?;
        }
    }
    let mut remain_loss = None;
    if let Some(r) = remain.filter(|r| r.x0.rows() > 0 && beta_remain > 0.0) {
        let draw = NoiseDraw {
            t: r.t.clone(),
            noise: r.noise.clone(),
        };
        let (l, g) = denoising_loss(net, cond, schedule, &r.x0, &r.labels, &draw)?;
        grads.axpy(beta_remain, &g)?;
        remain_loss = Some(l);
    }
    let total = forget_loss + remain_loss.map_or(0.0, |r| beta_remain * r);
    Ok((
        GenLossParts {
            forget: forget_loss,
            remain: remain_loss,
            total,
        },
        grads,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenUnlearnConfig {
    pub iterations: usize,
    pub lr: f64,
    #[serde(default = "crate::nn::default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub beta_remain: f64,
    #[serde(default = "default_w")]
    pub guidance_w: f64,
    pub forget_class: usize,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_subset")]
    pub subset_fraction: f64,
    /// Supplied by the caller rather than the config file.
    #[serde(skip)]
    pub seed: u64,
    /// Let gradients flow through the `c′` branch as well.
    #[serde(default)]
    pub both_branches: bool,
    /// Draw `c′` once per sample instead of every iteration.
    #[serde(default)]
    pub fixed_relabel: bool,
}

fn default_w() -> f64 {
    0.8
}

fn default_subset() -> f64 {
    0.05
}

impl GenUnlearnConfig {
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.guidance_w) {
            return Err(config(format!("guidance_w {} outside [0, 1]", self.guidance_w)));
        }
        if self.forget_class >= num_classes {
            return Err(config(format!(
                "forget_class {} out of range for {num_classes} classes",
                self.forget_class
            )));
        }
        if num_classes < 2 {
            return Err(config("generation unlearning needs at least 2 classes"));
        }
        if !(self.beta_remain >= 0.0 && self.beta_remain.is_finite()) {
            return Err(config("beta_remain must be nonnegative"));
        }
        if self.batch_size == 0 {
            return Err(config("batch_size must be positive"));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(config("subset_fraction must be in (0, 1]"));
        }
        Ok(())
    }

    fn effective_beta(&self) -> f64 {
        if self.mode.uses_remain() {
            self.beta_remain
        } else {
            0.0
        }
    }
}

fn other_class(rng: &mut ChaCha8Rng, c: usize, num_classes: usize) -> usize {
    let k = rng.random_range(0..num_classes - 1);
    if k >= c {
        k + 1
    } else {
        k
    }
}

/// Iterations of sampled-batch SGD on the generation loss over
/// `D′ = D_f ∪ remain`; returns the loss of every iteration.
pub fn run_generation_unlearning<T: Trainable + ?Sized>(
    net: &mut T,
    cond: &Conditioning,
    schedule: &Schedule,
    forget: &Dataset,
    remain: Option<&Dataset>,
    cfg: &GenUnlearnConfig,
) -> Result<Vec<GenLossParts>> {
    cfg.validate(cond.num_classes)?;
    if forget.is_empty() {
        return Err(config("forget set is empty"));
    }
    let replay: Option<Dataset> = match cfg.mode {
        Mode::ForgetOnly => None,
        Mode::WithRemain => Some(
            remain
                .ok_or_else(|| config("mode with_remain requires the remain set"))?
                .clone(),
        ),
        Mode::WithSubset => {
            let r = remain.ok_or_else(|| config("mode with_subset requires the remain set"))?;
            let k = ((cfg.subset_fraction * r.len() as f64).ceil() as usize).min(r.len());
            let mut idx = sample_indices(&mut stream(cfg.seed, Stream::Subset), r.len(), k).into_vec();
            idx.sort_unstable();
            Some(r.subset(&idx))
        }
    };
    let beta = cfg.effective_beta();
    let n_f = forget.len();
    let n_total = n_f + replay.as_ref().map_or(0, Dataset::len);
    let mut rng = stream(cfg.seed, Stream::Forget);
    let fixed: Vec<usize> = (0..n_f)
        .map(|_| other_class(&mut rng, cfg.forget_class, cond.num_classes))
        .collect();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut log = Vec::with_capacity(cfg.iterations);
    for _ in 0..cfg.iterations {
        let batch = sample_indices(&mut rng, n_total, cfg.batch_size.min(n_total)).into_vec();
        let (fi, ri): (Vec<usize>, Vec<usize>) = batch.iter().partition(|&&i| i < n_f);
        let class_prime = fi
            .iter()
            .map(|&i| {
                if cfg.fixed_relabel {
                    fixed[i]
                } else {
                    other_class(&mut rng, cfg.forget_class, cond.num_classes)
                }
            })
            .collect();
        let fdraw = draw_noise(&mut rng, fi.len(), schedule.timesteps());
        let fb = GenBatch {
            x0: forget.features.select_rows(&fi),
            class: vec![cfg.forget_class; fi.len()],
            class_prime,
            t: fdraw.t,
            noise: fdraw.noise,
        };
        let rb = replay.as_ref().map(|r| {
            let idx: Vec<usize> = ri.iter().map(|&i| i - n_f).collect();
            let (x0, labels) = r.batch(&idx);
            let d = draw_noise(&mut rng, idx.len(), schedule.timesteps());
            RemainBatch {
                x0,
                labels,
                t: d.t,
                noise: d.noise,
            }
        });
        let model = net.effective_model();
        let (parts, grads) = unlearn_loss_generation(
            &model,
            cond,
            schedule,
            Some(&fb),
            rb.as_ref(),
            beta,
            !cfg.both_branches,
        )?;
        let tg = net.trainable_grads(&grads)?;
        drop(model);
        sgd_step(net, &mut opt, &tg)?;
        log.push(parts);
    }
    Ok(log)
}

/// Negated denoising MSE on the forget set, used to select subspaces.
pub struct DenoisingForget<'a> {
    pub data: &'a Dataset,
    pub cond: Conditioning,
    pub schedule: Schedule,
    rng: ChaCha8Rng,
}

impl<'a> DenoisingForget<'a> {
    pub fn new(data: &'a Dataset, cond: Conditioning, schedule: Schedule, seed: u64) -> Self {
        DenoisingForget {
            data,
            cond,
            schedule,
            rng: stream(seed, Stream::Forget),
        }
    }
}

impl ForgetLoss for DenoisingForget<'_> {
    fn loss_and_grad(&mut self, model: &Model, batch: &[usize]) -> Result<(f64, GradientSet)> {
        let (x0, labels) = self.data.batch(batch);
        let draw = draw_noise(&mut self.rng, batch.len(), self.schedule.timesteps());
        denoising_loss(model, &self.cond, &self.schedule, &x0, &labels, &draw)
    }

    fn num_samples(&self) -> usize {
        self.data.len()
    }
}

pub struct GenSemuRun {
    /// Adapters as built, before any fine-tuning.
    pub initial: AdaptedModel,
    pub adapted: AdaptedModel,
    pub grads: GradientSet,
    pub spectra: Vec<LayerSpectrum>,
    pub log: Vec<GenLossParts>,
}

/// Subspace selection from the negated denoising loss on `forget`
/// (batches of `grad_batch`), then generation unlearning of the adapters.
pub fn run_semu_generation(
    model: &CondNoiseModel,
    forget: &Dataset,
    remain: Option<&Dataset>,
    semu: &SemuConfig,
    cfg: &GenUnlearnConfig,
    grad_batch: usize,
) -> Result<GenSemuRun> {
    let schedule = model.schedule.build()?;
    let mut loss = DenoisingForget::new(forget, model.cond, schedule.clone(), cfg.seed);
    let grads = accumulate_forget_gradients(&model.net, &mut loss, grad_batch, semu.grad_reduction)?;
    let (mut adapted, spectra) = build_adapters_with_spectrum(&model.net, &grads, semu)?;
    let initial = adapted.clone();
    let log = if adapted.trainable_params() == 0 {
        log::warn!("no layer was adapted; the generator is unchanged");
        Vec::new()
    } else {
        run_generation_unlearning(&mut adapted, &model.cond, &schedule, forget, remain, cfg)?
    };
    Ok(GenSemuRun {
        initial,
        adapted,
        grads,
        spectra,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub num_classes: usize,
    pub per_class: usize,
    pub radius: f64,
    pub sigma: f64,
}

impl Default for MixtureConfig {
    fn default() -> Self {
        MixtureConfig {
            num_classes: 4,
            per_class: 2000,
            radius: 2.0,
            sigma: 0.15,
        }
    }
}

impl MixtureConfig {
    /// Component centers on a circle of `radius`, starting at 45°, so four
    /// classes sit on the diagonals.
    pub fn centers(&self) -> Vec<[f64; 2]> {
        (0..self.num_classes)
            .map(|k| {
                let a = FRAC_PI_4 + 2.0 * PI * k as f64 / self.num_classes as f64;
                [self.radius * a.cos(), self.radius * a.sin()]
            })
            .collect()
    }
}

/// Gaussian mixture samples split 80/20 per class.
pub fn make_mixture(cfg: &MixtureConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    if cfg.num_classes == 0 || cfg.per_class == 0 || !(cfg.sigma > 0.0) {
        return Err(config("mixture needs classes, samples and a positive sigma"));
    }
    let mut rng = stream(seed, Stream::Blobs);
    let n_train = cfg.per_class * 4 / 5;
    let (mut trx, mut try_, mut tex, mut tey) = (vec![], vec![], vec![], vec![]);
    for (k, c) in cfg.centers().iter().enumerate() {
        for i in 0..cfg.per_class {
            let (xs, ys) = if i < n_train { (&mut trx, &mut try_) } else { (&mut tex, &mut tey) };
            for ci in c {
                let z: f64 = rng.sample(StandardNormal);
                xs.push(ci + cfg.sigma * z);
            }
            ys.push(k);
        }
    }
    let train = Dataset::new(Matrix::from_vec(try_.len(), 2, trx)?, try_, cfg.num_classes)?;
    let test = Dataset::new(Matrix::from_vec(tey.len(), 2, tex)?, tey, cfg.num_classes)?;
    Ok((train, test))
}

/// Per-class quality of generated samples judged by a frozen classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationEval {
    /// Percent of class-`c` requests the oracle labels `c`.
    pub agreement: Vec<f64>,
    /// Percent of samples within `4σ` of their requested component center.
    pub in_distribution: Vec<f64>,
}

/// Rows of `x,y,requested_class,predicted_class`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedSamples {
    pub points: Matrix,
    pub requested: Vec<usize>,
    pub predicted: Vec<usize>,
}

/// Draws `n` samples per class (seed offset by class) and labels them with
/// the oracle.
pub fn generate_labeled(
    model: &CondNoiseModel,
    oracle: &Model,
    w: f64,
    n: usize,
    seed: u64,
) -> Result<GeneratedSamples> {
    let k = model.cond.num_classes;
    let mut data = Vec::with_capacity(2 * n * k);
    let mut requested = Vec::with_capacity(n * k);
    for c in 0..k {
        let z = sample(model, c, w, n, seed.wrapping_add(c as u64))?;
        data.extend_from_slice(z.as_slice());
        requested.extend(std::iter::repeat_n(c, n));
    }
    let points = Matrix::from_vec(n * k, 2, data)?;
    let predicted = argmax_rows(&oracle.forward(&points)?);
    Ok(GeneratedSamples {
        points,
        requested,
        predicted,
    })
}

pub fn evaluate_generation(samples: &GeneratedSamples, mixture: &MixtureConfig) -> GenerationEval {
    let centers = mixture.centers();
    let k = mixture.num_classes;
    let mut agree = vec![0usize; k];
    let mut inside = vec![0usize; k];
    let mut count = vec![0usize; k];
    for i in 0..samples.requested.len() {
        let c = samples.requested[i];
        count[c] += 1;
        if samples.predicted[i] == c {
            agree[c] += 1;
        }
        let p = samples.points.row(i);
        let d = ((p[0] - centers[c][0]).powi(2) + (p[1] - centers[c][1]).powi(2)).sqrt();
        if d <= 4.0 * mixture.sigma {
            inside[c] += 1;
        }
    }
    let pct = |a: &[usize]| {
        a.iter()
            .zip(&count)
            .map(|(&x, &n)| if n == 0 { 0.0 } else { 100.0 * x as f64 / n as f64 })
            .collect()
    };
    GenerationEval {
        agreement: pct(&agree),
        in_distribution: pct(&inside),
    }
}

pub fn write_samples_csv(samples: &GeneratedSamples, mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "x,y,requested_class,predicted_class")?;
    for i in 0..samples.requested.len() {
        let p = samples.points.row(i);
        writeln!(out, "{},{},{},{}", p[0], p[1], samples.requested[i], samples.predicted[i])?;
    }
    Ok(())
}
