//! Relabeled fine-tuning of the trainable parameters and comparison baselines.

use std::io::Write;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapter::{
    accumulate_forget_gradients, build_adapters_with_spectrum, AdaptedModel, CrossEntropyForget,
    LayerSpectrum, SemuConfig,
};
use crate::data::{Dataset, DatasetSplit};
use crate::error::{config, Result};
use crate::linalg::Matrix;
use crate::metrics::{accuracy, compute_ua};
use crate::nn::{
    epoch_batches, init_model, sgd_step, softmax_cross_entropy, train, GradientSet, Model, Sgd,
    TrainConfig, Trainable,
};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    ForgetOnly,
    WithRemain,
    WithSubset,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::ForgetOnly => "forget_only",
            Mode::WithRemain => "with_remain",
            Mode::WithSubset => "with_subset",
        }
    }

    pub fn uses_remain(self) -> bool {
        self != Mode::ForgetOnly
    }
}

impl FromStr for Mode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "forget_only" => Ok(Mode::ForgetOnly),
            "with_remain" => Ok(Mode::WithRemain),
            "with_subset" => Ok(Mode::WithSubset),
            other => Err(config(format!(
                "unknown mode {other:?} (expected forget_only, with_remain or with_subset)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnlearnConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default = "crate::nn::default_momentum")]
    pub momentum: f64,
    pub batch_size: usize,
    /// Weight of the remain-set term; ignored in `forget_only` mode.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default = "default_subset_fraction")]
    pub subset_fraction: f64,
    /// Supplied by the caller rather than the config file.
    #[serde(skip)]
    pub seed: u64,
}

fn default_alpha() -> f64 {
    1.0
}

fn default_subset_fraction() -> f64 {
    0.05
}

impl UnlearnConfig {
    pub fn effective_alpha(&self) -> f64 {
        if self.mode.uses_remain() {
            self.alpha
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(config(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if !(self.subset_fraction > 0.0 && self.subset_fraction <= 1.0) {
            return Err(config(format!(
                "subset_fraction must be in (0, 1], got {}",
                self.subset_fraction
            )));
        }
        Ok(())
    }
}

/// Forget samples with a fixed wrong label each.
#[derive(Debug, Clone, PartialEq)]
pub struct RelabeledForgetSet {
    /// Inputs with the new labels.
    pub data: Dataset,
    pub original: Vec<usize>,
    pub seed: u64,
}

impl RelabeledForgetSet {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The forget set with its true labels.
    pub fn original_set(&self) -> Dataset {
        Dataset {
            features: self.data.features.clone(),
            labels: self.original.clone(),
            num_classes: self.data.num_classes,
        }
    }
}

/// Draws each new label uniformly from the other `C − 1` classes.
pub fn relabel(forget: &Dataset, seed: u64) -> Result<RelabeledForgetSet> {
    let c = forget.num_classes;
    if c < 2 {
        return Err(config(format!("relabeling needs at least 2 classes, got {c}")));
    }
    let mut rng = stream(seed, Stream::Relabel);
    let labels = forget
        .labels
        .iter()
        .map(|&y| {
            let k = rng.random_range(0..c - 1);
            if k >= y {
                k + 1
            } else {
                k
            }
        })
        .collect();
    Ok(RelabeledForgetSet {
        data: Dataset::new(forget.features.clone(), labels, c)?,
        original: forget.labels.clone(),
        seed,
    })
}

/// Value of each term of the combined loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub forget: f64,
    pub remain: Option<f64>,
    pub total: f64,
}

/// `CE(forget, new labels) + α · CE(remain, true labels)`, with gradients
/// with respect to every parameter of `model`. An empty batch contributes
/// nothing.
pub fn unlearn_loss_classification(
    model: &Model,
    forget: (&Matrix, &[usize]),
    remain: Option<(&Matrix, &[usize])>,
    alpha: f64,
) -> Result<(LossParts, GradientSet)> {
    if alpha > 0.0 && remain.is_none() {
        return Err(config("alpha > 0 requires a remain batch"));
    }
    let mut grads = GradientSet::zeros_like(model);
    let mut term = |x: &Matrix, y: &[usize], weight: f64| -> Result<Option<f64>> {
        if y.is_empty() {
            return Ok(None);
        }
        let trace = model.forward_trace(x)?;
        let (loss, d) = softmax_cross_entropy(&trace.output, y)?;
        grads.axpy(weight, &model.backward(&trace, &d)?)?;
        Ok(Some(loss))
    };
    let forget_loss = term(forget.0, forget.1, 1.0)?.unwrap_or(0.0);
    let remain_loss = match remain {
        Some((x, y)) if alpha > 0.0 => term(x, y, alpha)?,
        _ => None,
    };
    let total = forget_loss + remain_loss.map_or(0.0, |r| alpha * r);
    Ok((
        LossParts {
            forget: forget_loss,
            remain: remain_loss,
            total,
        },
        grads,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UnlearnEpoch {
    pub epoch: usize,
    pub loss_forget: f64,
    pub loss_remain: Option<f64>,
    pub ua: Option<f64>,
    pub ra: Option<f64>,
}

/// Remain samples available to the unlearner under `cfg.mode`.
pub fn remain_for_mode(remain: Option<&Dataset>, cfg: &UnlearnConfig) -> Result<Option<Dataset>> {
    match cfg.mode {
        Mode::ForgetOnly => Ok(None),
        Mode::WithRemain => remain
            .cloned()
            .map(Some)
            .ok_or_else(|| config("mode with_remain requires the remain set")),
        Mode::WithSubset => {
            let r = remain.ok_or_else(|| config("mode with_subset requires the remain set"))?;
            let k = ((cfg.subset_fraction * r.len() as f64).ceil() as usize).min(r.len());
            let mut idx = sample(&mut stream(cfg.seed, Stream::Subset), r.len(), k).into_vec();
            idx.sort_unstable();
            Ok(Some(r.subset(&idx)))
        }
    }
}

/// Epochs of SGD on the trainable parameters over `D′ = D_f′ ∪ remain`,
/// shuffled jointly each epoch. With `track` set, UA (and RA when a remain
/// set is given) is measured after every epoch.
pub fn run_unlearning<T: Trainable + ?Sized>(
    net: &mut T,
    forget: &RelabeledForgetSet,
    remain: Option<&Dataset>,
    cfg: &UnlearnConfig,
    track: bool,
) -> Result<Vec<UnlearnEpoch>> {
    cfg.validate()?;
    if forget.is_empty() {
        return Err(config("forget set is empty"));
    }
    let replay = remain_for_mode(remain, cfg)?;
    let alpha = cfg.effective_alpha();
    let n_f = forget.len();
    let combined = match &replay {
        Some(r) => forget.data.concat(r)?,
        None => forget.data.clone(),
    };
    let original = forget.original_set();
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut rng = stream(cfg.seed, Stream::Shuffle);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut sum_f, mut cnt_f, mut sum_r, mut cnt_r) = (0.0, 0usize, 0.0, 0usize);
        for batch in epoch_batches(combined.len(), cfg.batch_size, &mut rng) {
            let (fi, ri): (Vec<usize>, Vec<usize>) = batch.iter().partition(|&&i| i < n_f);
            let (xf, yf) = combined.batch(&fi);
            let (xr, yr) = combined.batch(&ri);
            let remain_batch = replay.as_ref().map(|_| (&xr, yr.as_slice()));
            let model = net.effective_model();
            let (parts, grads) =
                unlearn_loss_classification(&model, (&xf, &yf), remain_batch, alpha)?;
            let tg = net.trainable_grads(&grads)?;
            drop(model);
            sgd_step(net, &mut opt, &tg)?;
            sum_f += parts.forget * fi.len() as f64;
            cnt_f += fi.len();
            if let Some(r) = parts.remain {
                sum_r += r * ri.len() as f64;
                cnt_r += ri.len();
            }
        }
        let (ua, ra) = if track {
            let model = net.effective_model();
            (
                Some(compute_ua(&model, &original)?),
                remain.map(|r| accuracy(&model, r)).transpose()?,
            )
        } else {
            (None, None)
        };
        let entry = UnlearnEpoch {
            epoch,
            loss_forget: sum_f / cnt_f.max(1) as f64,
            loss_remain: (cnt_r > 0).then(|| sum_r / cnt_r as f64),
            ua,
            ra,
        };
        log::debug!("unlearn epoch {epoch}: forget loss {:.4}", entry.loss_forget);
        log.push(entry);
    }
    Ok(log)
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `epoch,loss_forget,loss_remain,ua,ra`
pub fn write_epoch_log(log: &[UnlearnEpoch], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "epoch,loss_forget,loss_remain,ua,ra")?;
    for e in log {
        writeln!(
            out,
            "{},{},{},{},{}",
            e.epoch,
            e.loss_forget,
            opt_cell(e.loss_remain),
            opt_cell(e.ua),
            opt_cell(e.ra)
        )?;
    }
    Ok(())
}

/// Outcome of the full SEMU pipeline on a classifier.
#[derive(Debug, Clone)]
pub struct SemuRun {
    /// Adapters as built, before any fine-tuning.
    pub initial: AdaptedModel,
    pub adapted: AdaptedModel,
    pub grads: GradientSet,
    pub spectra: Vec<LayerSpectrum>,
    pub log: Vec<UnlearnEpoch>,
}

/// Subspace selection from the forget gradient followed by relabeled
/// fine-tuning of the adapters.
pub fn run_semu(
    model: &Model,
    split: &DatasetSplit,
    semu: &SemuConfig,
    cfg: &UnlearnConfig,
    track: bool,
) -> Result<SemuRun> {
    let forget = split.forget_set();
    let remain = split.remain_set();
    let mut loss = CrossEntropyForget { data: &forget };
    let grads = accumulate_forget_gradients(model, &mut loss, cfg.batch_size, semu.grad_reduction)?;
    let (mut adapted, spectra) = build_adapters_with_spectrum(model, &grads, semu)?;
    let initial = adapted.clone();
    let relabeled = relabel(&forget, cfg.seed)?;
    let log = if adapted.trainable_params() == 0 {
        log::warn!("no layer was adapted; the model is unchanged");
        Vec::new()
    } else {
        run_unlearning(&mut adapted, &relabeled, Some(&remain), cfg, track)?
    };
    Ok(SemuRun {
        initial,
        adapted,
        grads,
        spectra,
        log,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Retrain,
    Ft,
    Ga,
    Rl,
}

impl BaselineKind {
    pub fn name(self) -> &'static str {
        match self {
            BaselineKind::Retrain => "retrain",
            BaselineKind::Ft => "ft",
            BaselineKind::Ga => "ga",
            BaselineKind::Rl => "rl",
        }
    }
}

impl FromStr for BaselineKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<BaselineKind> {
        match s {
            "retrain" => Ok(BaselineKind::Retrain),
            "ft" => Ok(BaselineKind::Ft),
            "ga" => Ok(BaselineKind::Ga),
            "rl" => Ok(BaselineKind::Rl),
            other => Err(config(format!(
                "unknown baseline {other:?} (expected retrain, ft, ga or rl)"
            ))),
        }
    }
}

/// Gradient ascent on the true-label cross-entropy of the forget set.
pub fn gradient_ascent(model: &mut Model, forget: &Dataset, cfg: &UnlearnConfig) -> Result<()> {
    cfg.validate()?;
    if forget.is_empty() {
        return Err(config("forget set is empty"));
    }
    let mut opt = Sgd::new(cfg.lr, cfg.momentum)?;
    let mut rng = stream(cfg.seed, Stream::Shuffle);
    for _ in 0..cfg.epochs {
        for batch in epoch_batches(forget.len(), cfg.batch_size, &mut rng) {
            let (x, y) = forget.batch(&batch);
            let (_, mut grads) = crate::nn::backward_ce(model, &x, &y)?;
            grads.scale(-1.0);
            let tg = model.trainable_grads(&grads)?;
            sgd_step(model, &mut opt, &tg)?;
        }
    }
    Ok(())
}

/// `retrain` starts from a fresh initialization (the original's init seed)
/// and sees only the remain set, trained with `retrain_cfg`; the others
/// start from `original` and use `cfg`.
pub fn run_baseline(
    kind: BaselineKind,
    original: &Model,
    split: &DatasetSplit,
    cfg: &UnlearnConfig,
    retrain_cfg: &TrainConfig,
) -> Result<Model> {
    let remain = split.remain_set();
    match kind {
        BaselineKind::Retrain => {
            let mut m = init_model(&original.specs(), original.seed)?;
            train(&mut m, &remain, retrain_cfg, cfg.seed)?;
            Ok(m)
        }
        BaselineKind::Ft => {
            let mut m = original.clone();
            let ft = TrainConfig {
                epochs: cfg.epochs,
                lr: cfg.lr,
                momentum: cfg.momentum,
                batch_size: cfg.batch_size,
            };
            train(&mut m, &remain, &ft, cfg.seed)?;
            Ok(m)
        }
        BaselineKind::Ga => {
            let mut m = original.clone();
            gradient_ascent(&mut m, &split.forget_set(), cfg)?;
            Ok(m)
        }
        BaselineKind::Rl => {
            let mut m = original.clone();
            let relabeled = relabel(&split.forget_set(), cfg.seed)?;
            run_unlearning(&mut m, &relabeled, Some(&remain), cfg, false)?;
            Ok(m)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, LayerSpec};

    fn toy_data(n: usize, classes: usize, label: impl Fn(usize) -> usize) -> Dataset {
        let x = Matrix::from_fn(n, 2, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.5);
        Dataset::new(x, (0..n).map(label).collect(), classes).unwrap()
    }

    #[test]
    fn binary_relabel_flips_every_label() {
        let d = toy_data(20, 2, |_| 0);
        let r = relabel(&d, 3).unwrap();
        assert!(r.data.labels.iter().all(|&y| y == 1));
        assert_eq!(r.original, vec![0; 20]);
    }

    #[test]
    fn relabel_needs_two_classes() {
        let d = toy_data(3, 1, |_| 0);
        assert!(matches!(relabel(&d, 0), Err(crate::Error::Config(_))));
    }

    #[test]
    fn relabel_is_fixed_per_seed() {
        let d = toy_data(50, 5, |i| i % 5);
        assert_eq!(relabel(&d, 1).unwrap(), relabel(&d, 1).unwrap());
        assert_ne!(relabel(&d, 1).unwrap().data.labels, relabel(&d, 2).unwrap().data.labels);
    }

    #[test]
    fn alpha_without_remain_is_rejected() {
        let m = crate::nn::init_model(&[LayerSpec::dense(2, 3, Activation::None)], 0).unwrap();
        let d = toy_data(4, 3, |i| i % 3);
        let err = unlearn_loss_classification(&m, (&d.features, &d.labels), None, 0.5);
        assert!(matches!(err, Err(crate::Error::Config(_))));
    }

    #[test]
    fn loss_decomposes_into_terms() {
        let m = crate::nn::init_model(
            &[LayerSpec::dense(2, 4, Activation::Relu), LayerSpec::dense(4, 3, Activation::None)],
            1,
        )
        .unwrap();
        let f = toy_data(5, 3, |i| i % 3);
        let r = toy_data(7, 3, |i| (i + 1) % 3);
        let alpha = 0.7;
        let (both, _) =
            unlearn_loss_classification(&m, (&f.features, &f.labels), Some((&r.features, &r.labels)), alpha)
                .unwrap();
        let (alone, _) = unlearn_loss_classification(&m, (&f.features, &f.labels), None, 0.0).unwrap();
        let ce_r = softmax_cross_entropy(&m.forward(&r.features).unwrap(), &r.labels).unwrap().0;
        assert!((both.total - (alone.total + alpha * ce_r)).abs() <= 1e-12);
        assert_eq!(alone.total, alone.forget);
    }

    #[test]
    fn confident_correct_forget_term_vanishes() {
        let mut m = crate::nn::init_model(&[LayerSpec::dense(1, 2, Activation::None)], 0).unwrap();
        m.layers[0].weight = Matrix::zeros(2, 1);
        m.layers[0].bias = vec![-1e4, 1e4];
        let x = Matrix::from_rows(&[vec![0.3], vec![-0.2]]).unwrap();
        let (parts, _) = unlearn_loss_classification(&m, (&x, &[1, 1]), None, 0.0).unwrap();
        assert_eq!(parts.forget, 0.0);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!("with_subset".parse::<Mode>().unwrap(), Mode::WithSubset);
        assert!(matches!("both".parse::<Mode>(), Err(crate::Error::Config(_))));
        assert!(matches!("salun".parse::<BaselineKind>(), Err(crate::Error::Config(_))));
    }
}
