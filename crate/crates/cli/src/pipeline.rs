//! The work behind each subcommand. Every function writes its artifacts
//! under `out` with fixed file names and returns what it wrote.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use semu::adapter::{merge_adapters, write_spectrum_csv, AdaptedModel, LayerSpectrum};
use semu::data::{load_csv, make_blobs, split_forget, Dataset, DatasetSplit};
use semu::diffusion::{
    evaluate_generation, generate_labeled, make_mixture, run_semu_generation, train_ddpm, write_samples_csv,
    CondNoiseModel, Conditioning, GenSemuRun, GenerationEval,
};
use semu::metrics::{build_report, GenerationSummary, LayerRank, Metrics, RunMeta, Seeds, UnlearnReport};
use semu::nn::{init_model, train, Model};
use semu::unlearn::{run_baseline, run_semu, write_epoch_log, BaselineKind, Mode, SemuRun};

use crate::config::{mlp_specs, DatasetSpec, DiffusionSpec, RunConfig, Task};
use crate::error::{io_at, CliError, CliResult};

pub const CHECKPOINT: &str = "checkpoint.json";
pub const REPORT: &str = "report.json";
pub const SPECTRUM: &str = "spectrum.csv";
pub const SAMPLES: &str = "samples.csv";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const UNLEARN_LOG: &str = "unlearn_log.csv";

/// Flags shared by the subcommands.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub log_metrics: bool,
    pub record_time: bool,
    /// Permission to read the remain set during unlearning.
    pub remain_access: bool,
    /// Overrides the configured unlearning mode.
    pub mode: Option<Mode>,
    pub retrain_report: Option<PathBuf>,
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    io_at(path, File::create(path)).map(BufWriter::new)
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> CliResult<()> {
    let mut w = create(path)?;
    io_at(path, f(&mut w).and_then(|_| w.flush()))
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    io_at(dir, std::fs::create_dir_all(dir))
}

pub fn write_report(path: &Path, report: &UnlearnReport) -> CliResult<()> {
    let text = serde_json::to_string_pretty(report).map_err(|e| CliError::Io(e.to_string()))?;
    io_at(path, std::fs::write(path, text + "\n"))
}

pub fn read_report(path: &Path) -> CliResult<UnlearnReport> {
    let text = io_at(path, std::fs::read_to_string(path))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: not a report: {e}", path.display())))
}

fn seeds(cfg: &RunConfig) -> Seeds {
    Seeds {
        model_seed: cfg.seeds.model_seed,
        data_seed: cfg.seeds.data_seed,
        unlearn_seed: cfg.seeds.unlearn_seed,
    }
}

fn check_remain_access(mode: Mode, opts: &RunOptions) -> CliResult<()> {
    if mode.uses_remain() && !opts.remain_access {
        return Err(CliError::config(format!(
            "mode {} reads the remain set; pass --remain-access to allow it",
            mode.name()
        )));
    }
    Ok(())
}

fn retrain_anchor(opts: &RunOptions) -> CliResult<Option<UnlearnReport>> {
    opts.retrain_report.as_deref().map(read_report).transpose()
}

fn spectrum_summary(adapted: &AdaptedModel) -> Vec<LayerRank> {
    adapted
        .base
        .layers
        .iter()
        .zip(adapted.ranks())
        .enumerate()
        .map(|(layer, (l, rank))| LayerRank {
            layer,
            rows: l.weight.rows(),
            cols: l.weight.cols(),
            rank,
        })
        .collect()
}

fn write_spectrum(out: &Path, spectra: &[LayerSpectrum]) -> CliResult<()> {
    write_with(&out.join(SPECTRUM), |w| write_spectrum_csv(spectra, w))
}

// ---------------------------------------------------------------- classification

/// Train and test sets of a classification config.
pub fn load_data(cfg: &RunConfig) -> CliResult<(Dataset, Dataset)> {
    match cfg.dataset()? {
        DatasetSpec::Blobs(b) => Ok(make_blobs(b, cfg.seeds.data_seed)?),
        DatasetSpec::Csv(c) => {
            let (train, tm) = load_csv(&c.train, &c.label_column)?;
            let (test, sm) = load_csv(&c.test, &c.label_column)?;
            if tm != sm {
                return Err(CliError::config(format!(
                    "label values differ between {} and {}",
                    c.train.display(),
                    c.test.display()
                )));
            }
            if train.dim() != test.dim() {
                return Err(CliError::config("train and test files have different feature counts"));
            }
            Ok((train, test))
        }
    }
}

fn classifier_specs(cfg: &RunConfig, data: &Dataset) -> CliResult<Vec<semu::nn::LayerSpec>> {
    cfg.model()?.layer_specs(data.dim(), data.num_classes)
}

pub struct TrainOutcome {
    pub model: Model,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

pub fn cmd_train(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> CliResult<TrainOutcome> {
    cfg.expect_task(Task::Classification)?;
    let (train_set, test_set) = load_data(cfg)?;
    let mut model = init_model(&classifier_specs(cfg, &train_set)?, cfg.seeds.model_seed)?;
    let log = train(&mut model, &train_set, cfg.train()?, cfg.seeds.model_seed)?;
    ensure_dir(out)?;
    model.save(&out.join(CHECKPOINT))?;
    if opts.log_metrics {
        write_with(&out.join(TRAIN_LOG), |w| {
            writeln!(w, "epoch,loss,accuracy")?;
            log.iter().try_for_each(|e| writeln!(w, "{},{},{}", e.epoch, e.loss, e.accuracy))
        })?;
    }
    Ok(TrainOutcome {
        train_accuracy: semu::metrics::accuracy(&model, &train_set)?,
        test_accuracy: semu::metrics::accuracy(&model, &test_set)?,
        model,
    })
}

/// Loads a classifier checkpoint and checks it against the config.
pub fn load_classifier(cfg: &RunConfig, path: &Path, data: &Dataset) -> CliResult<Model> {
    let model = Model::load(path)?;
    let expected = classifier_specs(cfg, data)?;
    if model.specs() != expected {
        return Err(CliError::config(format!(
            "{} does not match the configured model: checkpoint layers {:?}, config layers {:?}",
            path.display(),
            model.specs(),
            expected
        )));
    }
    Ok(model)
}

/// Data, forget split and original model of a classification run.
pub struct Prepared {
    pub model: Model,
    pub split: DatasetSplit,
}

pub fn prepare(cfg: &RunConfig, checkpoint: &Path) -> CliResult<Prepared> {
    cfg.expect_task(Task::Classification)?;
    let (train_set, test_set) = load_data(cfg)?;
    let model = load_classifier(cfg, checkpoint, &train_set)?;
    let split = split_forget(&train_set, &test_set, cfg.forgetting()?, cfg.seeds.data_seed)?;
    Ok(Prepared { model, split })
}

pub struct UnlearnOutcome {
    pub run: SemuRun,
    pub model: Model,
    pub report: UnlearnReport,
}

/// SEMU on a prepared classification run, without touching the disk.
pub fn unlearn_prepared(cfg: &RunConfig, prep: &Prepared, opts: &RunOptions) -> CliResult<UnlearnOutcome> {
    let semu_cfg = cfg.semu()?;
    let mut ucfg = cfg.unlearn()?;
    if let Some(mode) = opts.mode {
        ucfg.mode = mode;
    }
    check_remain_access(ucfg.mode, opts)?;
    let retrain = retrain_anchor(opts)?;
    let start = Instant::now();
    let run = run_semu(&prep.model, &prep.split, semu_cfg, &ucfg, opts.log_metrics)?;
    let model = merge_adapters(&run.adapted);
    let elapsed = start.elapsed().as_secs_f64();
    let meta = RunMeta {
        method: "semu".into(),
        mode: ucfg.mode.name().into(),
        gamma: Some(semu_cfg.gamma_default),
        seeds: seeds(cfg),
        epochs: Some(ucfg.epochs),
        mia_seed: cfg.eval.mia_seed,
    };
    let mut report = build_report(
        &model,
        &prep.split,
        run.adapted.trainable_params(),
        run.adapted.total_params(),
        retrain.as_ref(),
        &meta,
    )?;
    report.spectrum_summary = spectrum_summary(&run.adapted);
    report.wallclock_s = opts.record_time.then_some(elapsed);
    Ok(UnlearnOutcome { run, model, report })
}

pub fn cmd_unlearn(cfg: &RunConfig, checkpoint: &Path, out: &Path, opts: &RunOptions) -> CliResult<UnlearnOutcome> {
    let prep = prepare(cfg, checkpoint)?;
    let outcome = unlearn_prepared(cfg, &prep, opts)?;
    ensure_dir(out)?;
    outcome.model.save(&out.join(CHECKPOINT))?;
    write_spectrum(out, &outcome.run.spectra)?;
    write_report(&out.join(REPORT), &outcome.report)?;
    if opts.log_metrics {
        write_with(&out.join(UNLEARN_LOG), |w| write_epoch_log(&outcome.run.log, w))?;
    }
    Ok(outcome)
}

pub fn cmd_baseline(
    kind: BaselineKind,
    cfg: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    opts: &RunOptions,
) -> CliResult<UnlearnReport> {
    let prep = prepare(cfg, checkpoint)?;
    let mut ucfg = cfg.unlearn()?;
    if let Some(mode) = opts.mode {
        ucfg.mode = mode;
    }
    // Only relabeling replays remain data by mode; ft and retrain are remain-set methods.
    let mode = match kind {
        BaselineKind::Rl => ucfg.mode,
        BaselineKind::Ga => Mode::ForgetOnly,
        BaselineKind::Ft | BaselineKind::Retrain => Mode::WithRemain,
    };
    check_remain_access(mode, opts)?;
    let retrain_cfg = cfg.retrain()?;
    let retrain = retrain_anchor(opts)?;
    let start = Instant::now();
    let model = run_baseline(kind, &prep.model, &prep.split, &ucfg, retrain_cfg)?;
    let elapsed = start.elapsed().as_secs_f64();
    let epochs = match kind {
        BaselineKind::Retrain => retrain_cfg.epochs,
        _ => ucfg.epochs,
    };
    let meta = RunMeta {
        method: kind.name().into(),
        mode: mode.name().into(),
        gamma: None,
        seeds: seeds(cfg),
        epochs: Some(epochs),
        mia_seed: cfg.eval.mia_seed,
    };
    let n = model.weight_param_count();
    let mut report = build_report(&model, &prep.split, n, n, retrain.as_ref(), &meta)?;
    report.wallclock_s = opts.record_time.then_some(elapsed);
    ensure_dir(out)?;
    model.save(&out.join(CHECKPOINT))?;
    write_report(&out.join(REPORT), &report)?;
    Ok(report)
}

/// Metrics of a checkpoint as it stands, under the configured split.
pub fn cmd_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path, opts: &RunOptions) -> CliResult<UnlearnReport> {
    let prep = prepare(cfg, checkpoint)?;
    let retrain = retrain_anchor(opts)?;
    let meta = RunMeta {
        method: "original".into(),
        mode: "none".into(),
        gamma: None,
        seeds: seeds(cfg),
        epochs: None,
        mia_seed: cfg.eval.mia_seed,
    };
    let report = build_report(&prep.model, &prep.split, 0, prep.model.weight_param_count(), retrain.as_ref(), &meta)?;
    ensure_dir(out)?;
    write_report(&out.join(REPORT), &report)?;
    Ok(report)
}

/// Subspace selection only; the model is left alone.
pub fn cmd_spectrum(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> CliResult<Vec<LayerSpectrum>> {
    let spectra = match cfg.task {
        Task::Classification => {
            let prep = prepare(cfg, checkpoint)?;
            let ucfg = cfg.unlearn()?;
            let forget = prep.split.forget_set();
            let mut loss = semu::adapter::CrossEntropyForget { data: &forget };
            let semu_cfg = cfg.semu()?;
            let grads = semu::adapter::accumulate_forget_gradients(
                &prep.model,
                &mut loss,
                ucfg.batch_size,
                semu_cfg.grad_reduction,
            )?;
            semu::adapter::spectrum_report(&grads, &prep.model, semu_cfg)?
        }
        Task::Diffusion => {
            let d = cfg.diffusion()?;
            let g = cfg.generation()?;
            let model = load_generator(cfg, checkpoint)?;
            let (train_set, _) = make_mixture(&d.mixture, cfg.seeds.data_seed)?;
            let forget = train_set.subset(&train_set.class_indices(g.forget_class));
            let semu_cfg = cfg.semu()?;
            let schedule = model.schedule.build()?;
            let mut loss = semu::diffusion::DenoisingForget::new(&forget, model.cond, schedule, g.seed);
            let grads = semu::adapter::accumulate_forget_gradients(
                &model.net,
                &mut loss,
                d.forget_batch_size,
                semu_cfg.grad_reduction,
            )?;
            semu::adapter::spectrum_report(&grads, &model.net, semu_cfg)?
        }
    };
    ensure_dir(out)?;
    write_spectrum(out, &spectra)?;
    Ok(spectra)
}

// ---------------------------------------------------------------- diffusion

fn conditioning(d: &DiffusionSpec) -> Conditioning {
    Conditioning {
        num_classes: d.mixture.num_classes,
        embed_dim: d.embed_dim,
    }
}

fn guidance_w(cfg: &RunConfig) -> f64 {
    cfg.generation.as_ref().map_or(0.8, |g| g.guidance_w)
}

/// The frozen judge of generated samples, trained on the mixture.
pub fn train_oracle(cfg: &RunConfig, train_set: &Dataset) -> CliResult<Model> {
    let d = cfg.diffusion()?;
    let specs = mlp_specs(2, &d.oracle.hidden, d.mixture.num_classes);
    let mut oracle = init_model(&specs, cfg.seeds.model_seed)?;
    train(&mut oracle, train_set, &d.oracle.train, cfg.seeds.model_seed)?;
    Ok(oracle)
}

pub fn load_generator(cfg: &RunConfig, path: &Path) -> CliResult<CondNoiseModel> {
    let d = cfg.diffusion()?;
    let model = CondNoiseModel::load(path)?;
    let expected = CondNoiseModel::new(conditioning(d), &d.hidden, d.schedule, 0)?;
    if model.cond != expected.cond || model.schedule != expected.schedule || model.net.specs() != expected.net.specs() {
        return Err(CliError::config(format!(
            "{} does not match the configured diffusion model",
            path.display()
        )));
    }
    Ok(model)
}

pub struct DiffusionTrainOutcome {
    pub model: CondNoiseModel,
    pub eval: GenerationEval,
}

pub fn cmd_diffusion_train(cfg: &RunConfig, out: &Path, opts: &RunOptions) -> CliResult<DiffusionTrainOutcome> {
    cfg.expect_task(Task::Diffusion)?;
    let d = cfg.diffusion()?;
    let (train_set, _) = make_mixture(&d.mixture, cfg.seeds.data_seed)?;
    let mut model = CondNoiseModel::new(conditioning(d), &d.hidden, d.schedule, cfg.seeds.model_seed)?;
    let losses = train_ddpm(&mut model, &train_set, &d.train, cfg.seeds.model_seed)?;
    let oracle = train_oracle(cfg, &train_set)?;
    let samples = generate_labeled(&model, &oracle, guidance_w(cfg), cfg.eval.samples_per_class, cfg.eval.sample_seed)?;
    ensure_dir(out)?;
    model.save(&out.join(CHECKPOINT))?;
    write_with(&out.join(SAMPLES), |w| write_samples_csv(&samples, w))?;
    if opts.log_metrics {
        write_with(&out.join(TRAIN_LOG), |w| {
            writeln!(w, "epoch,loss")?;
            losses.iter().enumerate().try_for_each(|(i, l)| writeln!(w, "{i},{l}"))
        })?;
    }
    Ok(DiffusionTrainOutcome {
        eval: evaluate_generation(&samples, &d.mixture),
        model,
    })
}

pub struct GenUnlearnOutcome {
    pub original: CondNoiseModel,
    pub run: GenSemuRun,
    pub model: CondNoiseModel,
    pub report: UnlearnReport,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// SEMU on a pretrained generator. UA is the oracle's disagreement on the
/// forgotten class, RA the mean agreement and TA the mean in-distribution
/// rate over the other classes.
pub fn diffusion_unlearn_in_memory(
    cfg: &RunConfig,
    checkpoint: &Path,
    opts: &RunOptions,
) -> CliResult<(GenUnlearnOutcome, semu::diffusion::GeneratedSamples)> {
    cfg.expect_task(Task::Diffusion)?;
    let d = cfg.diffusion()?;
    let mut g = cfg.generation()?;
    if let Some(mode) = opts.mode {
        g.mode = mode;
    }
    check_remain_access(g.mode, opts)?;
    let semu_cfg = cfg.semu()?;
    let original = load_generator(cfg, checkpoint)?;
    let (train_set, _) = make_mixture(&d.mixture, cfg.seeds.data_seed)?;
    let oracle = train_oracle(cfg, &train_set)?;
    let (w, n, sseed) = (g.guidance_w, cfg.eval.samples_per_class, cfg.eval.sample_seed);
    let before = evaluate_generation(&generate_labeled(&original, &oracle, w, n, sseed)?, &d.mixture);

    let fc = g.forget_class;
    let forget = train_set.subset(&train_set.class_indices(fc));
    let remain_idx: Vec<usize> = (0..train_set.len()).filter(|&i| train_set.labels[i] != fc).collect();
    let remain = train_set.subset(&remain_idx);
    let remain_arg = g.mode.uses_remain().then_some(&remain);

    let start = Instant::now();
    let run = run_semu_generation(&original, &forget, remain_arg, semu_cfg, &g, d.forget_batch_size)?;
    let model = original.with_net(merge_adapters(&run.adapted));
    let elapsed = start.elapsed().as_secs_f64();

    let samples = generate_labeled(&model, &oracle, w, n, sseed)?;
    let after = evaluate_generation(&samples, &d.mixture);
    let retained = || (0..d.mixture.num_classes).filter(move |&c| c != fc);
    let metrics = Metrics {
        ua: 100.0 - after.agreement[fc],
        ra: mean(retained().map(|c| after.agreement[c])),
        ta: mean(retained().map(|c| after.in_distribution[c])),
        mia: None,
        tparams_pct: semu::metrics::tparams_pct(run.adapted.trainable_params(), run.adapted.total_params()),
    };
    metrics.check_ranges();
    let retrain = retrain_anchor(opts)?;
    let report = UnlearnReport {
        method: "semu".into(),
        mode: g.mode.name().into(),
        gamma: Some(semu_cfg.gamma_default),
        seed: g.seed,
        deltas_vs_retrain: retrain.map(|r| metrics.deltas_from(&r.metrics)),
        metrics,
        wallclock_s: opts.record_time.then_some(elapsed),
        seeds: Some(seeds(cfg)),
        epochs: Some(g.iterations),
        spectrum_summary: spectrum_summary(&run.adapted),
        generation: Some(GenerationSummary {
            forget_class: fc,
            agreement_before: before.agreement,
            agreement_after: after.agreement,
            in_distribution_after: after.in_distribution,
        }),
    };
    Ok((
        GenUnlearnOutcome {
            original,
            run,
            model,
            report,
        },
        samples,
    ))
}

pub fn cmd_diffusion_unlearn(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    opts: &RunOptions,
) -> CliResult<GenUnlearnOutcome> {
    let (outcome, samples) = diffusion_unlearn_in_memory(cfg, checkpoint, opts)?;
    ensure_dir(out)?;
    outcome.model.save(&out.join(CHECKPOINT))?;
    write_with(&out.join(SAMPLES), |w| write_samples_csv(&samples, w))?;
    write_spectrum(out, &outcome.run.spectra)?;
    write_report(&out.join(REPORT), &outcome.report)?;
    if opts.log_metrics {
        write_with(&out.join(UNLEARN_LOG), |w| {
            writeln!(w, "iteration,loss_forget,loss_remain,loss_total")?;
            outcome.run.log.iter().enumerate().try_for_each(|(i, p)| {
                let r = p.remain.map(|x| x.to_string()).unwrap_or_default();
                writeln!(w, "{i},{},{r},{}", p.forget, p.total)
            })
        })?;
    }
    Ok(outcome)
}
