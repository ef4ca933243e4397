use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semu::adapter::{
    accumulate_forget_gradients, build_adapters, captured_fraction, merge_adapters, selection_gradient,
    CrossEntropyForget, ForgetLoss, Reduction, SemuConfig,
};
use semu::data::Dataset;
use semu::linalg::{frobenius_inner, Matrix};
use semu::nn::{init_model, softmax_cross_entropy, Activation, LayerSpec, Model, Trainable};
use semu::unlearn::{relabel, run_unlearning, unlearn_loss_classification, Mode, UnlearnConfig};

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn random_data(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Dataset {
    let x = random_matrix(rng, n, dim);
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Dataset::new(x, y, classes).unwrap()
}

fn mlp(dims: &[usize], seed: u64) -> Model {
    let specs: Vec<LayerSpec> = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i + 2 < dims.len() { Activation::Relu } else { Activation::None };
            LayerSpec::dense(w[0], w[1], act)
        })
        .collect();
    init_model(&specs, seed).unwrap()
}

fn forget_grads(model: &Model, data: &Dataset, batch: usize) -> semu::nn::GradientSet {
    let mut loss = CrossEntropyForget { data };
    accumulate_forget_gradients(model, &mut loss, batch, Reduction::Sum).unwrap()
}

fn ce(model: &Model, x: &Matrix, y: &[usize]) -> f64 {
    softmax_cross_entropy(&model.forward(x).unwrap(), y).unwrap().0
}

/// Forward pass written against the factored weights `A + U R Vᵀ`.
fn factored_forward(adapted: &semu::adapter::AdaptedModel, x: &Matrix) -> Matrix {
    let mut h = x.clone();
    for (layer, adapter) in adapted.base.layers.iter().zip(&adapted.adapters) {
        let mut z = h.matmul_t(&layer.weight).unwrap();
        if let Some(a) = adapter {
            let low = h.matmul(&a.v).unwrap().matmul_t(&a.r).unwrap().matmul_t(&a.u).unwrap();
            z.add_assign(&low).unwrap();
        }
        for i in 0..z.rows() {
            for (j, v) in z.row_mut(i).iter_mut().enumerate() {
                *v += layer.bias[j];
            }
        }
        if matches!(layer.spec.activation(), Activation::Relu) {
            for v in z.as_mut_slice() {
                *v = v.max(0.0);
            }
        }
        h = z;
    }
    h
}

#[test]
fn identity_at_init_is_bitwise() {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = mlp(&[3, 8, 6, 4], seed);
        let data = random_data(&mut rng, 40, 3, 4);
        let adapted = build_adapters(&model, &forget_grads(&model, &data, 16), &SemuConfig::with_gamma(0.9)).unwrap();
        assert!(adapted.trainable_params() > 0);
        let x = random_matrix(&mut rng, 50, 3);
        assert_eq!(adapted.forward(&x).unwrap(), model.forward(&x).unwrap());
        assert_eq!(merge_adapters(&adapted), model);
    }
}

#[test]
fn merged_model_matches_factored_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = mlp(&[4, 10, 8, 3], 7);
    let data = random_data(&mut rng, 60, 4, 3);
    let mut adapted = build_adapters(&model, &forget_grads(&model, &data, 20), &SemuConfig::with_gamma(0.99)).unwrap();
    for a in adapted.adapters.iter_mut().flatten() {
        let r = a.rank();
        a.r = random_matrix(&mut rng, r, r);
    }
    let x = random_matrix(&mut rng, 100, 4);
    let merged = merge_adapters(&adapted).forward(&x).unwrap();
    let factored = factored_forward(&adapted, &x);
    assert!(merged.sub(&factored).unwrap().max_abs() <= 1e-12);
}

#[test]
fn two_identical_batches_double_the_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = mlp(&[3, 5, 3], 3);
    let data = random_data(&mut rng, 12, 3, 3);
    let twice = data.concat(&data).unwrap();
    let one = forget_grads(&model, &data, 12);
    let two = forget_grads(&model, &twice, 12);
    for (a, b) in one.weights.iter().zip(&two.weights) {
        assert_eq!(a.scale(2.0), *b);
    }
    for (a, b) in one.biases.iter().zip(&two.biases) {
        let doubled: Vec<f64> = a.iter().map(|v| 2.0 * v).collect();
        assert_eq!(&doubled, b);
    }
    // a single batch is that batch's negated gradient
    let (_, g) = semu::nn::backward_ce(&model, &data.features, &data.labels).unwrap();
    for (a, b) in one.weights.iter().zip(&g.weights) {
        assert_eq!(*a, b.scale(-1.0));
    }
}

#[test]
fn accumulated_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut model = mlp(&[2, 3, 2], 21);
    let data = random_data(&mut rng, 10, 2, 2);
    let batch = 4;
    let g = forget_grads(&model, &data, batch);
    let total = |m: &Model| -> f64 {
        (0..data.len())
            .collect::<Vec<_>>()
            .chunks(batch)
            .map(|idx| {
                let (x, y) = data.batch(idx);
                -ce(m, &x, &y)
            })
            .sum()
    };
    let h = 1e-6;
    for l in 0..model.layers.len() {
        let (rows, cols) = model.layers[l].weight.shape();
        for i in 0..rows {
            for j in 0..cols {
                let orig = model.layers[l].weight[(i, j)];
                model.layers[l].weight[(i, j)] = orig + h;
                let up = total(&model);
                model.layers[l].weight[(i, j)] = orig - h;
                let down = total(&model);
                model.layers[l].weight[(i, j)] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = g.weights[l][(i, j)];
                assert!((a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-3), "{a} vs {fd}");
            }
        }
    }
}

/// Loss of the adapted model with the given R entries, at fixed batches.
fn lc_at(adapted: &semu::adapter::AdaptedModel, f: (&Matrix, &[usize]), r: Option<(&Matrix, &[usize])>, alpha: f64) -> f64 {
    let m = merge_adapters(adapted);
    let forget = ce(&m, f.0, f.1);
    forget + r.map_or(0.0, |(x, y)| alpha * ce(&m, x, y))
}

#[test]
fn classification_loss_gradient_over_r_matches_finite_differences() {
    let h = 1e-6;
    let mut skipped = 0;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let model = mlp(&[3, 6, 5, 4], seed);
        let data = random_data(&mut rng, 30, 3, 4);
        let mut adapted =
            build_adapters(&model, &forget_grads(&model, &data, 10), &SemuConfig::with_gamma(0.95)).unwrap();
        for a in adapted.adapters.iter_mut().flatten() {
            let r = a.rank();
            a.r = random_matrix(&mut rng, r, r).scale(0.5);
        }
        let fd = random_data(&mut rng, 5, 3, 4);
        let rd = random_data(&mut rng, 7, 3, 4);
        let alpha = if seed % 2 == 0 { 0.0 } else { 0.7 };
        let remain = (alpha > 0.0).then_some((&rd.features, rd.labels.as_slice()));
        let merged = merge_adapters(&adapted);
        let (parts, grads) =
            unlearn_loss_classification(&merged, (&fd.features, &fd.labels), remain, alpha).unwrap();
        assert!((parts.total - lc_at(&adapted, (&fd.features, &fd.labels), remain, alpha)).abs() < 1e-12);
        let analytic = adapted.trainable_grads(&grads).unwrap();
        let slots: Vec<(usize, usize)> = adapted
            .adapters
            .iter()
            .enumerate()
            .filter_map(|(l, a)| a.as_ref().map(|a| (l, a.rank())))
            .collect();
        for (group, &(l, r)) in slots.iter().enumerate() {
            for k in 0..r * r {
                let orig = adapted.adapters[l].as_ref().unwrap().r.as_slice()[k];
                let mut at = |v: f64| {
                    adapted.adapters[l].as_mut().unwrap().r.as_mut_slice()[k] = v;
                    lc_at(&adapted, (&fd.features, &fd.labels), remain, alpha)
                };
                let (up, mid, down) = (at(orig + h), at(orig), at(orig - h));
                at(orig);
                if ((up - mid) - (mid - down)).abs() / h > 1e-3 {
                    skipped += 1;
                    continue;
                }
                let num = (up - down) / (2.0 * h);
                let a = analytic[group][k];
                assert!((a - num).abs() <= 1e-5 * a.abs().max(num.abs()).max(1e-3), "seed {seed}: {a} vs {num}");
            }
        }
    }
    assert!(skipped < 50, "too many kinks skipped: {skipped}");
}

#[test]
fn projected_gradient_is_perpendicular_to_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = mlp(&[4, 12, 9, 5], 5);
    let data = random_data(&mut rng, 80, 4, 5);
    let grads = forget_grads(&model, &data, 16);
    let cfg = SemuConfig::with_gamma(0.9);
    for l in 0..model.layers.len() {
        let gp = selection_gradient(&model, &grads, &cfg, l).unwrap();
        let a = &model.layers[l].weight;
        let inner = frobenius_inner(&gp, a).unwrap().abs();
        assert!(inner <= 1e-8 * grads.weights[l].frobenius_norm() * a.frobenius_norm());
    }
}

#[test]
fn capacity_is_monotone_in_gamma() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = mlp(&[5, 16, 12, 6], 8);
    let data = random_data(&mut rng, 120, 5, 6);
    let grads = forget_grads(&model, &data, 32);
    let mut prev_ranks = vec![0; model.layers.len()];
    let mut prev_total = 0;
    for k in 0..=20 {
        let gamma = k as f64 / 20.0;
        let adapted = build_adapters(&model, &grads, &SemuConfig::with_gamma(gamma)).unwrap();
        let ranks = adapted.ranks();
        assert!(ranks.iter().zip(&prev_ranks).all(|(r, p)| r >= p), "gamma {gamma}: {ranks:?} < {prev_ranks:?}");
        assert!(adapted.trainable_params() >= prev_total);
        assert_eq!(adapted.trainable_params(), ranks.iter().map(|r| r * r).sum::<usize>());
        for (l, a) in adapted.adapters.iter().enumerate() {
            if let Some(a) = a {
                let g = selection_gradient(&model, &grads, &SemuConfig::with_gamma(gamma), l).unwrap();
                assert!(captured_fraction(&g, a).unwrap() >= gamma - 1e-12);
            }
        }
        prev_ranks = ranks;
        prev_total = adapted.trainable_params();
    }
}

#[test]
fn relabel_is_uniform_over_alternatives() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let data = random_data(&mut rng, 1000, 2, 10);
    let rel = relabel(&data, 4).unwrap();
    let mut counts = [0usize; 9];
    for (new, old) in rel.data.labels.iter().zip(&rel.original) {
        assert_ne!(new, old);
        counts[(new + 10 - old) % 10 - 1] += 1;
    }
    let n = 1000.0f64;
    let p = 1.0 / 9.0;
    let sd = (n * p * (1.0 - p)).sqrt();
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - n * p).powi(2) / (n * p)).sum();
    for &c in &counts {
        assert!((c as f64 - n * p).abs() <= 3.0 * sd, "{counts:?}");
    }
    // 99.9th percentile of chi-square with 8 degrees of freedom
    assert!(chi2 < 26.12, "chi2 {chi2}");
}

#[test]
fn relabel_never_keeps_a_label() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = random_data(&mut rng, 200, 2, 2 + (seed as usize % 5));
        let rel = relabel(&data, seed).unwrap();
        assert!(rel.data.labels.iter().zip(&rel.original).all(|(a, b)| a != b));
        assert!(rel.data.labels.iter().all(|&c| c < data.num_classes));
    }
}

#[test]
fn loss_decomposes_into_forget_and_remain_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let model = mlp(&[3, 7, 4], 17);
    let f = random_data(&mut rng, 9, 3, 4);
    let r = random_data(&mut rng, 11, 3, 4);
    let alpha = 0.35;
    let (alone, _) = unlearn_loss_classification(&model, (&f.features, &f.labels), None, 0.0).unwrap();
    let (both, _) =
        unlearn_loss_classification(&model, (&f.features, &f.labels), Some((&r.features, &r.labels)), alpha).unwrap();
    let ce_r = ce(&model, &r.features, &r.labels);
    assert!((both.total - (alone.total + alpha * ce_r)).abs() <= 1e-12);
    assert_eq!(alone.total, ce(&model, &f.features, &f.labels));
}

fn unlearn_cfg(mode: Mode, alpha: f64, epochs: usize) -> UnlearnConfig {
    UnlearnConfig {
        epochs,
        lr: 0.05,
        momentum: 0.9,
        batch_size: 8,
        alpha,
        mode,
        subset_fraction: 0.05,
        seed: 2,
    }
}

#[test]
fn remain_mode_without_remain_data_matches_forget_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let model = mlp(&[3, 8, 4], 31);
    let data = random_data(&mut rng, 40, 3, 4);
    let forget = relabel(&data, 1).unwrap();
    let grads = forget_grads(&model, &data, 10);
    let base = build_adapters(&model, &grads, &SemuConfig::with_gamma(0.9)).unwrap();
    let empty = Dataset::new(Matrix::zeros(0, 3), Vec::new(), 4).unwrap();

    let mut a = base.clone();
    let log_a = run_unlearning(&mut a, &forget, None, &unlearn_cfg(Mode::ForgetOnly, 1.0, 4), false).unwrap();
    let mut b = base.clone();
    let log_b = run_unlearning(&mut b, &forget, Some(&empty), &unlearn_cfg(Mode::WithRemain, 0.0, 4), false).unwrap();
    assert_eq!(a, b);
    assert_eq!(log_a, log_b);
    assert_ne!(a, base);
}

#[test]
fn unlearning_touches_only_r() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let model = mlp(&[3, 8, 6, 4], 41);
    let data = random_data(&mut rng, 40, 3, 4);
    let remain = random_data(&mut rng, 80, 3, 4);
    let forget = relabel(&data, 3).unwrap();
    let base = build_adapters(&model, &forget_grads(&model, &data, 10), &SemuConfig::with_gamma(0.9)).unwrap();

    let mut zero = base.clone();
    run_unlearning(&mut zero, &forget, None, &unlearn_cfg(Mode::ForgetOnly, 1.0, 0), false).unwrap();
    let x = random_matrix(&mut rng, 20, 3);
    assert_eq!(zero.forward(&x).unwrap(), model.forward(&x).unwrap());

    for mode in [Mode::ForgetOnly, Mode::WithRemain, Mode::WithSubset] {
        let mut run = base.clone();
        run_unlearning(&mut run, &forget, Some(&remain), &unlearn_cfg(mode, 1.0, 3), false).unwrap();
        assert_eq!(run.base, model, "{mode:?}");
        for (a, b) in run.adapters.iter().zip(&base.adapters) {
            match (a, b) {
                (Some(a), Some(b)) => {
                    assert_eq!((&a.u, &a.v), (&b.u, &b.v));
                    assert_ne!(a.r, b.r);
                }
                (None, None) => {}
                _ => panic!("adapter placement changed"),
            }
        }
    }
}

#[test]
fn with_remain_requires_the_remain_set() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let model = mlp(&[3, 5, 3], 43);
    let data = random_data(&mut rng, 20, 3, 3);
    let forget = relabel(&data, 0).unwrap();
    let mut a = build_adapters(&model, &forget_grads(&model, &data, 10), &SemuConfig::with_gamma(0.9)).unwrap();
    let err = run_unlearning(&mut a, &forget, None, &unlearn_cfg(Mode::WithRemain, 1.0, 1), false).unwrap_err();
    assert!(matches!(err, semu::Error::Config(_)));
}

#[test]
fn forget_loss_trait_counts_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let data = random_data(&mut rng, 17, 2, 3);
    let loss = CrossEntropyForget { data: &data };
    assert_eq!(loss.num_samples(), 17);
}
