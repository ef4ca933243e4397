use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semu::data::{make_blobs, BlobsConfig, Dataset};
use semu::linalg::Matrix;
use semu::metrics::accuracy;
use semu::nn::{
    backward_ce, init_model, softmax_cross_entropy, train, Activation, Conv2dSpec, LayerSpec, Model,
    TrainConfig,
};

fn ce_loss(model: &Model, x: &Matrix, y: &[usize]) -> f64 {
    softmax_cross_entropy(&model.forward(x).unwrap(), y).unwrap().0
}

#[derive(Clone, Copy)]
enum Param {
    W(usize, usize, usize),
    B(usize, usize),
}

fn slot(m: &mut Model, p: Param) -> &mut f64 {
    match p {
        Param::W(l, i, j) => &mut m.layers[l].weight[(i, j)],
        Param::B(l, i) => &mut m.layers[l].bias[i],
    }
}

/// Central difference plus the gap between the one-sided differences.
fn central_difference(m: &mut Model, p: Param, x: &Matrix, y: &[usize], step: f64) -> (f64, f64) {
    let orig = *slot(m, p);
    let mid = ce_loss(m, x, y);
    *slot(m, p) = orig + step;
    let up = ce_loss(m, x, y);
    *slot(m, p) = orig - step;
    let down = ce_loss(m, x, y);
    *slot(m, p) = orig;
    let one_sided_gap = ((up - mid) - (mid - down)).abs() / step;
    ((up - down) / (2.0 * step), one_sided_gap)
}

/// Central differences on every weight and bias, step 1e-5. Parameters
/// sitting on a ReLU kink (one-sided slopes disagree) are skipped.
fn check_gradients(model: &Model, x: &Matrix, y: &[usize], tol: f64) -> usize {
    let (_, grads) = backward_ce(model, x, y).unwrap();
    let h = 1e-5;
    let mut skipped = 0;
    let mut m = model.clone();
    let mut params = Vec::new();
    for (l, layer) in model.layers.iter().enumerate() {
        let (rows, cols) = layer.weight.shape();
        for i in 0..rows {
            for j in 0..cols {
                params.push((Param::W(l, i, j), grads.weights[l][(i, j)]));
            }
        }
        for i in 0..layer.bias.len() {
            params.push((Param::B(l, i), grads.biases[l][i]));
        }
    }
    for (p, a) in params {
        let (n1, gap) = central_difference(&mut m, p, x, y, h);
        if gap > 1e-3 {
            skipped += 1;
            continue;
        }
        let scale = a.abs().max(n1.abs()).max(1e-3);
        assert!((a - n1).abs() <= tol * scale, "{a} vs {n1}");
    }
    skipped
}

fn random_input(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    Matrix::from_fn(n, d, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn dense_gradients_match_finite_differences() {
    let mut skipped = 0;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specs = [
            LayerSpec::dense(3, 5, Activation::Relu),
            LayerSpec::dense(5, 4, Activation::Relu),
            LayerSpec::dense(4, 3, Activation::None),
        ];
        let model = init_model(&specs, seed).unwrap();
        let x = random_input(&mut rng, 6, 3);
        let y: Vec<usize> = (0..6).map(|_| rng.random_range(0..3)).collect();
        skipped += check_gradients(&model, &x, &y, 1e-5);
    }
    assert!(skipped < 50, "too many kinks skipped: {skipped}");
}

#[test]
fn conv_gradients_match_finite_differences() {
    let mut skipped = 0;
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let padding = (seed % 2) as usize;
        let conv = Conv2dSpec {
            in_channels: 2,
            out_channels: 2,
            kernel_h: 2,
            kernel_w: 2,
            stride: 2,
            padding,
            input_h: 4,
            input_w: 4,
            activation: Activation::Relu,
        };
        let conv_spec = LayerSpec::Conv2d(conv);
        let specs = [conv_spec, LayerSpec::dense(conv_spec.out_features(), 3, Activation::None)];
        let model = init_model(&specs, seed).unwrap();
        assert!(model.param_count() <= 100);
        let x = random_input(&mut rng, 4, conv_spec.in_features());
        let y: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        skipped += check_gradients(&model, &x, &y, 1e-5);
    }
    assert!(skipped < 50, "too many kinks skipped: {skipped}");
}

#[test]
fn six_parameter_net() {
    // 2 -> 2 dense (4 weights + 2 biases), no activation
    let model = init_model(&[LayerSpec::dense(2, 2, Activation::None)], 9).unwrap();
    assert_eq!(model.param_count(), 6);
    let x = Matrix::from_rows(&[vec![0.3, -0.7], vec![1.1, 0.2]]).unwrap();
    assert_eq!(check_gradients(&model, &x, &[0, 1], 1e-5), 0);
}

#[test]
fn duplicated_batch_leaves_loss_and_gradient_unchanged() {
    let model = init_model(
        &[LayerSpec::dense(2, 4, Activation::Relu), LayerSpec::dense(4, 3, Activation::None)],
        4,
    )
    .unwrap();
    let x = Matrix::from_rows(&[vec![0.5, -1.0], vec![0.1, 0.9], vec![-0.4, 0.3]]).unwrap();
    let y = vec![0, 2, 1];
    let (l1, g1) = backward_ce(&model, &x, &y).unwrap();
    let x2 = x.select_rows(&[0, 1, 2, 0, 1, 2]);
    let y2 = vec![0, 2, 1, 0, 2, 1];
    let (l2, g2) = backward_ce(&model, &x2, &y2).unwrap();
    assert!((l1 - l2).abs() < 1e-15);
    for (a, b) in g1.weights.iter().zip(&g2.weights) {
        assert!(a.sub(b).unwrap().max_abs() < 1e-15);
    }
}

#[test]
fn forward_examples() {
    let mut model = init_model(&[LayerSpec::dense(3, 3, Activation::None)], 0).unwrap();
    model.layers[0].weight = Matrix::zeros(3, 3);
    let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]).unwrap();
    assert_eq!(model.forward(&x).unwrap(), Matrix::zeros(1, 3));

    model.layers[0].weight = Matrix::identity(3);
    assert_eq!(model.forward(&x).unwrap(), x);

    // hand computation: h = relu(W1 x + b1), out = W2 h + b2
    let mut net = init_model(
        &[LayerSpec::dense(2, 2, Activation::Relu), LayerSpec::dense(2, 2, Activation::None)],
        0,
    )
    .unwrap();
    net.layers[0].weight = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 1.0]]).unwrap();
    net.layers[0].bias = vec![0.5, -3.0];
    net.layers[1].weight = Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, -1.0]]).unwrap();
    net.layers[1].bias = vec![0.0, 1.0];
    // x = (1, 1): W1 x + b1 = (3.5, -3) -> relu (3.5, 0) -> (7, 4.5)
    let out = net.forward(&Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap()).unwrap();
    assert_eq!(out.row(0), &[7.0, 4.5]);
    assert!(net.forward(&Matrix::zeros(1, 3)).is_err());
}

#[test]
fn init_contract() {
    let spec = [LayerSpec::dense(4, 3, Activation::None)];
    let a = init_model(&spec, 1).unwrap();
    assert_eq!(a, init_model(&spec, 1).unwrap());
    assert_ne!(a.layers[0].weight, init_model(&spec, 2).unwrap().layers[0].weight);
    assert_eq!(a.layers[0].weight.shape(), (3, 4));
    assert_eq!(a.layers[0].bias, vec![0.0; 3]);
    let bound = (6.0f64 / 4.0).sqrt();
    assert!(a.layers[0].weight.as_slice().iter().all(|w| w.abs() <= bound));
    let bad = [LayerSpec::dense(4, 3, Activation::Relu), LayerSpec::dense(2, 1, Activation::None)];
    assert!(matches!(init_model(&bad, 0), Err(semu::Error::Config(_))));
}

fn two_blobs() -> Dataset {
    let cfg = BlobsConfig {
        num_classes: 2,
        per_class: 200,
        dim: 2,
        separation: 6.0,
        sigma: 1.0,
    };
    make_blobs(&cfg, 11).unwrap().0
}

#[test]
fn training_separates_two_blobs_deterministically() {
    let data = two_blobs();
    let specs = [LayerSpec::dense(2, 16, Activation::Relu), LayerSpec::dense(16, 2, Activation::None)];
    let cfg = TrainConfig {
        epochs: 30,
        lr: 0.05,
        momentum: 0.9,
        batch_size: 32,
    };
    let mut a = init_model(&specs, 3).unwrap();
    let log = train(&mut a, &data, &cfg, 7).unwrap();
    assert_eq!(log.len(), 30);
    assert!(accuracy(&a, &data).unwrap() >= 99.0);

    let mut b = init_model(&specs, 3).unwrap();
    train(&mut b, &data, &cfg, 7).unwrap();
    assert_eq!(
        serde_json::to_string(&a.to_checkpoint()).unwrap(),
        serde_json::to_string(&b.to_checkpoint()).unwrap()
    );

    let mut c = init_model(&specs, 3).unwrap();
    let before = c.clone();
    let zero = TrainConfig { epochs: 0, ..cfg.clone() };
    assert!(train(&mut c, &data, &zero, 7).unwrap().is_empty());
    assert_eq!(c, before);

    let empty = data.subset(&[]);
    assert!(matches!(train(&mut c, &empty, &cfg, 7), Err(semu::Error::Config(_))));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let conv = LayerSpec::Conv2d(Conv2dSpec {
        in_channels: 1,
        out_channels: 2,
        kernel_h: 3,
        kernel_w: 3,
        stride: 1,
        padding: 1,
        input_h: 4,
        input_w: 4,
        activation: Activation::Relu,
    });
    let model = init_model(&[conv, LayerSpec::dense(32, 3, Activation::None)], 12).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.json");
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back, model);
    let text = std::fs::read_to_string(&path).unwrap();
    assert!(text.starts_with(r#"{"format":"semu-ckpt-v1","layers":[{"kind":"conv2d""#), "{text}");
}
