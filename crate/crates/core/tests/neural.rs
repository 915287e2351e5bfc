use coach_core::neural::gradcheck::check_gradients;
use coach_core::neural::loss::Reduction;
use coach_core::neural::train::{accuracy, loss_and_gradients};
use coach_core::neural::{
    train, Activation, Dataset, LayerSpec, LossKind, Network, NetworkSpec, Targets, Tensor, Tensor2, Tensor3,
    TrainConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

fn random_seq(rng: &mut ChaCha8Rng, batch: usize, time: usize, features: usize) -> Tensor3 {
    let data = (0..batch * time * features).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor3::from_vec(batch, time, features, data).unwrap()
}

fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}

fn check(spec: NetworkSpec, inputs: Tensor, targets: Targets) -> f64 {
    let net = Network::new(spec).unwrap();
    check_gradients(&net, &inputs, &targets, FD_STEP).unwrap().max_relative_error
}

fn recurrent_case(seed: u64, layer: LayerSpec, pooled: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = NetworkSpec::new(
        vec![
            layer,
            LayerSpec::LastStep,
            LayerSpec::Dense { input: pooled, output: 2, activation: Activation::Identity },
        ],
        LossKind::SoftmaxCrossEntropy,
        seed,
    );
    let x = random_seq(&mut rng, 3, 4, 3);
    let labels = (0..3).map(|_| rng.random_range(0..2)).collect();
    check(spec, Tensor::Seq(x), Targets::Classes(labels))
}

#[test]
fn dense_gradients_match_finite_differences() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = NetworkSpec::new(
            vec![
                LayerSpec::Dense { input: 4, output: 5, activation: Activation::Tanh },
                LayerSpec::Dense { input: 5, output: 4, activation: Activation::Sigmoid },
                LayerSpec::Dense { input: 4, output: 3, activation: Activation::Identity },
            ],
            LossKind::MeanSquared,
            seed,
        );
        let err = check(spec, Tensor::Mat(random_mat(&mut rng, 5, 4)), Targets::Values(random_mat(&mut rng, 5, 3)));
        assert!(err < TOLERANCE, "seed {seed}: rel err {err}");
    }
}

#[test]
fn lstm_gradients_match_finite_differences() {
    for seed in 0..20 {
        let err = recurrent_case(seed, LayerSpec::Lstm { input: 3, hidden: 4 }, 4);
        assert!(err < TOLERANCE, "seed {seed}: rel err {err}");
    }
}

#[test]
fn gru_gradients_match_finite_differences() {
    for seed in 0..20 {
        let err = recurrent_case(seed, LayerSpec::Gru { input: 3, hidden: 4 }, 4);
        assert!(err < TOLERANCE, "seed {seed}: rel err {err}");
    }
}

#[test]
fn bilstm_gradients_match_finite_differences() {
    for seed in 0..20 {
        let err = recurrent_case(seed, LayerSpec::Bidirectional { input: 3, hidden: 3 }, 6);
        assert!(err < TOLERANCE, "seed {seed}: rel err {err}");
    }
}

#[test]
fn stacked_recurrent_gradients_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let spec = NetworkSpec::new(
        vec![
            LayerSpec::Bidirectional { input: 2, hidden: 3 },
            LayerSpec::Gru { input: 6, hidden: 3 },
            LayerSpec::LastStep,
            LayerSpec::Dense { input: 3, output: 2, activation: Activation::Relu },
        ],
        LossKind::MeanSquared,
        7,
    );
    let err = check(spec, Tensor::Seq(random_seq(&mut rng, 2, 5, 2)), Targets::Values(random_mat(&mut rng, 2, 2)));
    assert!(err < TOLERANCE, "rel err {err}");
}

#[test]
fn zero_network_at_zero_targets_is_stationary() {
    let spec = NetworkSpec::mlp(&[3, 4, 2], Activation::Relu, LossKind::MeanSquared, 0);
    let net = Network::zeros(spec).unwrap();
    let x = Tensor2::from_vec(2, 3, vec![1.0, -2.0, 0.5, 0.3, 0.1, -0.7]).unwrap();
    let (_, grads) = loss_and_gradients(&net, &Tensor::Mat(x), &Targets::Values(Tensor2::zeros(2, 2)), Reduction::Mean)
        .unwrap();
    assert!(grads.iter().all(|&g| g == 0.0));
}

#[test]
fn duplicated_batch_scales_sum_gradients_linearly() {
    let spec = NetworkSpec::new(
        vec![
            LayerSpec::Lstm { input: 2, hidden: 3 },
            LayerSpec::LastStep,
            LayerSpec::Dense { input: 3, output: 2, activation: Activation::Identity },
        ],
        LossKind::SoftmaxCrossEntropy,
        5,
    );
    let net = Network::new(spec).unwrap();
    let one = Tensor3::from_vec(1, 3, 2, vec![0.2, -0.1, 0.4, 0.4, -0.3, 0.9]).unwrap();
    let (_, base) =
        loss_and_gradients(&net, &Tensor::Seq(one.clone()), &Targets::Classes(vec![1]), Reduction::Sum).unwrap();
    for k in [2usize, 3, 5] {
        let batch = one.select_batch(&vec![0; k]);
        let (_, g) =
            loss_and_gradients(&net, &Tensor::Seq(batch), &Targets::Classes(vec![1; k]), Reduction::Sum).unwrap();
        for (a, b) in g.iter().zip(&base) {
            assert!((a - k as f64 * b).abs() <= 1e-12 * (1.0 + b.abs() * k as f64), "k={k}: {a} vs {}", k as f64 * b);
        }
    }
}

fn separable_set(seed: u64, n: usize) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    while rows.len() < n {
        let x: f64 = rng.random_range(-1.0..1.0);
        let y: f64 = rng.random_range(-1.0..1.0);
        // margin around the separating line x + y = 0
        if (x + y).abs() < 0.1 {
            continue;
        }
        rows.push(vec![x, y]);
        labels.push(usize::from(x + y > 0.0));
    }
    Dataset::new(Tensor::Mat(Tensor2::from_rows(&rows).unwrap()), Targets::Classes(labels)).unwrap()
}

#[test]
fn learns_linearly_separable_toy_set() {
    let data = separable_set(3, 200);
    let spec = NetworkSpec::mlp(&[2, 8, 2], Activation::Tanh, LossKind::SoftmaxCrossEntropy, 11);
    let cfg = TrainConfig { learning_rate: 0.05, batch_size: 16, epochs: 200, ..Default::default() };
    let out = train(spec, &data, &cfg).unwrap();
    assert_eq!(accuracy(&out.network, &data).unwrap(), 1.0);
    assert_eq!(out.loss_curve.len(), 200);
}

#[test]
fn zero_epochs_is_rejected() {
    let data = separable_set(1, 10);
    let spec = NetworkSpec::mlp(&[2, 2], Activation::Tanh, LossKind::SoftmaxCrossEntropy, 0);
    let cfg = TrainConfig { epochs: 0, ..Default::default() };
    assert!(train(spec, &data, &cfg).is_err());
}

#[test]
fn fixed_seed_gives_identical_loss_curve() {
    let data = separable_set(9, 64);
    let spec = NetworkSpec::mlp(&[2, 6, 2], Activation::Relu, LossKind::SoftmaxCrossEntropy, 4);
    let cfg = TrainConfig { epochs: 15, batch_size: 8, ..Default::default() };
    let a = train(spec.clone(), &data, &cfg).unwrap();
    let b = train(spec, &data, &cfg).unwrap();
    assert_eq!(
        a.loss_curve.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.loss_curve.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(a.network.params(), b.network.params());
}

#[test]
fn divergence_names_epoch() {
    let rows = vec![vec![1e200, 1e200]; 4];
    let targets = Tensor2::from_rows(&vec![vec![-1e200]; 4]).unwrap();
    let data = Dataset::new(Tensor::Mat(Tensor2::from_rows(&rows).unwrap()), Targets::Values(targets)).unwrap();
    let spec = NetworkSpec::mlp(&[2, 1], Activation::Identity, LossKind::MeanSquared, 0);
    let err = train(spec, &data, &TrainConfig { epochs: 3, ..Default::default() }).unwrap_err();
    assert!(err.to_string().contains("epoch 0"), "{err}");
}
