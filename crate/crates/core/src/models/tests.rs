use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::Layer;
use crate::data::{collect_random, window, Rollout, Transition};
use crate::envs::{Env, EnvKind};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_arch() -> NetConfig {
    NetConfig { hidden: vec![16, 16], activation: Activation::Tanh }
}

/// Single linear layer `[out, in]`, so the field is exactly `W x + b`.
fn linear_net(weight: Vec<f64>, bias: Vec<f64>) -> MlpParams {
    let out = bias.len();
    let inp = weight.len() / out;
    MlpParams::from_layers(
        vec![Layer { weight: Tensor::matrix(out, inp, weight).unwrap(), bias: Tensor::vector(bias) }],
        Activation::Tanh,
        OutputActivation::Identity,
    )
    .unwrap()
}

/// Randomized net with a non-zero output layer.
fn random_model(kind: ModelKind, sd: usize, ad: usize, seed: u64) -> DynamicsModel {
    let mut r = rng(seed);
    let net = MlpParams::init(&[sd + ad, 8, 8, sd], Activation::Tanh, OutputActivation::Identity, &mut r).unwrap();
    let norm = Normalizer { mean: (0..sd).map(|i| 0.1 * i as f64).collect(), std: (0..sd).map(|i| 1.0 + 0.5 * i as f64).collect(), angles: vec![] };
    match kind.method() {
        Some(m) => DyNodeModel::new(net, SolverConfig::new(m, 1, 0.1).unwrap(), norm).unwrap().into(),
        None => BaselineModel::new(net, norm).unwrap().into(),
    }
}

fn random_batch(sd: usize, ad: usize, b: usize, h: usize, seed: u64) -> RolloutBatch {
    let mut r = rng(seed);
    let mut v = |n: usize| (0..n).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let rollouts: Vec<Rollout> =
        (0..b).map(|_| Rollout { initial: v(sd), actions: (0..h).map(|_| v(ad)).collect(), states: (0..h).map(|_| v(sd)).collect() }).collect();
    RolloutBatch::from_rollouts(&rollouts).unwrap()
}

#[test]
fn untrained_models_are_the_identity() {
    let env = Env::new(EnvKind::CartPoleSwingup);
    let buf = collect_random(&env, 200, 200, 0).unwrap();
    let norm = Normalizer::from_buffer(&buf).unwrap();
    for kind in ModelKind::ALL {
        let model = DynamicsModel::build(kind, &small_arch(), norm.clone(), 1, 0.05, &mut rng(1)).unwrap();
        for t in buf.iter().take(20) {
            assert_eq!(model.predict_next(&t.state, &t.action).unwrap(), t.state, "{kind}");
        }
    }
}

#[test]
fn linear_field_matches_closed_form() {
    // ds/dt = -s + a; exact step s e^{-dt} + a (1 - e^{-dt}).
    let dt = 0.1;
    let model: DynamicsModel =
        DyNodeModel::new(linear_net(vec![-1.0, 1.0], vec![0.0]), SolverConfig::new(Method::Rk4, 1, dt).unwrap(), Normalizer::identity(1))
            .unwrap()
            .into();
    for (s, a) in [(0.3, 0.0), (-1.0, 0.7), (2.0, -1.0)] {
        let exact = s * (-dt).exp() + a * (1.0 - (-dt).exp());
        let pred = model.predict_next(&[s], &[a]).unwrap()[0];
        assert!((pred - exact).abs() < 1e-6, "{pred} vs {exact}");
    }
}

#[test]
fn hand_computed_path_loss() {
    // Zero field: both predictions stay at the start state (1, 2).
    let model = DynamicsModel::build(ModelKind::DynodeEuler, &small_arch(), Normalizer::identity(2), 1, 0.1, &mut rng(0)).unwrap();
    let batch = RolloutBatch::from_rollouts(&[Rollout {
        initial: vec![1.0, 2.0],
        actions: vec![vec![0.3], vec![-0.2]],
        states: vec![vec![1.5, 1.0], vec![0.0, 2.25]],
    }])
    .unwrap();
    let expected = (0.5 + 1.0 + 1.0 + 0.25) / 4.0;
    assert!((model.path_loss(&batch).unwrap() - expected).abs() < 1e-15);
}

#[test]
fn path_loss_is_zero_for_exact_model() {
    // ds/dt = a with Euler and dt = 1 is exact in binary arithmetic here.
    let model: DynamicsModel =
        DyNodeModel::new(linear_net(vec![0.0, 1.0], vec![0.0]), SolverConfig::new(Method::Euler, 1, 1.0).unwrap(), Normalizer::identity(1))
            .unwrap()
            .into();
    let actions = [0.5, -0.25, 0.125, 1.0];
    let mut s = 0.75;
    let mut states = Vec::new();
    for a in actions {
        s += a;
        states.push(vec![s]);
    }
    let rollout = Rollout { initial: vec![0.75], actions: actions.iter().map(|a| vec![*a]).collect(), states };
    let batch = RolloutBatch::from_rollouts(std::slice::from_ref(&rollout)).unwrap();
    assert_eq!(model.path_loss(&batch).unwrap(), 0.0);
    let mut off = rollout;
    off.states[2][0] += 0.5;
    let loss = model.path_loss(&RolloutBatch::from_rollouts(&[off]).unwrap()).unwrap();
    // Open loop never feeds targets back, so only one of four entries differs.
    assert_eq!(loss, 0.5 / 4.0);
}

#[test]
fn path_loss_is_non_negative() {
    for seed in 0..10 {
        let model = random_model(ModelKind::DynodeRk4, 3, 2, seed);
        assert!(model.path_loss(&random_batch(3, 2, 4, 5, seed + 100)).unwrap() > 0.0);
    }
}

#[test]
fn horizon_one_is_one_step_error() {
    let model = random_model(ModelKind::DynodeEuler, 2, 1, 3);
    let batch = random_batch(2, 1, 6, 1, 4);
    let pred = model.predict_batch(&batch.initial, &batch.actions[0]).unwrap();
    let norm = model.normalizer();
    let (p, t) = (norm.normalize_rows(&pred), norm.normalize_rows(&batch.targets[0]));
    let manual = p.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / 12.0;
    assert!((model.path_loss(&batch).unwrap() - manual).abs() < 1e-12);
}

fn fd_check(kind: ModelKind, h: usize) {
    let model = random_model(kind, 3, 1, 7 + h as u64);
    let batch = random_batch(3, 1, 4, h, 11).normalized(model.normalizer());
    let (_, grads) = model.loss_and_grads(&batch, true).unwrap();
    let grads = grads.unwrap();
    let eps = 1e-6;
    for (li, layer) in model.net().layers.iter().enumerate() {
        for j in (0..layer.weight.len()).step_by(5) {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.net_mut().layers[li].weight.data_mut()[j] += delta;
                m.loss_and_grads(&batch, false).unwrap().0
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let g = grads.layers[li].weight.data()[j];
            let rel = (g - fd).abs() / fd.abs().max(1e-3);
            assert!(rel < 1e-4, "{kind} H={h} layer {li} weight {j}: analytic {g}, fd {fd}");
        }
        for j in 0..layer.bias.len() {
            let eval = |delta: f64| {
                let mut m = model.clone();
                m.net_mut().layers[li].bias.data_mut()[j] += delta;
                m.loss_and_grads(&batch, false).unwrap().0
            };
            let fd = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let g = grads.layers[li].bias.data()[j];
            assert!((g - fd).abs() / fd.abs().max(1e-3) < 1e-4, "{kind} H={h} layer {li} bias {j}");
        }
    }
}

#[test]
fn path_loss_gradients_match_finite_differences() {
    for h in [1, 5, 20] {
        fd_check(ModelKind::DynodeEuler, h);
        fd_check(ModelKind::DynodeRk4, h);
    }
    fd_check(ModelKind::Baseline, 1);
}

#[test]
fn baseline_and_euler_agree_one_step() {
    let dt = 0.05;
    let DynamicsModel::Baseline(base) = random_model(ModelKind::Baseline, 4, 1, 21) else { unreachable!() };
    let mut field = base.net.clone();
    let last = field.layers.last_mut().unwrap();
    last.weight = last.weight.map(|w| w / dt);
    last.bias = last.bias.map(|b| b / dt);
    let euler: DynamicsModel = DyNodeModel::new(field, SolverConfig::new(Method::Euler, 1, dt).unwrap(), base.normalizer.clone()).unwrap().into();
    let base: DynamicsModel = base.into();
    let batch = random_batch(4, 1, 16, 1, 22);
    let p1 = base.predict_batch(&batch.initial, &batch.actions[0]).unwrap();
    let p2 = euler.predict_batch(&batch.initial, &batch.actions[0]).unwrap();
    for (a, b) in p1.data().iter().zip(p2.data()) {
        assert!((a - b).abs() < 1e-12);
    }
    let (l1, l2) = (base.path_loss(&batch).unwrap(), euler.path_loss(&batch).unwrap());
    assert!((l1 - l2).abs() < 1e-12);
}

/// Episodes of `s' = s + a dt`, the exact flow of `ds/dt = a`.
fn integrator_buffer(dt: f64, episodes: usize, len: usize, seed: u64) -> ReplayBuffer {
    let mut r = rng(seed);
    let mut buf = ReplayBuffer::new(episodes * len);
    for _ in 0..episodes {
        let mut s = r.random_range(-1.0..1.0);
        for _ in 0..len {
            let a: f64 = r.random_range(-1.0..1.0);
            let next = s + a * dt;
            buf.push(Transition { state: vec![s], action: vec![a], reward: 0.0, next_state: vec![next], done: false });
            s = next;
        }
        buf.end_episode();
    }
    buf
}

#[test]
fn learns_integrator_dynamics() {
    let dt = 0.1;
    let train_buf = integrator_buffer(dt, 5, 200, 0);
    let eval_buf = integrator_buffer(dt, 2, 200, 99);
    let norm = Normalizer::from_buffer(&train_buf).unwrap();
    let mut model = DynamicsModel::build(ModelKind::DynodeEuler, &small_arch(), norm, 1, dt, &mut rng(1)).unwrap();
    let cfg = TrainConfig { horizon: 10, batch_size: 16, max_iterations: 1500, ..TrainConfig::for_kind(ModelKind::DynodeEuler) };
    let history = train(&mut model, &train_buf, &cfg).unwrap();
    assert_eq!(history.losses.len(), 1500);
    let rollouts: Vec<Rollout> = eval_buf.episodes().flat_map(|ep| (0..5).map(move |k| window(ep, k * 30, 10))).collect();
    let mpe = model.path_loss(&RolloutBatch::from_rollouts(&rollouts).unwrap()).unwrap();
    assert!(mpe < 1e-2, "open-loop error {mpe}");
}

#[test]
fn zero_iterations_leave_model_unchanged() {
    let buf = integrator_buffer(0.1, 1, 50, 0);
    let DynamicsModel::DyNode(mut m) = random_model(ModelKind::DynodeEuler, 1, 1, 0) else { unreachable!() };
    let before = m.clone();
    let cfg = TrainConfig { max_iterations: 0, ..TrainConfig::for_kind(ModelKind::DynodeEuler) };
    assert!(train_dynode(&mut m, &buf, &cfg).unwrap().losses.is_empty());
    assert_eq!(m, before);
}

#[test]
fn baseline_overfits_one_transition() {
    let mut buf = ReplayBuffer::new(1);
    let t = Transition { state: vec![0.3, -0.2], action: vec![0.5], reward: 0.0, next_state: vec![0.45, 0.1], done: false };
    buf.push(t.clone());
    let norm = Normalizer::fit([t.state.as_slice(), t.next_state.as_slice()]).unwrap();
    let DynamicsModel::Baseline(mut model) = DynamicsModel::build(ModelKind::Baseline, &small_arch(), norm, 1, 1.0, &mut rng(2)).unwrap() else {
        unreachable!()
    };
    let cfg = TrainConfig { noise_std: 0.0, batch_size: 4, max_iterations: 3000, ..TrainConfig::for_kind(ModelKind::Baseline) };
    train_baseline(&mut model, &buf, &cfg).unwrap();
    let fine = TrainConfig { learning_rate: 1e-5, max_iterations: 500, ..cfg };
    train_baseline(&mut model, &buf, &fine).unwrap();
    let pred = DynamicsModel::from(model).predict_next(&t.state, &t.action).unwrap();
    for (p, y) in pred.iter().zip(&t.next_state) {
        assert!((p - y).abs() < 1e-4, "{pred:?}");
    }
}

#[test]
fn numeric_blowup_reports_iteration() {
    let buf = integrator_buffer(0.1, 1, 50, 0);
    let mut model: DynamicsModel =
        DyNodeModel::new(linear_net(vec![1e308, 1e308], vec![0.0]), SolverConfig::new(Method::Euler, 1, 0.1).unwrap(), Normalizer::identity(1))
            .unwrap()
            .into();
    let cfg = TrainConfig { max_iterations: 5, ..TrainConfig::for_kind(ModelKind::DynodeEuler) };
    match train(&mut model, &buf, &cfg) {
        Err(e @ Error::Training { iteration: 0, .. }) => assert!(e.is_numeric()),
        other => panic!("expected a numeric training error, got {other:?}"),
    }
}

#[test]
fn mountain_car_training_makes_progress() {
    let env = Env::new(EnvKind::MountainCar);
    for seed in 0..5 {
        let buf = collect_random(&env, 500, 200, seed).unwrap();
        let norm = Normalizer::from_buffer(&buf).unwrap();
        let mut model = DynamicsModel::build(ModelKind::DynodeEuler, &small_arch(), norm, 1, env.spec().dt, &mut rng(seed)).unwrap();
        let cfg = TrainConfig { max_iterations: 300, seed, ..TrainConfig::for_kind(ModelKind::DynodeEuler) };
        let losses = train(&mut model, &buf, &cfg).unwrap().losses;
        assert!(losses[299] < losses[0], "seed {seed}: {} -> {}", losses[0], losses[299]);
    }
}

#[test]
fn training_is_deterministic() {
    let buf = integrator_buffer(0.1, 2, 100, 3);
    let run = || {
        let mut m = random_model(ModelKind::DynodeRk4, 1, 1, 4);
        let cfg = TrainConfig { horizon: 5, max_iterations: 20, ..TrainConfig::for_kind(ModelKind::DynodeRk4) };
        let h = train(&mut m, &buf, &cfg).unwrap();
        (m, h)
    };
    assert_eq!(run(), run());
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for kind in ModelKind::ALL {
        let model = random_model(kind, 2, 1, 5);
        let path = dir.path().join(format!("{kind}.bin"));
        let meta = ModelMeta { env: "pendulum".into(), horizon: kind.default_horizon(), samples: 500, seed: 3 };
        model.save(&path, &meta).unwrap();
        assert!(sidecar_path(&path).exists());
        let (back, meta2) = DynamicsModel::load(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(meta2, meta);
    }
    assert!(matches!(DynamicsModel::load(&dir.path().join("missing.bin")), Err(Error::Io { .. })));
}

#[test]
fn dimension_mismatch_is_rejected() {
    let model = random_model(ModelKind::Baseline, 2, 1, 0);
    assert!(matches!(model.predict_next(&[0.0; 3], &[0.0]), Err(Error::Shape { .. })));
    assert!(
        DyNodeModel::new(linear_net(vec![1.0, 1.0], vec![0.0]), SolverConfig::new(Method::Euler, 1, 0.1).unwrap(), Normalizer::identity(2)).is_err()
    );
}

#[test]
fn model_kind_names() {
    for kind in ModelKind::ALL {
        assert_eq!(kind.name().parse::<ModelKind>().unwrap(), kind);
    }
    assert!("mlp".parse::<ModelKind>().is_err());
}

#[test]
fn increments_ignore_full_turns_of_angles() {
    let env = Env::new(EnvKind::Pendulum);
    let buf = collect_random(&env, 300, 200, 4).unwrap();
    let norm = Normalizer::for_env(&env, &buf).unwrap();
    for kind in ModelKind::ALL {
        let mut model = DynamicsModel::build(kind, &small_arch(), norm.clone(), 1, env.spec().dt, &mut rng(2)).unwrap();
        // Give the output layer weight so the increment depends on the input.
        let mut r = rng(9);
        for v in model.net_mut().layers.last_mut().unwrap().weight.data_mut() {
            *v = r.random_range(-0.5..0.5);
        }
        let (s, a) = (vec![0.8, -1.2], vec![0.3]);
        let base = model.predict_next(&s, &a).unwrap();
        for k in [-3.0, -1.0, 1.0, 2.0] {
            let turned = vec![s[0] + k * std::f64::consts::TAU, s[1]];
            let out = model.predict_next(&turned, &a).unwrap();
            for d in 0..2 {
                assert!(((out[d] - turned[d]) - (base[d] - s[d])).abs() < 1e-9, "{kind} k={k} dim {d}");
            }
        }
    }
}
