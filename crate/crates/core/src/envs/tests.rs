use proptest::prelude::*;

use super::*;
use crate::autodiff::Tensor;
use crate::ode::ode_step;

#[test]
fn names_round_trip() {
    for kind in EnvKind::ALL {
        assert_eq!(Env::from_name(kind.name()).unwrap().kind(), kind);
    }
    assert!(Env::from_name("cheetah-run").is_err());
}

#[test]
fn mountain_car_reset_distribution() {
    let env = Env::new(EnvKind::MountainCar);
    for seed in 0..200 {
        let s = env.reset(seed);
        assert!((-0.6..=-0.4).contains(&s[0]));
        assert_eq!(s[1], 0.0);
    }
}

#[test]
fn pendulum_reset_distribution() {
    let env = Env::new(EnvKind::Pendulum);
    for seed in 0..200 {
        let s = env.reset(seed);
        assert!((-PI..=PI).contains(&s[0]));
        assert!((-1.0..=1.0).contains(&s[1]));
    }
}

#[test]
fn reset_is_deterministic_per_seed() {
    for kind in EnvKind::ALL {
        let env = Env::new(kind);
        assert_eq!(env.reset(42), env.reset(42));
        assert_ne!(env.reset(42), env.reset(43));
    }
}

#[test]
fn cartpole_variants_start_differently() {
    let swing = Env::new(EnvKind::CartPoleSwingup).reset(1);
    let balance = Env::new(EnvKind::CartPoleBalance).reset(1);
    assert!((swing[2] - PI).abs() <= 0.05);
    assert!(balance[2].abs() <= 0.05);
}

#[test]
fn mountain_car_closed_form_update() {
    let env = Env::new(EnvKind::MountainCar);
    let step = env.step(&[-0.5, 0.0], &[0.0]).unwrap();
    let v = -0.0025 * (3.0f64 * -0.5).cos();
    assert_eq!(step.state, vec![-0.5 + v, v]);
    assert!(!step.done);
    assert_eq!(step.reward, 0.0);
}

#[test]
fn mountain_car_left_wall_stops_the_car() {
    let env = Env::new(EnvKind::MountainCar);
    let step = env.step(&[-1.19, -0.05], &[-1.0]).unwrap();
    assert_eq!(step.state, vec![-1.2, 0.0]);
}

#[test]
fn mountain_car_goal_terminates_with_bonus() {
    let env = Env::new(EnvKind::MountainCar);
    let step = env.step(&[0.44, 0.05], &[0.5]).unwrap();
    assert!(step.done);
    assert!((step.reward - (100.0 - 0.1 * 0.25)).abs() < 1e-12);
}

#[test]
fn mountain_car_has_no_field() {
    let env = Env::new(EnvKind::MountainCar);
    assert!(matches!(env.analytic_field(), Err(Error::Unsupported(_))));
    assert!(matches!(env.derivative(&[0.0, 0.0], &[0.0]), Err(Error::Unsupported(_))));
}

#[test]
fn hanging_pendulum_stays_at_rest() {
    let env = Env::new(EnvKind::Pendulum);
    let mut s = vec![PI, 0.0];
    for _ in 0..200 {
        s = env.step(&s, &[0.0]).unwrap().state;
    }
    assert!((s[0] - PI).abs() < 1e-12 && s[1].abs() < 1e-12, "{s:?}");
}

#[test]
fn pendulum_field_matches_formula() {
    let env = Env::new(EnvKind::Pendulum);
    let (th, thd, a) = (0.7, -1.3, 0.4);
    let d = env.derivative(&[th, thd], &[a]).unwrap();
    assert_eq!(d[0], thd);
    let expected = -(3.0 * 10.0 / 2.0) * (th + PI).sin() + 3.0 * (a * 2.0);
    assert!((d[1] - expected).abs() < 1e-12);
}

#[test]
fn cartpole_down_at_rest_has_zero_field() {
    let env = Env::new(EnvKind::CartPoleSwingup);
    let d = env.derivative(&[0.0, 0.0, PI, 0.0], &[0.0]).unwrap();
    assert!(d.iter().all(|v| v.abs() < 1e-12), "{d:?}");
}

#[test]
fn upright_cartpole_falls_over() {
    let env = Env::new(EnvKind::CartPoleBalance);
    let mut s: Vec<f64> = vec![0.0, 0.0, 1e-4, 0.0];
    let mut prev = s[2].abs();
    for _ in 0..40 {
        s = env.step(&s, &[0.0]).unwrap().state;
        assert!(s[2].abs() > prev);
        prev = s[2].abs();
    }
    assert!(prev > 1e-2);
}

#[test]
fn step_matches_solver_on_analytic_field() {
    for kind in [EnvKind::Pendulum, EnvKind::CartPoleSwingup, EnvKind::CartPoleBalance] {
        let env = Env::new(kind);
        let field = env.analytic_field().unwrap();
        let mut s = env.reset(5);
        for k in 0..50 {
            let a = [((k as f64) * 0.37).sin()];
            let stepped = env.step(&s, &a).unwrap().state;
            let mut tape = Tape::new();
            let sv = tape.leaf(Tensor::vector(s.clone()));
            let av = tape.leaf(Tensor::vector(a.to_vec()));
            let out = ode_step(&field, &mut tape, sv, av, &env.internal_solver()).unwrap();
            for (x, y) in tape.value(out).data().iter().zip(&stepped) {
                assert!((x - y).abs() < 1e-10, "{kind} step {k}");
            }
            s = stepped;
        }
    }
}

#[test]
fn undriven_pendulum_conserves_energy() {
    let energy = |s: &[f64]| {
        let (m, l, g) = (constants::pendulum::MASS, constants::pendulum::LENGTH, constants::pendulum::GRAVITY);
        0.5 * (m * l * l / 3.0) * s[1] * s[1] + m * g * (l / 2.0) * s[0].cos()
    };
    let env = Env::new(EnvKind::Pendulum);
    let h = constants::pendulum::DT / constants::pendulum::SUBSTEPS as f64;
    let cfg = SolverConfig { method: Method::Rk4, substeps: 1, dt: h };
    let mut s = vec![2.5, 0.0];
    let e0 = energy(&s);
    for _ in 0..200 {
        s = integrate(|s, a| env.derivative(s, a).unwrap(), &s, &[0.0], &cfg);
    }
    let drift = ((energy(&s) - e0) / e0).abs();
    assert!(drift < 1e-3, "relative drift {drift}");
}

#[test]
fn actions_are_clipped() {
    let env = Env::new(EnvKind::Pendulum);
    let s = [0.3, 0.1];
    assert_eq!(env.step(&s, &[5.0]).unwrap(), env.step(&s, &[1.0]).unwrap());
}

#[test]
fn wrong_dimensions_are_rejected() {
    let env = Env::new(EnvKind::CartPoleSwingup);
    assert!(env.step(&[0.0, 0.0], &[0.0]).is_err());
    assert!(env.step(&[0.0; 4], &[0.0, 1.0]).is_err());
}

#[test]
fn rewards_follow_definitions() {
    let pend = Env::new(EnvKind::Pendulum);
    // 2π + 0.1 wraps to 0.1.
    let r = pend.reward(&[2.0 * PI + 0.1, 1.0], &[0.5], &[0.0, 0.0]);
    assert!((r + (0.01 + 0.1 + 0.001)).abs() < 1e-12);
    let swing = Env::new(EnvKind::CartPoleSwingup);
    assert_eq!(swing.reward(&[0.0; 4], &[0.0], &[0.0, 0.0, 0.0, 0.0]), 1.0);
    assert!(swing.reward(&[0.0; 4], &[0.0], &[0.0, 0.0, PI, 0.0]).abs() < 1e-15);
    let bal = Env::new(EnvKind::CartPoleBalance);
    assert_eq!(bal.reward(&[0.0; 4], &[0.0], &[0.0, 0.0, 0.1, 0.0]), 1.0);
    assert_eq!(bal.reward(&[0.0; 4], &[0.0], &[0.0, 0.0, 0.3, 0.0]), 0.0);
}

#[test]
fn wrap_angle_range() {
    for x in [-10.0, -PI, -0.5, 0.0, PI - 1e-9, PI, 7.5, 100.0] {
        let w = wrap_angle(x);
        assert!((-PI..PI).contains(&w));
        assert!(((x - w) / (2.0 * PI)).fract().abs() < 1e-9 || ((x - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
    }
}

#[test]
fn observations_have_declared_width() {
    for kind in EnvKind::ALL {
        let env = Env::new(kind);
        assert_eq!(env.observe(&env.reset(0)).len(), env.observation_dim());
    }
}

#[test]
fn energy_pumping_reaches_goal() {
    let env = Env::new(EnvKind::MountainCar);
    let mut s = vec![-0.5, 0.0];
    let mut steps = 0;
    loop {
        let step = env.step(&s, &energy_pumping_action(&s)).unwrap();
        s = step.state;
        steps += 1;
        if step.done {
            break;
        }
        assert!(steps < 400, "controller failed to reach the goal");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn random_trajectories_stay_in_bounds_and_replay_identically(
        kind_idx in 0usize..4,
        seed in any::<u64>(),
        actions in proptest::collection::vec(-1.5f64..1.5, 1..150),
    ) {
        let env = Env::new(EnvKind::ALL[kind_idx]);
        let run = || {
            let mut s = env.reset(seed);
            let mut out = vec![s.clone()];
            for a in &actions {
                let step = env.step(&s, &[*a]).unwrap();
                s = step.state;
                out.push(s.clone());
                if step.done { break; }
            }
            out
        };
        let first = run();
        for s in &first {
            prop_assert!(env.in_bounds(s), "{:?} out of bounds", s);
        }
        let second = run();
        let bits = |v: &Vec<Vec<f64>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&first), bits(&second));
    }
}
